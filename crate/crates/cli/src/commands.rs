// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sts_core::sae::{encode_stream, load_model, save_model};
use sts_core::shift::{concentration as shift_concentration, overlap as set_overlap, shift_scores, top_n, zero_dims};
use sts_core::stats::correlate as fit_correlation;
use sts_core::sts::{mixture_ratios, score_domains, DomainInput};
use sts_core::synth::{
    match_shifted_to_raw, match_shifted_to_sae, planted_performance_shift, sample_stream,
};
use sts_core::{
    align_pairs, read_dump, write_dump, ActivationDump, ActivationLaw, CorrelationResult, Domain,
    Error, PairedStream, Result, SaeModel, SeedSummary, ShiftReport, Space, StsMode, StsTable,
    SynthSpec, SynthWorld, TrainConfig,
};

use crate::inputs::{
    parse_dims, parse_f64_list, parse_feature_arg, parse_named_values, parse_pair_arg, read_perf,
    read_text, write_text,
};
use crate::{
    AggregateArgs, Arch, ConcentrationArgs, CorrelateArgs, EncodeArgs, MatchArgs, MixArgs,
    OverlapArgs, ReportArgs, ScoreArgs, ShiftArgs, SynthArgs, TrainArgs, ZeroArgs,
};

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn inputs_ok() -> Result<()> {
    println!("inputs valid");
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serialises")
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `dir/model.stsm` → `dir/model.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn synth(a: SynthArgs, check: bool) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_toml(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(tokens) = a.tokens {
        spec.tokens_per_stream = tokens;
    }
    spec.validate()?;
    if a.domain_tokens == 0 {
        return Err(invalid("--domain-tokens must be positive"));
    }
    if check {
        return inputs_ok();
    }
    let mut world = SynthWorld::build(&spec)?;
    if let Some(snr) = a.snr {
        world.set_snr(snr)?;
    }
    let spec = &world.spec;
    create_dir(&a.out)?;
    write_text(&a.out.join("spec.toml"), &spec.to_toml())?;

    let n = spec.tokens_per_stream;
    let seed = a.sample_seed;
    write_dump(&sample_stream(&world, Domain::Mixture, false, n, seed)?, a.out.join("mix.stsd"))?;
    for (flag, tag) in [(false, "plain"), (true, "ctx")] {
        let dump = sample_stream(&world, Domain::Train, flag, n, seed)?;
        write_dump(&dump, a.out.join(format!("train.{tag}.stsd")))?;
    }
    let mut perf = String::from("domain_id,shift\n");
    let mut planted = BTreeMap::new();
    for domain in world.domains() {
        for (flag, tag) in [(false, "plain"), (true, "ctx")] {
            let dump = sample_stream(&world, domain, flag, a.domain_tokens, seed)?;
            write_dump(&dump, a.out.join(format!("{domain}.{tag}.stsd")))?;
        }
        let delta = planted_performance_shift(&world, domain)?;
        perf.push_str(&format!("{domain},{delta}\n"));
        planted.insert(domain.to_string(), delta);
    }
    write_text(&a.out.join("perf.csv"), &perf)?;
    let truth = json!({
        "shifted": world.shifted,
        "noise_sigma": spec.noise_sigma,
        "planted_shift": planted,
    });
    write_text(&a.out.join("truth.json"), &to_json(&truth))?;
    if a.oracle {
        save_model(&world.oracle_sae()?, a.out.join("oracle.stsm"))?;
    }
    println!(
        "world: d={} s_true={} |S|={} domains={} sigma={:.6}",
        spec.d,
        spec.s_true,
        world.shifted.len(),
        spec.n_domains,
        spec.noise_sigma
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn build_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    match a.arch {
        Some(Arch::Topk) => {
            let k = a.k.or(match cfg.law {
                ActivationLaw::TopK { k } => Some(k),
                ActivationLaw::Relu => None,
            });
            let k = k.ok_or_else(|| invalid("--arch topk needs --k"))?;
            cfg.law = ActivationLaw::TopK { k };
        }
        Some(Arch::Relu) => {
            if a.k.is_some() {
                return Err(invalid("--k only applies to --arch topk"));
            }
            cfg.law = ActivationLaw::Relu;
        }
        None => {
            if let Some(k) = a.k {
                match cfg.law {
                    ActivationLaw::TopK { .. } => cfg.law = ActivationLaw::TopK { k },
                    ActivationLaw::Relu => return Err(invalid("--k only applies to --arch topk")),
                }
            }
        }
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    if let Some(l1) = a.l1 {
        cfg.l1_max = l1;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(steps) = a.steps {
        let defaults = TrainConfig::default();
        cfg.total_steps = steps;
        // keep the default warmup fractions when the run length changes
        if a.config.is_none() {
            cfg.lr_warmup_steps = steps * defaults.lr_warmup_steps / defaults.total_steps;
            cfg.l1_warmup_steps = steps * defaults.l1_warmup_steps / defaults.total_steps;
        }
    }
    if let Some(w) = a.lr_warmup {
        cfg.lr_warmup_steps = w;
    }
    if let Some(w) = a.l1_warmup {
        cfg.l1_warmup_steps = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_sae(a: TrainArgs, check: bool) -> Result<()> {
    let cfg = build_train_config(&a)?;
    let dump = read_dump(&a.activations)?;
    if dump.space() != Space::Raw {
        return Err(invalid(format!(
            "{}: expected raw activations, found {}",
            a.activations.display(),
            dump.space()
        )));
    }
    if dump.n_tokens() < cfg.batch_size {
        return Err(invalid(format!(
            "{} tokens is fewer than one batch of {}",
            dump.n_tokens(),
            cfg.batch_size
        )));
    }
    if check {
        return inputs_ok();
    }
    let (model, log) = sts_core::train::train(&dump, &cfg)?;
    save_model(&model, &a.out)?;
    write_text(&sibling(&a.out, "config.toml"), &cfg.to_toml())?;
    log.write_jsonl(sibling(&a.out, "log.jsonl"))?;
    let s = &log.summary;
    println!(
        "trained {} d={} s={} for {} steps",
        cfg.law,
        model.d(),
        model.s(),
        s.steps
    );
    println!(
        "reconstruction {:.6} -> {:.6}, mean L0 {:.3}, dead features {}",
        s.initial_recon_loss, s.final_recon_loss, s.final_mean_l0, s.dead_features
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn encode(a: EncodeArgs, check: bool) -> Result<()> {
    let dump = read_dump(&a.activations)?;
    let model = load_model(&a.sae)?;
    if check {
        return inputs_ok();
    }
    let features = encode_stream(&model, &dump)?;
    write_dump(&features, &a.out)?;
    println!(
        "encoded {} tokens into {} features, mean L0 {:.3}",
        features.n_tokens(),
        features.dim(),
        sts_core::sae::mean_l0(features.data())?
    );
    Ok(())
}

/// Aligns two dumps, encoding them first when a model is given.
fn load_pair(plain: &Path, ctx: &Path, sae: Option<&SaeModel>) -> Result<PairedStream> {
    let pair = align_pairs(&read_dump(plain)?, &read_dump(ctx)?)?;
    match sae {
        Some(m) if pair.space() == Space::Raw => m.encode_pair(&pair),
        _ => Ok(pair),
    }
}

pub fn shift(a: ShiftArgs, check: bool) -> Result<()> {
    let sae = a.sae.as_deref().map(load_model).transpose()?;
    let pair = load_pair(&a.plain, &a.ctx, sae.as_ref())?;
    if a.top_n == 0 || a.top_n > pair.dim() {
        return Err(invalid(format!(
            "--top-n {} out of range for {} dimensions",
            a.top_n,
            pair.dim()
        )));
    }
    if check {
        return inputs_ok();
    }
    let report = top_n(&shift_scores(&pair)?, a.top_n, pair.space())?;
    report.write(&a.out, a.full_ranking)?;
    println!(
        "{} aligned tokens, {} {} dimensions",
        pair.len(),
        pair.dim(),
        pair.space()
    );
    for &j in report.ranking.iter().take(10) {
        println!("  dim {j:>6}  score {:.6e}", report.scores[j]);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn score(a: ScoreArgs, check: bool) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    let mode = StsMode::from(a.mode);
    let sae = a.sae.as_deref().map(load_model).transpose()?;

    let mut ids: Vec<String> = Vec::new();
    let mut features: BTreeMap<String, ActivationDump> = BTreeMap::new();
    let mut pairs: BTreeMap<String, PairedStream> = BTreeMap::new();
    for arg in &a.features {
        let (id, path) = parse_feature_arg(arg)?;
        let mut dump = read_dump(&path)?;
        if let (Some(m), Space::Raw) = (&sae, dump.space()) {
            dump = encode_stream(m, &dump)?;
        }
        if features.insert(id.clone(), dump).is_some() {
            return Err(invalid(format!("--features given twice for `{id}`")));
        }
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    for arg in &a.pairs {
        let (id, plain, ctx) = parse_pair_arg(arg)?;
        let pair = load_pair(&plain, &ctx, sae.as_ref())?;
        if pairs.insert(id.clone(), pair).is_some() {
            return Err(invalid(format!("--pair given twice for `{id}`")));
        }
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(invalid("no domains given (use --features or --pair)"));
    }
    for id in &ids {
        match mode {
            StsMode::Act if !features.contains_key(id) => {
                return Err(invalid(format!("act mode needs --features for `{id}`")))
            }
            StsMode::Icl if !pairs.contains_key(id) => {
                return Err(invalid(format!("icl mode needs --pair for `{id}`")))
            }
            _ => {}
        }
    }
    let perf = a.perf.as_deref().map(read_perf).transpose()?;
    let inputs: Vec<DomainInput<'_>> = ids
        .iter()
        .map(|id| DomainInput {
            id,
            features: features.get(id),
            pair: pairs.get(id),
        })
        .collect();
    if check {
        return inputs_ok();
    }
    let mut table = score_domains(&inputs, &dims, perf.as_deref())?;
    table.dims_source = a.dims.clone();
    table.write_json(&a.out)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &table.to_csv())?;
    }
    println!("{} domains over {} dimensions", table.rows.len(), dims.len());
    for r in &table.rows {
        let v = r.score(mode).map_or("-".into(), |v| format!("{v:.6e}"));
        let p = r.perf_shift_abs.map_or("-".into(), |v| format!("{v:.6}"));
        println!("  {:<24} sts {v:>14}  |shift| {p}", r.domain_id);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_correlation(c: &CorrelationResult) {
    println!(
        "n = {}, rho = {:.6}, R² = {:.6}, slope = {:.6}, intercept = {:.6}",
        c.n, c.rho, c.r_squared, c.slope, c.intercept
    );
}

pub fn correlate(a: CorrelateArgs, check: bool) -> Result<()> {
    let (x, y) = match (&a.table, &a.x, &a.y) {
        (Some(t), _, _) => StsTable::read_json(t)?.scatter(a.mode.into()),
        (None, Some(x), Some(y)) => (parse_f64_list(x)?, parse_f64_list(y)?),
        _ => return Err(invalid("give either --table or both --x and --y")),
    };
    if x.len() != y.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if check {
        return inputs_ok();
    }
    let c = fit_correlation(&x, &y)?;
    print_correlation(&c);
    if let Some(out) = &a.out {
        write_text(out, &c.to_json())?;
    }
    if let Some(path) = &a.scatter {
        write_text(path, &sts_core::stats::scatter_with_fit(&x, &y, &c))?;
    }
    Ok(())
}

pub fn aggregate(a: AggregateArgs, check: bool) -> Result<()> {
    let mut results = Vec::new();
    for path in &a.results {
        let text = read_text(path)?;
        let c: CorrelationResult = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("{}: bad correlation result: {e}", path.display())))?;
        results.push(c);
    }
    if check {
        return inputs_ok();
    }
    let summary = SeedSummary::new(&results)?;
    println!("{summary}");
    if let Some(out) = &a.out {
        write_text(out, &to_json(&summary))?;
    }
    Ok(())
}

pub fn overlap(a: OverlapArgs, check: bool) -> Result<()> {
    let sa = parse_dims(&a.a)?;
    let sb = parse_dims(&a.b)?;
    if check {
        return inputs_ok();
    }
    let n = set_overlap(&sa, &sb);
    let out = json!({
        "overlap": n,
        "size_a": sa.len(),
        "size_b": sb.len(),
        "recall_of_b": n as f64 / sb.len() as f64,
    });
    println!("{}", to_json(&out));
    Ok(())
}

pub fn mix(a: MixArgs, check: bool) -> Result<()> {
    let values = match &a.table {
        Some(t) => StsTable::read_json(t)?.scores(a.mode.into()),
        None => parse_named_values(&a.values)?,
    };
    if values.is_empty() {
        return Err(invalid("no values given (use --values or --table)"));
    }
    if check {
        return inputs_ok();
    }
    let weights = mixture_ratios(&values)?;
    for (id, w) in &weights {
        println!("{id}\t{w:.4}");
    }
    if let Some(out) = &a.out {
        let rows: Vec<_> = weights
            .iter()
            .map(|(id, w)| json!({"domain_id": id, "weight": w}))
            .collect();
        write_text(out, &to_json(&rows))?;
    }
    Ok(())
}

pub fn concentration(a: ConcentrationArgs, check: bool) -> Result<()> {
    let report = ShiftReport::read(&a.report)?;
    let fractions = parse_f64_list(&a.fractions)?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(invalid(format!("fraction {f} must lie in (0, 1]")));
    }
    if check {
        return inputs_ok();
    }
    let curve = shift_concentration(&report.scores)?;
    let mut top = BTreeMap::new();
    for f in &fractions {
        let share = curve.top_fraction(*f);
        println!("top {:>6.2}% of dimensions hold {:.4} of the shift mass", f * 100.0, share);
        top.insert(f.to_string(), share);
    }
    if let Some(out) = &a.out {
        write_text(out, &to_json(&json!({"top": top, "curve": curve.fractions})))?;
    }
    Ok(())
}

pub fn zero(a: ZeroArgs, check: bool) -> Result<()> {
    let dump = read_dump(&a.features)?;
    let dims = parse_dims(&a.dims)?;
    if check {
        return inputs_ok();
    }
    let out = zero_dims(&dump, &dims)?;
    write_dump(&out, &a.out)?;
    println!("zeroed {} dimensions of {} tokens", dims.len(), out.n_tokens());
    Ok(())
}

pub fn match_planted(a: MatchArgs, check: bool) -> Result<()> {
    let spec = SynthSpec::from_toml(&read_text(&a.spec)?)?;
    let sae = a.sae.as_deref().map(load_model).transpose()?;
    if check {
        return inputs_ok();
    }
    let world = SynthWorld::build(&spec)?;
    let m = match &sae {
        Some(model) => match_shifted_to_sae(&world, model)?,
        None => match_shifted_to_raw(&world)?,
    };
    let out = json!({
        "dims": m.targets(),
        "mean_cos": m.mean_cos(),
        "pairs": m.pairs,
    });
    write_text(&a.out, &to_json(&out))?;
    println!(
        "matched {} planted features, mean |cos| {:.4}",
        m.pairs.len(),
        m.mean_cos()
    );
    Ok(())
}

pub fn report(a: ReportArgs, check: bool) -> Result<()> {
    let table = StsTable::read_json(&a.table)?;
    let mode = StsMode::from(a.mode);
    let rows: Vec<_> = table
        .rows
        .iter()
        .filter_map(|r| Some((r.domain_id.as_str(), r.score(mode)?, r.perf_shift_abs?)))
        .collect();
    if check {
        return inputs_ok();
    }
    let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let c = fit_correlation(&x, &y)?;
    create_dir(&a.out_dir)?;
    let mut csv = String::from("domain_id,sts,abs_shift,fitted\n");
    for (id, xv, yv) in &rows {
        csv.push_str(&format!("{id},{xv},{yv},{}\n", c.slope * xv + c.intercept));
    }
    write_text(&a.out_dir.join("scatter.csv"), &csv)?;
    write_text(&a.out_dir.join("correlation.json"), &c.to_json())?;
    print_correlation(&c);
    println!("wrote {}", a.out_dir.display());
    Ok(())
}
