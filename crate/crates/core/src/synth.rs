// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted synthetic worlds.
//!
//! A world is a dictionary of unit-norm feature directions with positive
//! amplitudes, a planted set `S` of features whose amplitude is boosted by
//! `1 + δ` when context is present, and per-domain firing loadings. Each
//! downstream domain has a known performance shift
//! `Δ_g = Σ_{j∈S} π_g[j]·a_j·δ`, so every stage of the pipeline can be
//! checked against ground truth.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation_io::{ActivationDump, Manifest, PairedStream, Segment, Space};
use crate::error::{ensure, Error, Result};
use crate::linalg::{Matrix, Real};
use crate::sae::{encode_stream, ActivationLaw, SaeModel};
use crate::shift::{concentration, shift_scores, top_n, zero_dims, ShiftReport};
use crate::stats::{correlate, CorrelationResult};
use crate::sts::{score_domains, sts_act, DomainInput, StsMode, StsTable};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Activation dimension.
    pub d: usize,
    /// Number of planted features.
    pub s_true: usize,
    /// Number of downstream domains.
    pub n_domains: usize,
    /// `|S|`.
    pub shifted_count: usize,
    /// Expected number of features firing per token.
    pub active_per_token: f64,
    /// Context gain δ on features in `S`.
    pub shift_gain: f64,
    /// Standard deviation σ of isotropic Gaussian noise.
    pub noise_sigma: f64,
    pub tokens_per_stream: usize,
    pub seed: u64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Tokens per synthetic document in emitted manifests.
    pub doc_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 512,
            s_true: 1024,
            n_domains: 12,
            shifted_count: 50,
            active_per_token: 8.0,
            shift_gain: 1.0,
            noise_sigma: 0.0,
            tokens_per_stream: 20_000,
            seed: 0,
            amplitude_min: 1.0,
            amplitude_max: 2.0,
            doc_len: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1, "d must be positive");
        ensure!(self.s_true >= 1, "s_true must be positive");
        ensure!(self.n_domains >= 1, "n_domains must be positive");
        ensure!(
            self.shifted_count <= self.s_true,
            "shifted_count {} exceeds s_true {}",
            self.shifted_count,
            self.s_true
        );
        ensure!(
            self.active_per_token > 0.0 && self.active_per_token <= self.s_true as f64,
            "active_per_token {} must lie in (0, s_true = {}]",
            self.active_per_token,
            self.s_true
        );
        ensure!(
            self.shift_gain.is_finite() && self.shift_gain >= 0.0,
            "shift_gain must be finite and non-negative"
        );
        ensure!(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma must be finite and non-negative"
        );
        ensure!(self.tokens_per_stream >= 1, "tokens_per_stream must be positive");
        ensure!(
            self.amplitude_min > 0.0 && self.amplitude_min <= self.amplitude_max,
            "amplitude range must satisfy 0 < min <= max"
        );
        ensure!(self.doc_len >= 1, "doc_len must be positive");
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::validation(format!("bad synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Which token distribution a stream is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    /// The post-training domain; loads fully on `S`.
    Train,
    /// Average of the training and all downstream distributions.
    Mixture,
    Downstream(usize),
}

impl Domain {
    fn stream_id(self) -> u64 {
        match self {
            Domain::Train => 0,
            Domain::Mixture => 1,
            Domain::Downstream(g) => 2 + g as u64,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Train => f.write_str("train"),
            Domain::Mixture => f.write_str("mix"),
            Domain::Downstream(g) => write!(f, "domain-{g:02}"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Domain::Train),
            "mix" => Ok(Domain::Mixture),
            _ => s
                .strip_prefix("domain-")
                .and_then(|g| g.parse().ok())
                .map(Domain::Downstream)
                .ok_or_else(|| Error::validation(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    /// Dictionary columns back to back: feature `j` is `[j*d, (j+1)*d)`.
    pub dictionary: Vec<f32>,
    pub amplitudes: Vec<f64>,
    pub shifted: BTreeSet<usize>,
    pub train_loading: Vec<f64>,
    pub domain_loadings: Vec<Vec<f64>>,
}

/// `count` unit vectors of length `d`: orthonormal when `count <= d`,
/// independent Gaussian directions otherwise.
fn unit_directions(count: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if count <= d {
                for u in &out {
                    let c: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                out.push(v);
                break;
            }
        }
    }
    out.into_iter().flatten().map(|v| v as f32).collect()
}

/// Builds a world deterministically from `seed`.
pub fn build_world(spec: &SynthSpec, seed: u64) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, s) = (spec.d, spec.s_true);
    let dictionary = unit_directions(s, d, &mut rng);
    let amplitudes: Vec<f64> = (0..s)
        .map(|_| rng.random_range(spec.amplitude_min..=spec.amplitude_max))
        .collect();
    let shifted: BTreeSet<usize> = rand::seq::index::sample(&mut rng, s, spec.shifted_count)
        .into_iter()
        .collect();
    let train_loading = (0..s)
        .map(|j| if shifted.contains(&j) { 1.0 } else { rng.random::<f64>() })
        .collect();
    // stratified weights on S so the domains spread over [0, 1]
    let mut strata: Vec<usize> = (0..spec.n_domains).collect();
    strata.shuffle(&mut rng);
    let domain_loadings = strata
        .iter()
        .map(|&k| {
            let w = (k as f64 + rng.random::<f64>()) / spec.n_domains as f64;
            (0..s)
                .map(|j| {
                    if shifted.contains(&j) {
                        w * rng.random_range(0.5..1.0)
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect();
    Ok(SynthWorld {
        spec: spec.clone(),
        dictionary,
        amplitudes,
        shifted,
        train_loading,
        domain_loadings,
    })
}

/// Firing probabilities `min(1, c·π)` with `c` chosen so that `Σ c·π` equals
/// the expected active count.
fn firing_probabilities(loading: &[f64], active: f64) -> Vec<f64> {
    let total: f64 = loading.iter().sum();
    if total <= 0.0 {
        return vec![0.0; loading.len()];
    }
    let c = active / total;
    loading.iter().map(|p| (c * p).min(1.0)).collect()
}

impl SynthWorld {
    /// Builds the world for `spec.seed`.
    pub fn build(spec: &SynthSpec) -> Result<Self> {
        build_world(spec, spec.seed)
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn s_true(&self) -> usize {
        self.spec.s_true
    }

    pub fn atom(&self, j: usize) -> &[f32] {
        &self.dictionary[j * self.spec.d..(j + 1) * self.spec.d]
    }

    pub fn domains(&self) -> impl Iterator<Item = Domain> {
        (0..self.spec.n_domains).map(Domain::Downstream)
    }

    fn check_domain(&self, domain: Domain) -> Result<()> {
        if let Domain::Downstream(g) = domain {
            ensure!(
                g < self.spec.n_domains,
                "domain {g} out of range ({} domains)",
                self.spec.n_domains
            );
        }
        Ok(())
    }

    /// Loading vector π of `domain`.
    pub fn loading(&self, domain: Domain) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        Ok(match domain {
            Domain::Train => self.train_loading.clone(),
            Domain::Downstream(g) => self.domain_loadings[g].clone(),
            Domain::Mixture => {
                let all: Vec<&Vec<f64>> = std::iter::once(&self.train_loading)
                    .chain(&self.domain_loadings)
                    .collect();
                (0..self.spec.s_true)
                    .map(|j| all.iter().map(|l| l[j]).sum::<f64>() / all.len() as f64)
                    .collect()
            }
        })
    }

    /// Per-feature firing probabilities of `domain`.
    pub fn firing(&self, domain: Domain) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        let active = self.spec.active_per_token;
        Ok(match domain {
            Domain::Mixture => {
                let all: Vec<Vec<f64>> = std::iter::once(&self.train_loading)
                    .chain(&self.domain_loadings)
                    .map(|l| firing_probabilities(l, active))
                    .collect();
                (0..self.spec.s_true)
                    .map(|j| all.iter().map(|p| p[j]).sum::<f64>() / all.len() as f64)
                    .collect()
            }
            _ => firing_probabilities(&self.loading(domain)?, active),
        })
    }

    /// Sets σ so that `mean‖D·f‖ / (σ·√d) = snr`, estimating the signal norm
    /// on a fixed sample of training-domain tokens.
    pub fn set_snr(&mut self, snr: f64) -> Result<()> {
        ensure!(snr.is_finite() && snr > 0.0, "SNR must be positive, got {snr}");
        let sigma = self.spec.noise_sigma;
        self.spec.noise_sigma = 0.0;
        let sample = sample_stream(self, Domain::Train, false, 2_000, 0x5eed);
        self.spec.noise_sigma = sigma;
        let sample = sample?;
        let mean_norm = sample
            .data()
            .iter_rows()
            .map(|r| r.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / sample.n_tokens() as f64;
        self.spec.noise_sigma = mean_norm / (snr * (self.spec.d as f64).sqrt());
        Ok(())
    }

    /// Decoder-aligned oracle SAE: encoder and decoder both equal the true
    /// dictionary, ReLU with a threshold of half the smallest amplitude.
    pub fn oracle_sae(&self) -> Result<SaeModel<f32>> {
        let s = self.spec.s_true;
        let threshold = (0.5 * self.spec.amplitude_min) as f32;
        SaeModel::new(
            self.spec.d,
            s,
            ActivationLaw::Relu,
            self.dictionary.clone(),
            vec![threshold; s],
            self.dictionary.clone(),
            vec![0.0; self.spec.d],
        )
    }
}

/// Samples a raw stream from `domain`.
///
/// Each token fires feature `j` independently with the domain's firing
/// probability; a fired feature contributes `a_j` (times `1 + δ` for `j ∈ S`
/// when `with_context_shift`) along its direction, plus `σ`-Gaussian noise.
/// The random draws do not depend on `with_context_shift`, so the two
/// variants for one seed are row-aligned with identical firing and noise.
pub fn sample_stream(
    world: &SynthWorld,
    domain: Domain,
    with_context_shift: bool,
    n_tokens: usize,
    seed: u64,
) -> Result<ActivationDump> {
    ensure!(n_tokens >= 1, "n_tokens must be positive");
    let probs = world.firing(domain)?;
    let spec = &world.spec;
    let d = spec.d;
    let gains: Vec<f32> = (0..spec.s_true)
        .map(|j| {
            let boost = if with_context_shift && world.shifted.contains(&j) {
                1.0 + spec.shift_gain
            } else {
                1.0
            };
            (world.amplitudes[j] * boost) as f32
        })
        .collect();
    let sigma = spec.noise_sigma as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.stream_id());
    let mut data = vec![0.0f32; n_tokens * d];
    for row in data.chunks_exact_mut(d) {
        for (j, &p) in probs.iter().enumerate() {
            if rng.random::<f64>() < p {
                crate::linalg::axpy(gains[j], world.atom(j), row);
            }
        }
        for v in row.iter_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        }
    }
    let segments = (0..n_tokens)
        .step_by(spec.doc_len)
        .enumerate()
        .map(|(i, start)| {
            let len = spec.doc_len.min(n_tokens - start);
            Segment::query(format!("{domain}/{i:05}"), start as u64, len as u64)
        })
        .collect();
    let tag = if with_context_shift { "ctx" } else { "plain" };
    let manifest = Manifest {
        source_id: format!("synth:{domain}:{tag}"),
        layer: 0,
        n_tokens: n_tokens as u64,
        dim: d as u64,
        space: Space::Raw,
        segments,
    };
    ActivationDump::new(manifest, Matrix::from_vec(n_tokens, d, data)?)
}

/// Row-aligned plain / in-context raw streams of `domain`.
pub fn sample_pair(
    world: &SynthWorld,
    domain: Domain,
    n_tokens: usize,
    seed: u64,
) -> Result<PairedStream> {
    let plain = sample_stream(world, domain, false, n_tokens, seed)?;
    let ctx = sample_stream(world, domain, true, n_tokens, seed)?;
    crate::activation_io::align_pairs(&plain, &ctx)
}

/// `Δ_g = Σ_{j∈S} π_g[j]·a_j·δ`.
pub fn planted_performance_shift(world: &SynthWorld, domain: Domain) -> Result<f64> {
    let loading = world.loading(domain)?;
    Ok(world
        .shifted
        .iter()
        .map(|&j| loading[j] * world.amplitudes[j] * world.spec.shift_gain)
        .sum())
}

/// A raw stream in which every token has exactly `k` of `s_true` planted
/// orthonormal (when `s_true <= d`) features active, with amplitudes drawn
/// uniformly from `[1, 2]`. Returns the stream and the dictionary.
pub fn planted_sparse_stream(
    d: usize,
    s_true: usize,
    k: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<(ActivationDump, Vec<f32>)> {
    ensure!(d >= 1 && s_true >= 1, "dimensions must be positive");
    ensure!(k >= 1 && k <= s_true, "k = {k} must lie in 1..={s_true}");
    ensure!(n_tokens >= 1, "n_tokens must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dictionary = unit_directions(s_true, d, &mut rng);
    let mut data = vec![0.0f32; n_tokens * d];
    for row in data.chunks_exact_mut(d) {
        for j in rand::seq::index::sample(&mut rng, s_true, k) {
            let a: f32 = rng.random_range(1.0..=2.0);
            crate::linalg::axpy(a, &dictionary[j * d..(j + 1) * d], row);
        }
    }
    let dump = ActivationDump::single_query(
        "synth:planted",
        "planted",
        Space::Raw,
        Matrix::from_vec(n_tokens, d, data)?,
    )?;
    Ok((dump, dictionary))
}

/// Greedy one-to-one matching of dictionary features to target directions by
/// absolute cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatch {
    /// `(feature, target, |cos|)` in the order the pairs were accepted.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl FeatureMatch {
    pub fn target_of(&self, feature: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(f, _, _)| *f == feature)
            .map(|&(_, t, _)| t)
    }

    pub fn targets(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|&(_, t, _)| t).collect()
    }

    pub fn mean_cos(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.2).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Matches `features` of `world` to the `n_targets` directions stored back to
/// back in `targets`. Pairs are accepted in decreasing `|cos|` (ties by
/// feature then target index), skipping used features and targets.
pub fn match_features(
    world: &SynthWorld,
    features: &[usize],
    targets: &[f32],
    n_targets: usize,
) -> Result<FeatureMatch> {
    let d = world.spec.d;
    ensure!(
        targets.len() == n_targets * d,
        "target block has {} values, expected {n_targets}×{d}",
        targets.len()
    );
    ensure!(
        features.iter().all(|&f| f < world.spec.s_true),
        "feature index out of range"
    );
    let mut normed = targets.to_vec();
    for t in normed.chunks_exact_mut(d) {
        let n = t.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            t.iter_mut().for_each(|v| *v = (f64::from(*v) / n) as f32);
        }
    }
    let rows: Vec<f32> = features.iter().flat_map(|&f| world.atom(f).iter().copied()).collect();
    let mut cos = vec![0.0f32; features.len() * n_targets];
    f32::gemm_abt(&rows, features.len(), d, &normed, n_targets, &mut cos);
    let mut order: Vec<(f32, usize, usize)> = cos
        .iter()
        .enumerate()
        .map(|(i, c)| (c.abs(), i / n_targets, i % n_targets))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_f = vec![false; features.len()];
    let mut used_t = vec![false; n_targets];
    let mut pairs = Vec::new();
    for (c, fi, t) in order {
        if pairs.len() == features.len().min(n_targets) {
            break;
        }
        if used_f[fi] || used_t[t] {
            continue;
        }
        used_f[fi] = true;
        used_t[t] = true;
        pairs.push((features[fi], t, f64::from(c)));
    }
    Ok(FeatureMatch { pairs })
}

/// Matches the planted set `S` to SAE decoder columns.
pub fn match_shifted_to_sae(world: &SynthWorld, sae: &SaeModel<f32>) -> Result<FeatureMatch> {
    ensure!(sae.d() == world.spec.d, "SAE dim {} does not match world dim {}", sae.d(), world.spec.d);
    let s: Vec<usize> = world.shifted.iter().copied().collect();
    match_features(world, &s, sae.atoms(), sae.s())
}

/// Matches the planted set `S` to the raw coordinate axes.
pub fn match_shifted_to_raw(world: &SynthWorld) -> Result<FeatureMatch> {
    let d = world.spec.d;
    let mut eye = vec![0.0f32; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let s: Vec<usize> = world.shifted.iter().copied().collect();
    match_features(world, &s, &eye, d)
}

/// Trains an SAE on a mixture-domain stream of the world.
pub fn fit_sae(world: &SynthWorld, cfg: &TrainConfig, n_tokens: usize, seed: u64) -> Result<SaeModel<f32>> {
    let stream = sample_stream(world, Domain::Mixture, false, n_tokens, seed)?;
    Ok(train(&stream, cfg)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Tokens in the training-domain plain / in-context pair used to find
    /// shifted dimensions.
    pub shift_tokens: usize,
    /// Tokens per downstream-domain stream.
    pub domain_tokens: usize,
    pub top_n: usize,
    pub mode: StsMode,
    /// Seeds token sampling.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shift_tokens: 20_000,
            domain_tokens: 4_000,
            top_n: 50,
            mode: StsMode::Icl,
            seed: 1,
        }
    }
}

/// Outcome of one synthetic pipeline run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub shift: ShiftReport,
    /// Dimensions matched to `S`.
    pub truth: BTreeSet<usize>,
    /// `|selected ∩ truth| / |S|`.
    pub recall: f64,
    pub table: StsTable,
    pub correlation: CorrelationResult,
}

/// Selects the shifted dimensions of `sae` from a training-domain pair.
pub fn identify_shift(
    world: &SynthWorld,
    sae: &SaeModel<f32>,
    n_tokens: usize,
    top: usize,
    seed: u64,
) -> Result<ShiftReport> {
    let pair = sample_pair(world, Domain::Train, n_tokens, seed)?;
    let features = sae.encode_pair(&pair)?;
    top_n(&shift_scores(&features)?, top, Space::SaeFeatures)
}

/// Fraction of `S` whose matched target is in `selected`.
pub fn shifted_recall(world: &SynthWorld, m: &FeatureMatch, selected: &BTreeSet<usize>) -> f64 {
    if world.shifted.is_empty() {
        return 1.0;
    }
    let hit = m.pairs.iter().filter(|p| selected.contains(&p.1)).count();
    hit as f64 / world.shifted.len() as f64
}

/// Runs shift identification, domain scoring and correlation against the
/// planted shifts with an already fitted SAE.
pub fn evaluate(world: &SynthWorld, sae: &SaeModel<f32>, cfg: &PipelineConfig) -> Result<EvalReport> {
    ensure!(world.spec.n_domains >= 2, "need at least two domains to correlate");
    let shift = identify_shift(world, sae, cfg.shift_tokens, cfg.top_n, cfg.seed)?;
    let m = match_shifted_to_sae(world, sae)?;
    let recall = shifted_recall(world, &m, &shift.selected);

    let mut features = Vec::new();
    let mut pairs = Vec::new();
    let mut perf = Vec::new();
    for domain in world.domains() {
        match cfg.mode {
            StsMode::Act => {
                let raw = sample_stream(world, domain, false, cfg.domain_tokens, cfg.seed)?;
                features.push(encode_stream(sae, &raw)?);
            }
            StsMode::Icl => {
                let pair = sample_pair(world, domain, cfg.domain_tokens, cfg.seed)?;
                pairs.push(sae.encode_pair(&pair)?);
            }
        }
        perf.push((domain.to_string(), planted_performance_shift(world, domain)?));
    }
    let inputs: Vec<DomainInput<'_>> = perf
        .iter()
        .enumerate()
        .map(|(i, (id, _))| DomainInput {
            id,
            features: features.get(i),
            pair: pairs.get(i),
        })
        .collect();
    let mut table = score_domains(&inputs, &shift.selected, Some(&perf))?;
    table.dims_source = "synthetic shift identification".into();
    let (x, y) = table.scatter(cfg.mode);
    let correlation = correlate(&x, &y)?;
    Ok(EvalReport {
        shift,
        truth: m.targets(),
        recall,
        table,
        correlation,
    })
}

/// Which SAE the end-to-end run uses.
#[derive(Debug, Clone, PartialEq)]
pub enum SaeSource {
    Oracle,
    /// Train on `tokens` mixture-domain tokens.
    Trained { config: TrainConfig, tokens: usize },
}

/// Fits (or builds) the SAE, then runs [`evaluate`].
pub fn end_to_end_eval(world: &SynthWorld, source: &SaeSource, cfg: &PipelineConfig) -> Result<EvalReport> {
    let sae = match source {
        SaeSource::Oracle => world.oracle_sae()?,
        SaeSource::Trained { config, tokens } => fit_sae(world, config, *tokens, cfg.seed)?,
    };
    evaluate(world, &sae, cfg)
}

/// Shift concentration and planted recall of one representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceContrast {
    pub top1pct_mass: f64,
    pub recall: f64,
}

/// Compares raw space with SAE space on the same training-domain pair,
/// selecting `top` dimensions in each.
pub fn raw_vs_sae(
    world: &SynthWorld,
    sae: &SaeModel<f32>,
    n_tokens: usize,
    top: usize,
    seed: u64,
) -> Result<(SpaceContrast, SpaceContrast)> {
    let raw = sample_pair(world, Domain::Train, n_tokens, seed)?;
    let feat = sae.encode_pair(&raw)?;
    let measure = |pair: &PairedStream, m: FeatureMatch| -> Result<SpaceContrast> {
        let scores = shift_scores(pair)?;
        let curve = concentration(&scores)?;
        let report = top_n(&scores, top.min(scores.len()), pair.space())?;
        Ok(SpaceContrast {
            top1pct_mass: curve.top_fraction(0.01),
            recall: shifted_recall(world, &m, &report.selected),
        })
    };
    Ok((
        measure(&raw, match_shifted_to_raw(world)?)?,
        measure(&feat, match_shifted_to_sae(world, sae)?)?,
    ))
}

/// Task-score drops after zeroing feature dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: f64,
    /// Drop after zeroing the dimensions matched to `S`.
    pub shifted_drop: f64,
    /// Drops after zeroing equally many random other dimensions, one per draw.
    pub random_drops: Vec<f64>,
}

impl AblationReport {
    pub fn median_random_drop(&self) -> f64 {
        let mut v = self.random_drops.clone();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }
}

/// Zero-ablation on the training domain.
///
/// The task score is `sts_act` over the `S`-matched dimensions of features
/// that have passed through the model once more: `encode(decode(h'))`,
/// where `h'` is `h` with the ablated dimensions zeroed.
pub fn zero_ablation(
    world: &SynthWorld,
    sae: &SaeModel<f32>,
    n_tokens: usize,
    draws: usize,
    seed: u64,
) -> Result<AblationReport> {
    let raw = sample_stream(world, Domain::Train, true, n_tokens, seed)?;
    let features = encode_stream(sae, &raw)?;
    let matched = match_shifted_to_sae(world, sae)?.targets();
    ensure!(!matched.is_empty(), "world has no shifted features to ablate");
    let task = |dims: Option<&BTreeSet<usize>>| -> Result<f64> {
        let h = match dims {
            Some(dims) => zero_dims(&features, dims)?,
            None => features.clone(),
        };
        let z = sae.decode_matrix(h.data())?;
        let again = h.with_data(Space::SaeFeatures, sae.encode_matrix(&z)?)?;
        sts_act(&again, &matched)
    };
    let baseline = task(None)?;
    let shifted_drop = baseline - task(Some(&matched))?;
    let others: Vec<usize> = (0..sae.s()).filter(|j| !matched.contains(j)).collect();
    ensure!(
        others.len() >= matched.len(),
        "not enough non-shifted dimensions for random ablation"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_drops = Vec::with_capacity(draws);
    for _ in 0..draws {
        let pick: BTreeSet<usize> = others
            .choose_multiple(&mut rng, matched.len())
            .copied()
            .collect();
        random_drops.push(baseline - task(Some(&pick))?);
    }
    Ok(AblationReport {
        baseline,
        shifted_drop,
        random_drops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            d: 32,
            s_true: 16,
            n_domains: 6,
            shifted_count: 4,
            active_per_token: 3.0,
            tokens_per_stream: 200,
            doc_len: 16,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = build_world(&small(), 3).unwrap();
        assert_eq!(a, build_world(&small(), 3).unwrap());
        assert_ne!(a, build_world(&small(), 4).unwrap());
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SynthSpec { active_per_token: 17.0, ..small() };
        assert!(build_world(&spec, 0).is_err());
        let spec = SynthSpec { shifted_count: 17, ..small() };
        assert!(build_world(&spec, 0).is_err());
    }

    #[test]
    fn dictionary_columns_are_unit_norm() {
        let spec = SynthSpec { d: 512, s_true: 128, ..small() };
        let w = build_world(&spec, 0).unwrap();
        for j in 0..128 {
            let n: f64 = w.atom(j).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let mut max_cos = 0.0f64;
        for a in 0..128 {
            for b in 0..a {
                let c: f64 = w.atom(a).iter().zip(w.atom(b)).map(|(&x, &y)| f64::from(x * y)).sum();
                max_cos = max_cos.max(c.abs());
            }
        }
        assert!(max_cos <= 0.5);
    }

    #[test]
    fn loadings_are_probabilities() {
        let w = build_world(&small(), 1).unwrap();
        for l in w.domain_loadings.iter().chain([&w.train_loading]) {
            assert!(l.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        for dom in [Domain::Train, Domain::Mixture, Domain::Downstream(2)] {
            let p = w.firing(dom).unwrap();
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            if dom != Domain::Mixture {
                assert!((p.iter().sum::<f64>() - 3.0).abs() < 1e-9);
            }
        }
        assert!(w.loading(Domain::Downstream(6)).is_err());
    }

    #[test]
    fn no_shift_no_difference() {
        let spec = SynthSpec { shift_gain: 0.0, ..small() };
        let w = build_world(&spec, 0).unwrap();
        let a = sample_stream(&w, Domain::Downstream(0), false, 50, 9).unwrap();
        let b = sample_stream(&w, Domain::Downstream(0), true, 50, 9).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn context_doubles_shifted_feature() {
        let mut spec = small();
        spec.shifted_count = 16;
        spec.active_per_token = 1.0;
        let w = build_world(&spec, 0).unwrap();
        let a = sample_stream(&w, Domain::Train, false, 100, 2).unwrap();
        let b = sample_stream(&w, Domain::Train, true, 100, 2).unwrap();
        for (x, y) in a.data().as_slice().iter().zip(b.data().as_slice()) {
            assert!((2.0 * x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn pair_streams_align() {
        let w = build_world(&small(), 0).unwrap();
        let p = sample_pair(&w, Domain::Downstream(1), 100, 5).unwrap();
        assert_eq!(p.len(), 100);
        assert_eq!(p.doc_ids()[0], "domain-01/00000");
        assert!(sample_stream(&w, Domain::Train, false, 0, 0).is_err());
    }

    #[test]
    fn planted_shift_examples() {
        let spec = SynthSpec { shifted_count: 0, ..small() };
        let w = build_world(&spec, 0).unwrap();
        assert!(w.domains().all(|g| planted_performance_shift(&w, g).unwrap() == 0.0));

        let mut w = build_world(&small(), 0).unwrap();
        w.shifted = [3].into();
        w.amplitudes[3] = 2.0;
        w.spec.shift_gain = 0.5;
        w.domain_loadings[0][3] = 1.0;
        w.domain_loadings[1][3] = 0.0;
        assert_eq!(planted_performance_shift(&w, Domain::Downstream(0)).unwrap(), 1.0);
        assert_eq!(planted_performance_shift(&w, Domain::Downstream(1)).unwrap(), 0.0);
    }

    #[test]
    fn snr_sets_sigma() {
        let mut w = build_world(&small(), 0).unwrap();
        w.set_snr(10.0).unwrap();
        assert!(w.spec.noise_sigma > 0.0);
        let s = w.spec.noise_sigma;
        w.set_snr(5.0).unwrap();
        assert!((w.spec.noise_sigma - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_identity() {
        let w = build_world(&small(), 0).unwrap();
        let m = match_shifted_to_sae(&w, &w.oracle_sae().unwrap()).unwrap();
        for &(f, t, c) in &m.pairs {
            assert_eq!(f, t);
            assert!((c - 1.0).abs() < 1e-5);
        }
        assert_eq!(m.targets(), w.shifted);
    }

    #[test]
    fn oracle_shift_image_is_exact_without_noise() {
        // orthonormal dictionary: crosstalk is only f32 rounding, so only S moves
        let w = build_world(&small(), 2).unwrap();
        let sae = w.oracle_sae().unwrap();
        let pair = sample_pair(&w, Domain::Train, 2_000, 1).unwrap();
        let scores = shift_scores(&sae.encode_pair(&pair).unwrap()).unwrap();
        let nonzero: BTreeSet<usize> = (0..scores.len()).filter(|&j| scores[j] > 1e-9).collect();
        assert_eq!(nonzero, w.shifted);
    }

    #[test]
    fn domain_names_round_trip() {
        for d in [Domain::Train, Domain::Mixture, Domain::Downstream(7)] {
            assert_eq!(d.to_string().parse::<Domain>().unwrap(), d);
        }
        assert!("nope".parse::<Domain>().is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = small();
        assert_eq!(SynthSpec::from_toml(&s.to_toml()).unwrap(), s);
        assert!(SynthSpec::from_toml("bogus = 1").is_err());
    }
}
