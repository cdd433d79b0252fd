// SPDX-License-Identifier: MIT OR Apache-2.0

//! The whole pipeline on a small planted world, checked against its ground
//! truth.

use std::sync::OnceLock;

use sts_core::synth::{
    evaluate, fit_sae, identify_shift, match_shifted_to_sae, raw_vs_sae, shifted_recall,
    zero_ablation, PipelineConfig,
};
use sts_core::{ActivationLaw, Error, SaeModel, StsMode, SynthSpec, SynthWorld, TrainConfig};

fn spec() -> SynthSpec {
    SynthSpec {
        d: 64,
        s_true: 128,
        n_domains: 8,
        shifted_count: 8,
        active_per_token: 4.0,
        tokens_per_stream: 8_000,
        seed: 21,
        ..SynthSpec::default()
    }
}

fn world() -> &'static SynthWorld {
    static W: OnceLock<SynthWorld> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = SynthWorld::build(&spec()).unwrap();
        w.set_snr(10.0).unwrap();
        w
    })
}

fn trained() -> &'static SaeModel {
    static M: OnceLock<SaeModel> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = TrainConfig {
            law: ActivationLaw::TopK { k: 4 },
            hidden: 256,
            base_lr: 1e-3,
            l1_max: 0.0,
            l1_warmup_steps: 0,
            lr_warmup_steps: 50,
            total_steps: 2_000,
            log_every: 100,
            ..TrainConfig::default()
        };
        fit_sae(world(), &cfg, spec().tokens_per_stream, 1).unwrap()
    })
}

fn pipeline(mode: StsMode) -> PipelineConfig {
    PipelineConfig {
        shift_tokens: 8_000,
        domain_tokens: 2_000,
        top_n: 8,
        mode,
        seed: 3,
    }
}

#[test]
fn trained_sae_finds_planted_shift_and_predicts_transfer() {
    let r = evaluate(world(), trained(), &pipeline(StsMode::Icl)).unwrap();
    assert!(r.recall >= 0.9, "recall {}", r.recall);
    assert!(r.correlation.rho >= 0.8, "rho {}", r.correlation.rho);
    assert_eq!(r.table.rows.len(), 8);
    assert!(r.table.rows.iter().all(|row| row.sts_icl.is_some() && row.sts_act.is_none()));

    let act = evaluate(world(), trained(), &pipeline(StsMode::Act)).unwrap();
    assert!(act.correlation.rho >= 0.8, "act rho {}", act.correlation.rho);
}

#[test]
fn oracle_sae_bounds_the_pipeline() {
    let r = evaluate(world(), &world().oracle_sae().unwrap(), &pipeline(StsMode::Icl)).unwrap();
    assert!(r.correlation.rho >= 0.95, "rho {}", r.correlation.rho);

    let mut clean = SynthWorld::build(&spec()).unwrap();
    clean.spec.noise_sigma = 0.0;
    let oracle = clean.oracle_sae().unwrap();
    let report = identify_shift(&clean, &oracle, 8_000, 8, 4).unwrap();
    let m = match_shifted_to_sae(&clean, &oracle).unwrap();
    assert_eq!(shifted_recall(&clean, &m, &report.selected), 1.0);
    assert_eq!(report.selected, clean.shifted);
}

#[test]
fn zero_gain_world_has_no_signal() {
    let mut flat = SynthWorld::build(&SynthSpec { shift_gain: 0.0, ..spec() }).unwrap();
    flat.set_snr(10.0).unwrap();
    let err = evaluate(&flat, &flat.oracle_sae().unwrap(), &pipeline(StsMode::Icl)).unwrap_err();
    assert!(matches!(err, Error::Validation(ref m) if m.contains("zero variance")), "{err}");
}

#[test]
fn sae_space_concentrates_shift_better_than_raw_space() {
    let (raw, sae) = raw_vs_sae(world(), trained(), 8_000, 8, 5).unwrap();
    assert!(sae.top1pct_mass > raw.top1pct_mass, "{raw:?} vs {sae:?}");
    assert!(raw.recall < sae.recall, "{raw:?} vs {sae:?}");
}

#[test]
fn ablating_shifted_dims_hurts_more_than_random_dims() {
    let r = zero_ablation(world(), trained(), 2_000, 20, 6).unwrap();
    assert!(r.shifted_drop > 0.0);
    assert!(r.shifted_drop >= 5.0 * r.median_random_drop(), "{r:?}");
}
