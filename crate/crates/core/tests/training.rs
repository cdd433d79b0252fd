// SPDX-License-Identifier: MIT OR Apache-2.0

use sts_core::sae::{mean_l0, save_model};
use sts_core::synth::planted_sparse_stream;
use sts_core::train::train;
use sts_core::{ActivationLaw, Error, TrainConfig};

fn cfg(law: ActivationLaw, l1: f64) -> TrainConfig {
    TrainConfig {
        law,
        hidden: 64,
        base_lr: 1e-3,
        l1_max: l1,
        l1_warmup_steps: 500,
        lr_warmup_steps: 100,
        total_steps: 2000,
        batch_size: 256,
        seed: 9,
        log_every: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn topk_training_recovers_planted_data() {
    let (data, _) = planted_sparse_stream(64, 32, 4, 20_000, 1).unwrap();
    let (model, log) = train(&data, &cfg(ActivationLaw::TopK { k: 4 }, 0.0)).unwrap();
    let s = &log.summary;
    assert!(s.final_recon_loss <= 0.1 * s.initial_recon_loss, "{s:?}");
    assert_eq!(s.final_mean_l0, 4.0);
    assert_eq!(model.s(), 64);
    let first = log.records.first().unwrap();
    let last = log.records.last().unwrap();
    assert!(last.reconstruction_loss < first.reconstruction_loss);
    assert_eq!(last.step, 1999);
}

#[test]
fn training_is_bit_reproducible() {
    let (data, _) = planted_sparse_stream(32, 16, 3, 4_000, 2).unwrap();
    let mut c = cfg(ActivationLaw::TopK { k: 3 }, 0.0);
    c.total_steps = 300;
    c.l1_warmup_steps = 100;
    c.hidden = 32;
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("a.stsm"), dir.path().join("b.stsm")];
    for p in &paths {
        save_model(&train(&data, &c).unwrap().0, p).unwrap();
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    c.seed += 1;
    let other = train(&data, &c).unwrap().0;
    assert_ne!(other, sts_core::sae::load_model(&paths[0]).unwrap());
}

#[test]
fn stronger_l1_gives_sparser_codes() {
    let (data, _) = planted_sparse_stream(64, 32, 4, 20_000, 1).unwrap();
    let l0: Vec<f64> = [1.0, 5.0, 25.0]
        .iter()
        .map(|&l1| {
            let (m, _) = train(&data, &cfg(ActivationLaw::Relu, l1)).unwrap();
            mean_l0(&m.encode_matrix(data.data()).unwrap()).unwrap()
        })
        .collect();
    assert!(l0[2] <= l0[1] && l0[1] <= l0[0], "{l0:?}");
}

#[test]
fn divergence_is_reported() {
    let (data, _) = planted_sparse_stream(16, 8, 2, 1_000, 3).unwrap();
    let mut c = cfg(ActivationLaw::Relu, 0.0);
    c.hidden = 16;
    c.total_steps = 50;
    c.lr_warmup_steps = 0;
    c.l1_warmup_steps = 0;
    c.base_lr = 1e300;
    c.grad_clip = None;
    match train(&data, &c) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1.summary)),
    }
}
