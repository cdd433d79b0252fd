// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use sts_core::sae::{load_model, save_model};
use sts_core::synth::{build_world, sample_stream};
use sts_core::{read_dump, write_dump, ActivationDump, ActivationLaw, Domain, Error, Matrix, SaeModel, Space, SynthSpec};

fn small_world_dump() -> ActivationDump {
    let spec = SynthSpec {
        d: 16,
        s_true: 32,
        n_domains: 2,
        shifted_count: 4,
        active_per_token: 3.0,
        noise_sigma: 0.1,
        doc_len: 7,
        ..SynthSpec::default()
    };
    let w = build_world(&spec, 5).unwrap();
    sample_stream(&w, Domain::Downstream(1), true, 50, 3).unwrap()
}

#[test]
fn dump_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let dump = small_world_dump();
    let a = dir.path().join("a.stsd");
    let b = dir.path().join("b.stsd");
    write_dump(&dump, &a).unwrap();
    let back = read_dump(&a).unwrap();
    assert_eq!(back.manifest(), dump.manifest());
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.data()), bits(dump.data()));
    write_dump(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn model_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (d, s) = (5, 9);
    let vals = |n: usize, off: f32| (0..n).map(|i| (i as f32 * 0.37 + off).sin()).collect::<Vec<_>>();
    let m = SaeModel::new(d, s, ActivationLaw::TopK { k: 3 }, vals(s * d, 0.1), vals(s, 0.2), vals(s * d, 0.3), vals(d, 0.4)).unwrap();
    let a = dir.path().join("m.stsm");
    save_model(&m, &a).unwrap();
    let back = load_model(&a).unwrap();
    assert_eq!(back, m);
    let b = dir.path().join("n.stsm");
    save_model(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.stsd");
    write_dump(&small_world_dump(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_dump(&path), Err(Error::Format { .. })));

    for cut in [10, 64, 100, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Format { .. })), "cut at {cut}");
    }

    let model = dir.path().join("m.stsm");
    save_model(&SaeModel::<f32>::identity(4, ActivationLaw::Relu).unwrap(), &model).unwrap();
    let bytes = std::fs::read(&model).unwrap();
    std::fs::write(&model, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_model(&model), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[1] = 0;
    std::fs::write(&model, &bad).unwrap();
    assert!(matches!(load_model(&model), Err(Error::Format { .. })));

    assert!(matches!(read_dump(dir.path().join("missing.stsd")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_dumps_round_trip(
        rows in 1usize..20,
        cols in 1usize..12,
        seed in any::<u64>(),
    ) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 40) as u32 & 0x3fff_ffff))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).unwrap();
        let dump = ActivationDump::single_query("p", "doc", Space::SaeFeatures, m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.stsd");
        write_dump(&dump, &path).unwrap();
        let back = read_dump(&path).unwrap();
        prop_assert_eq!(back.data(), dump.data());
        prop_assert_eq!(back.manifest(), dump.manifest());
    }
}
