use essential::config::{DataSource, RunConfig};
use essential::data::features::{decode_features, encode_features, load_features, save_features};
use essential::data::synth::{gen_split, SynthSpec};
use essential::data::Split;
use essential::driver::{analyze_run, build_tasks, run_benchmark, write_run};
use essential::memory::format::{decode_memory, encode_memory};
use essential::memory::{load_memory, save_memory};
use essential::model::{decode_params, encode_params};
use essential::Error;
use proptest::prelude::*;

fn small_run() -> RunConfig {
    RunConfig {
        tasks: 2,
        classes_per_task: 2,
        d: 8,
        heads: 2,
        encoder_layers: 1,
        n_per_class: 3,
        train_per_class: 6,
        test_per_class: 4,
        epochs_incremental: 2,
        epochs_rehearsal: 1,
        batch_size: 4,
        ..RunConfig::default()
    }
}

fn memory_bytes() -> Vec<u8> {
    let out = run_benchmark(&small_run()).unwrap();
    encode_memory(&out.episodic, &out.semantic).unwrap()
}

fn feature_bytes() -> Vec<u8> {
    let spec = SynthSpec {
        d: 4,
        clip_len: 3,
        num_classes: 2,
        train_per_class: 2,
        ..SynthSpec::default()
    };
    encode_features(&gen_split(&spec, &[0, 1], Split::Train).unwrap()).unwrap()
}

#[test]
fn memory_file_round_trips_bitwise() {
    let out = run_benchmark(&small_run()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.bin");
    save_memory(&out.episodic, &out.semantic, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let (ep, sem) = load_memory(&path).unwrap();
    assert_eq!(ep.len(), out.episodic.len());
    assert_eq!(sem.len(), 2);
    for (a, b) in ep.clips().zip(out.episodic.clips()) {
        assert_eq!(a, b);
    }
    save_memory(&ep, &sem, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn feature_file_round_trips_bitwise() {
    let spec = SynthSpec::default();
    let ds = gen_split(&spec, &[3, 7], Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.esfd");
    save_features(&ds, &path).unwrap();
    let back = load_features(&path, Split::Test).unwrap();
    assert_eq!(back.clips.len(), ds.clips.len());
    for (a, b) in back.clips.iter().zip(&ds.clips) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.clip_id, b.clip_id);
        let bits = |t: &essential::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
    }
}

#[test]
fn every_truncation_is_a_format_error() {
    for bytes in [memory_bytes(), feature_bytes()] {
        for cut in 0..bytes.len() {
            let m = decode_memory(&bytes[..cut]);
            let f = decode_features(&bytes[..cut], Split::Train);
            assert!(matches!(m, Err(Error::Format { .. })), "cut {cut}: {m:?}");
            assert!(matches!(f, Err(Error::Format { .. })), "cut {cut}: {f:?}");
        }
    }
}

#[test]
fn run_directory_round_trip_and_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_benchmark(&small_run()).unwrap();
    write_run(dir.path(), &out).unwrap();
    let reports = analyze_run(dir.path()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.clips == 8));

    std::fs::remove_file(dir.path().join("model.bin")).unwrap();
    assert!(matches!(analyze_run(dir.path()), Err(Error::Input(_))));
}

#[test]
fn feature_sources_must_match_configured_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        d: 16,
        ..SynthSpec::default()
    };
    let train = dir.path().join("train.esfd");
    let test = dir.path().join("test.esfd");
    save_features(&gen_split(&spec, &[0, 1], Split::Train).unwrap(), &train).unwrap();
    save_features(&gen_split(&spec, &[0, 1], Split::Test).unwrap(), &test).unwrap();
    let cfg = RunConfig {
        data: DataSource::Features,
        tasks: 1,
        classes_per_task: 2,
        train_features: vec![train],
        test_features: vec![test],
        ..RunConfig::default()
    };
    match build_tasks(&cfg) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "d"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn corrupted_bytes_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), which in 0usize..3) {
        let mut bytes = match which {
            0 => FEATURES.with(Clone::clone),
            1 => MEMORY.with(Clone::clone),
            _ => PARAMS.with(Clone::clone),
        };
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        let _ = decode_features(&bytes, Split::Train);
        let _ = decode_memory(&bytes);
        let _ = decode_params(&bytes);
        bytes.truncate(i);
        let failed = match which {
            0 => decode_features(&bytes, Split::Train).is_err(),
            1 => decode_memory(&bytes).is_err(),
            _ => decode_params(&bytes).is_err(),
        };
        prop_assert!(failed, "truncated file of {} bytes accepted", bytes.len());
    }
}

thread_local! {
    static FEATURES: Vec<u8> = feature_bytes();
    static MEMORY: Vec<u8> = memory_bytes();
    static PARAMS: Vec<u8> = {
        let out = run_benchmark(&small_run()).unwrap();
        encode_params(&out.model.params).unwrap()
    };
}
