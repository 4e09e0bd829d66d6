use std::fs;

use vidphys::scenes::{generate_dataset, Dataset, Scenario, ScenarioConfig};
use vidphys::trainer::{load_checkpoint, save_checkpoint, train, train_from, GammaInit, TrainConfig, Trainer};
use vidphys::Error;

fn small_dataset() -> Dataset {
    generate_dataset(&ScenarioConfig {
        n_samples: 24,
        frames_per_sample: 8,
        width: 16,
        height: 16,
        ..ScenarioConfig::preset(Scenario::Intensity)
    })
    .unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: Some(8),
        hidden: (8, 4),
        gamma_init: GammaInit::Values(vec![3.0, 0.5]),
        ..TrainConfig::synthetic(Scenario::Intensity)
    }
}

#[test]
fn round_trip_is_exact() {
    let ds = small_dataset();
    let state = train(&ds, &small_config(2)).unwrap().state;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ckpt.bin");
    save_checkpoint(&path, &state).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = small_dataset();
    let straight = train(&ds, &small_config(3)).unwrap();

    let first = train(&ds, &small_config(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &first.state).unwrap();
    let resumed = train_from(&ds, &small_config(3), load_checkpoint(&path).unwrap()).unwrap();

    assert_eq!(resumed.state, straight.state);
    assert_eq!(resumed.report.final_gamma_values(), straight.report.final_gamma_values());
    assert_eq!(resumed.report.epochs, straight.report.epochs[1..]);
}

#[test]
fn mismatched_state_is_rejected() {
    let ds = small_dataset();
    let state = train(&ds, &small_config(0)).unwrap().state;

    let wider = TrainConfig {
        hidden: (16, 4),
        ..small_config(1)
    };
    assert!(matches!(
        Trainer::resume(&ds, wider, state.clone()),
        Err(Error::DimensionMismatch { .. })
    ));

    let bigger = generate_dataset(&ScenarioConfig {
        n_samples: 4,
        frames_per_sample: 8,
        width: 20,
        height: 20,
        ..ScenarioConfig::preset(Scenario::Intensity)
    })
    .unwrap();
    assert!(Trainer::resume(&bigger, small_config(1), state.clone()).is_err());

    let other_system = TrainConfig {
        system: vidphys::ode::OdeSystem::exponential_decay(0.0),
        prior: vidphys::loss::Prior::standard(1),
        ..small_config(1)
    };
    assert!(Trainer::resume(&ds, other_system, state).is_err());
}

#[test]
fn damaged_files_are_rejected() {
    let ds = small_dataset();
    let state = train(&ds, &small_config(0)).unwrap().state;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &state).unwrap();
    let good = fs::read(&path).unwrap();

    let check = |bytes: &[u8], needle: &str| {
        let p = dir.path().join("bad.bin");
        fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains(needle), "{msg}"),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    };

    let mut flipped = good.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    check(&flipped, "checksum");

    check(&good[..good.len() - 9], "checksum");
    check(&good[..10], "too short");

    let mut magic = good.clone();
    magic[0] = b'X';
    check(&magic, "not a checkpoint");

    let mut version = good.clone();
    version[8..12].copy_from_slice(&2u32.to_le_bytes());
    let n = version.len() - 4;
    let crc = crc32fast::hash(&version[..n]);
    version[n..].copy_from_slice(&crc.to_le_bytes());
    check(&version, "version 2");

    assert!(matches!(load_checkpoint(&dir.path().join("missing.bin")), Err(Error::Io(_))));
}
