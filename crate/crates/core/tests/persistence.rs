mod common;

use common::{timeless, tiny_config};
use evade_core::checkpoint::Checkpoint;
use evade_core::config::EvadeMode;
use evade_core::psrl::{run_evade_simple, Trainer};
use evade_core::Rng;

#[test]
fn identical_seeds_give_identical_reports() {
    let config = tiny_config(5);
    let a = run_evade_simple::<f32>(&config, Rng::new(5), None).unwrap();
    let b = run_evade_simple::<f32>(&config, Rng::new(5), None).unwrap();
    assert_eq!(a.canonical_csv(), b.canonical_csv());
    assert_eq!(a.final_csv(), b.final_csv());
    let c = run_evade_simple::<f32>(&tiny_config(6), Rng::new(6), None).unwrap();
    assert_ne!(a.canonical_csv(), c.canonical_csv());
}

#[test]
fn zero_sigma_matches_the_noiseless_baseline() {
    let mut on = tiny_config(8);
    on.model.sigma_init = 0.0;
    on.model.train_sigma = false;
    let off = evade_core::config::RunConfig { evade: EvadeMode::Off, ..on.clone() };
    let a = run_evade_simple::<f32>(&on, Rng::new(8), None).unwrap();
    let b = run_evade_simple::<f32>(&off, Rng::new(8), None).unwrap();
    assert_eq!(a.canonical_csv(), b.canonical_csv());
    assert_eq!(a.final_csv(), b.final_csv());
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut trainer = Trainer::<f32>::new(tiny_config(9), Rng::new(9)).unwrap();
    trainer.run_iteration().unwrap();
    let ckpt = trainer.checkpoint().unwrap();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.evde");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    let resumed = Trainer::<f32>::resume(tiny_config(9), &back).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes(), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let trainer = Trainer::<f32>::new(tiny_config(10), Rng::new(10)).unwrap();
    let bytes = trainer.checkpoint().unwrap().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    let mut other = tiny_config(10);
    other.model.hidden_channels = 6;
    assert!(Trainer::<f32>::resume(other, &Checkpoint::from_bytes(&bytes).unwrap()).is_err());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let config = tiny_config(11);
    let full = run_evade_simple::<f32>(&config, Rng::new(11), None).unwrap();

    let mut first = Trainer::<f32>::new(config.clone(), Rng::new(11)).unwrap();
    let row1 = first.run_iteration().unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes();
    drop(first);
    let mut second = Trainer::<f32>::resume(config, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let mut rows = vec![row1];
    while !second.is_finished() {
        rows.push(second.run_iteration().unwrap());
    }
    let rest = second.finish().unwrap();
    assert_eq!(timeless(&rows), timeless(&full.rows));
    assert_eq!(rest.final_returns, full.final_returns);
}

#[test]
fn output_directory_contents() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_evade_simple::<f32>(&tiny_config(12), Rng::new(12), Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.rows.len());
    assert_eq!(std::fs::read_to_string(dir.path().join("final_eval.csv")).unwrap(), report.final_csv());
    let echoed = evade_core::config::RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, tiny_config(12));
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.evde")).unwrap();
    assert_eq!(ckpt.seed, 12);
}
