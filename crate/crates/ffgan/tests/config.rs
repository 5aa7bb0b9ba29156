use std::path::PathBuf;

use ffgan::config::{check_device, DEVICE_VAR};
use ffgan::{Error, RunConfig};
use ffgan_core::AttnAxis;

fn load(overrides: &[&str]) -> Result<RunConfig, Error> {
    RunConfig::load(None, &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

#[test]
fn defaults_carry_published_hyperparameters() {
    let c = RunConfig::default();
    assert_eq!((c.train.lambda1, c.train.lambda2, c.train.lr), (1.0, 5.0, 2e-4));
    assert_eq!((c.train.beta1, c.train.beta2), (0.5, 0.999));
    assert_eq!(c.model.resolutions(), [16, 32, 64]);
    assert_eq!((c.train.epochs, c.data.n), (60, 5000));
    assert_eq!((c.eval.pool_size, c.eval.r, c.eval.seeds.len()), (10, 1, 3));
    assert_eq!(load(&[]).unwrap(), c);
}

#[test]
fn overrides_are_typed() {
    let c = load(&["train.lambda2=50", "model.use_ff_block=false", "out_dir=elsewhere", "model.attn_axis=regions", "eval.seeds=[4, 5]"])
        .unwrap();
    assert_eq!(c.train.lambda2, 50.0);
    assert!(!c.model.use_ff_block);
    assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
    assert_eq!(c.model.attn_axis, AttnAxis::Regions);
    assert_eq!(c.eval.seeds, vec![4, 5]);
}

#[test]
fn file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 7\n[train]\nlambda2 = 10.0\nbatch_size = 4\n").unwrap();
    let c = RunConfig::load(Some(&path), &["train.lambda2=2".to_string()]).unwrap();
    assert_eq!((c.seed, c.train.lambda2, c.train.batch_size), (7, 2.0, 4));
    let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn invalid_settings_are_rejected() {
    for bad in [
        &["train.lambda1=-1"][..],
        &["train.lambda2=-0.5"],
        &["train.batch_size=1"],
        &["model.base_resolution=12"],
        &["model.base_resolution=32"],
        &["eval.pool_size=1"],
        &["train.lr=0"],
    ] {
        assert!(matches!(load(bad), Err(Error::Config(_)) | Err(Error::Model(_))), "{bad:?}");
    }
    assert!(matches!(load(&["train.no_such_key=1"]), Err(Error::Toml(_))));
    assert!(matches!(load(&["train.lambda2"]), Err(Error::Config(_))));
    assert!(matches!(load(&["seed.x=1"]), Err(Error::Toml(_))));
    assert!(matches!(load(&["seed=1", "seed.x=1"]), Err(Error::Config(_))));
}

#[test]
fn trajectory_hash_tracks_training_settings_only() {
    let base = load(&[]).unwrap();
    let moved = load(&["out_dir=x", "data.dir=y", "train.epochs=3", "train.max_steps=9", "eval.n_samples=5"]).unwrap();
    assert_eq!(base.trajectory_hash(), moved.trajectory_hash());
    for changed in ["train.lambda2=6", "seed=1", "model.use_gsr=false", "data.n=10"] {
        assert_ne!(base.trajectory_hash(), load(&[changed]).unwrap().trajectory_hash(), "{changed}");
    }
    assert_eq!(base.trajectory_hash().len(), 64);
}

#[test]
fn device_selection() {
    // the only test in this binary touching the variable
    std::env::remove_var(DEVICE_VAR);
    assert!(check_device().is_ok());
    std::env::set_var(DEVICE_VAR, "cpu");
    assert!(check_device().is_ok());
    std::env::set_var(DEVICE_VAR, "cuda:0");
    assert!(matches!(check_device(), Err(Error::Config(_))));
    std::env::remove_var(DEVICE_VAR);
}
