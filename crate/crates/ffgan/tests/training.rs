mod common;

use std::fs;

use common::{prepared, tiny_config};
use ffgan::checkpoint::{self, epoch_dir};
use ffgan::data::generate_dataset;
use ffgan::train::{train, DIAGNOSTIC, LOSS_HEADER, NAN_DUMP};
use ffgan::Error;
use ffgan_core::model::NETWORK_NAMES;
use ffgan_core::shapes::Split;
use ffgan_core::Tensor;

fn csv(config: &ffgan::RunConfig) -> String {
    fs::read_to_string(config.loss_csv()).unwrap()
}

#[test]
fn one_epoch_of_sixty_four_samples_at_batch_eight_logs_eight_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = prepared(dir.path(), 76);
    assert_eq!(data.ids(Split::Train).len(), 64);
    let outcome = train(&config, &data).unwrap();
    assert_eq!((outcome.steps, outcome.epochs), (8, 1));
    let text = csv(&config);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOSS_HEADER);
    assert_eq!(lines.len(), 9);
    for (k, line) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0] as usize, k + 1);
        assert!(fields.iter().all(|v| v.is_finite()));
    }
    let ck = checkpoint::load(&epoch_dir(&config.checkpoint_root(), 1)).unwrap();
    assert_eq!((ck.manifest.epoch, ck.manifest.step), (1, 8));
    assert_eq!(ck.manifest.config_hash, config.trajectory_hash());
    assert!(ck.opts.is_some());
    for name in NETWORK_NAMES {
        assert!(ck.manifest.files.iter().any(|f| f.name == format!("{name}.bin")));
    }
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, data) = prepared(dir.path(), 60);
    config.train.epochs = 3;
    train(&config, &data).unwrap();
    let straight = csv(&config);
    let straight_ck = checkpoint::load(&epoch_dir(&config.checkpoint_root(), 3)).unwrap();

    // same run in pieces: one epoch, then a step budget ending mid-epoch, then the rest
    fs::remove_dir_all(config.checkpoint_root()).unwrap();
    fs::remove_file(config.loss_csv()).unwrap();
    config.train.epochs = 1;
    train(&config, &data).unwrap();
    config.train.epochs = 3;
    config.train.max_steps = 9;
    let partial = train(&config, &data).unwrap();
    assert_eq!(partial.steps, 9);
    assert_eq!(checkpoint::read_manifest(&partial.checkpoint).unwrap().step, 9);
    config.train.max_steps = 0;
    let resumed = train(&config, &data).unwrap();
    assert_eq!(csv(&config), straight);
    assert_eq!(resumed.steps, straight_ck.manifest.step);
    let again = checkpoint::load(&epoch_dir(&config.checkpoint_root(), 3)).unwrap();
    for (a, b) in again.params.stores().iter().zip(straight_ck.params.stores()) {
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
    assert_eq!(again.manifest.rng_digest, straight_ck.manifest.rng_digest);

    // rows past the checkpoint are dropped on resume
    fs::write(config.loss_csv(), format!("{straight}999,9,1,1,1,1,1,1,1,1,1,1\n")).unwrap();
    config.train.epochs = 3;
    train(&config, &data).unwrap();
    assert_eq!(csv(&config), straight);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, data) = prepared(dir.path(), 40);
    train(&config, &data).unwrap();
    config.train.epochs = 2;
    config.train.lambda2 = 7.0;
    assert!(matches!(train(&config, &data), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_with_a_loadable_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, data) = prepared(dir.path(), 76);
    train(&config, &data).unwrap();
    // poison the last checkpoint and resume from it
    let ck_dir = epoch_dir(&config.checkpoint_root(), 1);
    let mut ck = checkpoint::load(&ck_dir).unwrap();
    let ps = &mut ck.params.generator[0];
    let id = ps.trainable_ids().next().unwrap();
    let shape = ps.get(id).shape().to_vec();
    *ps.get_mut(id) = Tensor::full(&shape, f32::NAN);
    let m = &ck.manifest;
    checkpoint::save(&ck_dir, &ck.config, &ck.vocab, &ck.params, ck.opts.as_ref(), m.epoch, m.step, &m.rng_digest).unwrap();

    config.train.epochs = 2;
    match train(&config, &data) {
        Err(Error::NonFinite { step, dump, .. }) => {
            assert_eq!(step, 9);
            assert_eq!(dump, config.out_dir.join(NAN_DUMP));
            let back = checkpoint::load(&dump).unwrap();
            assert_eq!(back.manifest.step, 8);
            assert!(!back.params.all_finite());
            let report = fs::read_to_string(dump.join(DIAGNOSTIC)).unwrap();
            assert!(report.contains("failing_step = 9"));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert_eq!(csv(&config).lines().count(), 9);
}

#[test]
fn training_requires_data_and_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 30);
    let data = generate_dataset(30, 0, &config.data.dir).unwrap();
    assert!(matches!(train(&config, &data), Err(Error::Config(_))));
    let tampered = {
        ffgan::train::pretrain(&config, &data).unwrap();
        let path = config.pretrain_dir().join("g0.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        checkpoint::load(&config.pretrain_dir())
    };
    assert!(matches!(tampered, Err(Error::Config(_))));
}
