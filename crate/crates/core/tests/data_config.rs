//! Dataset generation/ingestion contracts and config/registry round-trips.

mod common;

use common::*;
use std::fs;
use xfer_core::checkpoint;
use xfer_core::config::{entry_for, ModelRegistry, RunConfig};
use xfer_core::data::{generate_synthetic, load_dataset, ImagePolicy, Split, SyntheticSpec};
use xfer_core::trainer::{accuracy_on, pretrain, PretrainConfig};
use xfer_core::Error;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 3,
        samples_per_class: 4,
        image_size: 8,
        seed,
        noise_std: 0.1,
    }
}

#[test]
fn same_spec_and_seed_reproduce_identical_files() {
    let spec = small_spec(7);
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    let a = generate_synthetic(&spec, t1.path(), Split::Train).unwrap();
    let b = generate_synthetic(&spec, t2.path(), Split::Train).unwrap();
    assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
}

#[test]
fn splits_share_textures_but_not_noise() {
    let spec = small_spec(9);
    let tmp = tempfile::tempdir().unwrap();
    let train = generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    let eval = generate_synthetic(&spec, tmp.path(), Split::Eval).unwrap();
    assert_ne!(train.fingerprint().unwrap(), eval.fingerprint().unwrap());
    assert_eq!(train.class_count(), eval.class_count());
}

#[test]
fn single_class_dataset_is_legal() {
    let spec = SyntheticSpec {
        num_classes: 1,
        samples_per_class: 3,
        image_size: 8,
        seed: 1,
        noise_std: 0.05,
    };
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    assert_eq!(data.len(), 3);
    assert!(data.labels().iter().all(|&l| l == 0));
}

#[test]
fn empty_manifest_loads_as_empty_source() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("train");
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"{"class_count": 5, "split": "train", "rows": []}"#,
    )
    .unwrap();
    let data = load_dataset(tmp.path(), Split::Train, ImagePolicy::AsIs).unwrap();
    assert_eq!(data.len(), 0);
    assert!(data.is_empty());
}

#[test]
fn out_of_range_label_names_the_row() {
    let spec = small_spec(11);
    let tmp = tempfile::tempdir().unwrap();
    generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    let manifest_path = tmp.path().join("train/manifest.json");
    let text = fs::read_to_string(&manifest_path).unwrap();
    // corrupt the second row's label to equal class_count
    let bad = text.replacen("\"label\": 0", "\"label\": 3", 2).replacen("\"label\": 3", "\"label\": 0", 1);
    fs::write(&manifest_path, bad).unwrap();
    match load_dataset(tmp.path(), Split::Train, ImagePolicy::AsIs) {
        Err(Error::Ingestion { row: Some(r), .. }) => assert_eq!(r, 1),
        other => panic!("expected row-naming ingestion error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn missing_file_names_the_row() {
    let spec = small_spec(13);
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    drop(data);
    fs::remove_file(tmp.path().join("train/images/c0/s2.png")).unwrap();
    match load_dataset(tmp.path(), Split::Train, ImagePolicy::AsIs) {
        Err(Error::Ingestion { row: Some(r), .. }) => assert_eq!(r, 2),
        other => panic!("expected row-naming ingestion error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn shuffle_replays_identically_per_seed() {
    let spec = small_spec(15);
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    assert_eq!(data.shuffled_indices(3), data.shuffled_indices(3));
    assert_ne!(data.shuffled_indices(3), data.shuffled_indices(4));
}

#[test]
fn resize_policy_changes_decoded_size() {
    let spec = small_spec(17);
    let tmp = tempfile::tempdir().unwrap();
    generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    let data = load_dataset(tmp.path(), Split::Train, ImagePolicy::ResizeTo(4, 4)).unwrap();
    assert_eq!(data.image(0).unwrap().dim(), (3, 4, 4));
}

#[test]
fn tiny_cnn_learns_the_synthetic_set() {
    // desk-scale learnability: a small CNN on 8x8 data clears 80% held-out
    let spec = SyntheticSpec {
        num_classes: 3,
        samples_per_class: 30,
        image_size: 8,
        seed: 19,
        noise_std: 0.1,
    };
    let tmp = tempfile::tempdir().unwrap();
    let train = generate_synthetic(&spec, tmp.path(), Split::Train).unwrap();
    let eval_spec = SyntheticSpec {
        samples_per_class: 10,
        ..spec
    };
    let eval = generate_synthetic(&eval_spec, tmp.path(), Split::Eval).unwrap();

    let mut s = common::spec("m", "toy_cnn", xfer_core::adapters::Family::Cnn, 3, 8, 3, 1);
    s.arch_params = serde_json::json!({"channels": [8, 16]});
    let model = xfer_core::adapters::ArchRegistry::builtin().build(&s).unwrap();
    pretrain(
        model.as_ref(),
        &train,
        &PretrainConfig {
            epochs: 12,
            learning_rate: 0.05,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let acc = accuracy_on(model.as_ref(), &eval).unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}

#[test]
fn run_config_roundtrips_value_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        alignment: Some(xfer_core::alignment::AlignmentConfig {
            gamma: 0.3,
            ..Default::default()
        }),
        attack: Some(xfer_core::attack::AttackSpec {
            steps: 7,
            ensemble: vec!["a".into(), "b".into()],
            ..Default::default()
        }),
        ..Default::default()
    };
    let path = tmp.path().join("run.toml");
    cfg.save(&path).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded, cfg);
    // serializing again is textually stable
    assert_eq!(loaded.to_toml(), cfg.to_toml());
}

#[test]
fn unknown_config_keys_fail_closed() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[alignment]\ngamma = 0.2\nchroma = 1.0\n").unwrap();
    match RunConfig::load(&path) {
        Err(Error::Config(_)) => {}
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn registry_verifies_checkpoint_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_cnn("m", 3, 21);
    let ckpt = tmp.path().join("ckpts/m.ckpt");
    let hash = checkpoint::save(model.as_ref(), &ckpt).unwrap();

    let mut registry = ModelRegistry::default();
    registry.upsert(entry_for(model.as_ref(), "ckpts/m.ckpt".into(), hash.clone()));
    let reg_path = tmp.path().join("registry.json");
    registry.save(&reg_path).unwrap();

    let loaded = ModelRegistry::load(&reg_path).unwrap();
    let restored = loaded.load_model("m", tmp.path()).unwrap();
    assert_eq!(restored.model_id(), "m");

    // stale hash in the registry is an integrity error
    let mut broken = loaded.clone();
    broken.models[0].sha256 = format!("{:0>64}", "deadbeef");
    match broken.load_model("m", tmp.path()) {
        Err(Error::Integrity(_)) => {}
        Err(other) => panic!("expected integrity error, got {other}"),
        Ok(_) => panic!("hash mismatch accepted"),
    }

    match loaded.get("nope") {
        Err(Error::Config(_)) => {}
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}
