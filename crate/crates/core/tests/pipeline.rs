//! Small end-to-end runs through the library API.

use addm::anodetect::{self, DetectParams};
use addm::io::checkpoint;
use addm::io::manifest::DatasetManifest;
use addm::metrics::Aggregation;
use addm::nets::DenoiserConfig;
use addm::phantoms::{self, DatasetSizes, PhantomSpec, TEST_MANIFEST, TRAIN_MANIFEST};
use addm::training::{self, TrainConfig, LOG_HEADER};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 20,
        epochs: 2,
        batch_size: 4,
        checkpoint_every: 1,
        denoiser: DenoiserConfig {
            base_width: 4,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn sizes() -> DatasetSizes {
    DatasetSizes {
        n_train: 8,
        n_val: 3,
        n_test_normal: 2,
        n_test_anomalous: 2,
    }
}

#[test]
fn generate_train_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms::build_dataset(&PhantomSpec::default(), sizes(), &data).unwrap();
    let train = DatasetManifest::load(&data.join(TRAIN_MANIFEST)).unwrap();
    let test = DatasetManifest::load(&data.join(TEST_MANIFEST)).unwrap();

    let out = training::train_on_manifest(&tiny_config(), &train, &dir.path().join("run")).unwrap();
    assert!(out.checkpoints[0].ends_with("ckpt_epoch00001.addm"));
    let log = std::fs::read_to_string(&out.log_path).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    let (den, schedule, header) = checkpoint::load_denoiser(&out.final_checkpoint).unwrap();
    assert_eq!(header.step, 4);
    let params = DetectParams {
        t_ad: 5,
        threshold: 0.2,
        n_recon: 1,
        seed: 3,
    };
    let res = dir.path().join("res");
    let records = anodetect::detect_dataset(&den, &schedule, &test, &params, &res).unwrap();
    assert_eq!(records.len(), 4);
    let reread = anodetect::read_records(&res).unwrap();
    assert_eq!(reread.len(), 4);
    for agg in [Aggregation::Micro, Aggregation::Macro] {
        let table = anodetect::evaluate_records(&res, &reread, agg).unwrap();
        for v in [table.dice, table.auc, table.iou, table.precision, table.recall] {
            assert!((0.0..=1.0).contains(&v), "{table:?}");
        }
    }
}

#[test]
fn training_refuses_anomalous_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms::build_dataset(&PhantomSpec::default(), sizes(), &data).unwrap();
    let test = DatasetManifest::load(&data.join(TEST_MANIFEST)).unwrap();
    let e = training::train_on_manifest(&tiny_config(), &test, &dir.path().join("run")).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let built = phantoms::build_dataset(&PhantomSpec::default(), sizes(), &data).unwrap();
    let config = tiny_config();
    let full = training::train_on_manifest(&config, &built.train, &dir.path().join("full")).unwrap();

    // Reload after epoch 1 and run the second epoch by hand.
    let images: Vec<_> = built.train.records.iter().map(|r| built.train.load_image(r).unwrap()).collect();
    let mut state = checkpoint::load(&full.checkpoints[0]).unwrap().train_state().unwrap();
    let schedule = config.schedule().unwrap();
    state.train_epoch(&images, &schedule, &config, |_, _| Ok(())).unwrap();
    assert!(state.denoiser == full.state.denoiser);
    assert!(state.discriminator == full.state.discriminator);
}
