use cst_core::blocks::{init_params, load_checkpoint, CstConfig};
use cst_core::hsi::{prepare_dataset, synth_cube, DegradationSpec, PatchProtocol};
use cst_core::training::{train, TrainConfig, TrainOutputs};

fn setup() -> (CstConfig, TrainConfig, cst_core::hsi::DatasetBundle) {
    let cube = synth_cube(64, 64, 4, 3);
    let data = prepare_dataset(&cube, &PatchProtocol::desk(64, 64, 2), &DegradationSpec::bicubic(2), 1).unwrap();
    let cfg = CstConfig::tiny(4, 8, 2);
    let mut t = TrainConfig::desk();
    t.max_steps = Some(6);
    t.batch = 2;
    t.augment = true;
    (cfg, t, data)
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let (cfg, t, data) = setup();
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        dir: dir.path().to_path_buf(),
    };
    let a = train(&cfg, &t, init_params(&cfg).unwrap(), &data.train, &data.val, Some(&out)).unwrap();
    let b = train(&cfg, &t, init_params(&cfg).unwrap(), &data.train, &data.val, None).unwrap();
    assert_eq!(a.log_text(), b.log_text());
    assert_eq!(a.last, b.last);
    assert_eq!(std::fs::read_to_string(out.log()).unwrap(), a.log_text());
    let (c2, best) = load_checkpoint(out.best()).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(best, a.best);
    assert_eq!(a.step_losses.len(), 6);

    let mut t2 = t.clone();
    t2.seed = 99;
    let c = train(&cfg, &t2, init_params(&cfg).unwrap(), &data.train, &data.val, None).unwrap();
    assert_ne!(c.step_losses, a.step_losses);
}

#[test]
fn band_mismatch_is_rejected() {
    let (mut cfg, t, data) = setup();
    cfg.bands = 5;
    let init = init_params(&cfg).unwrap();
    assert!(train(&cfg, &t, init, &data.train, &data.val, None).is_err());
}
