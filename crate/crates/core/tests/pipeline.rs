use std::fs;

use mipcad::pipeline::{Pipeline, PipelineConfig, Stage};
use mipcad::synthetic::{write_dataset, SyntheticConfig};
use mipcad::Error;

fn setup(dir: &std::path::Path) -> PipelineConfig {
    let data = dir.join("data");
    let sc = SyntheticConfig {
        scans: 4,
        ..SyntheticConfig::default()
    };
    write_dataset(&data, &sc).unwrap();
    let mut cfg = PipelineConfig::synthetic();
    cfg.n_subsets = 2;
    cfg.data_root = data;
    cfg.cache_root = dir.join("cache");
    cfg
}

#[test]
fn stages_are_cached_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let p = Pipeline::open(cfg.clone()).unwrap();

    let err = p.run(Stage::Froc).unwrap_err();
    assert!(matches!(err, Error::MissingDependency { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("score"));
    assert!(matches!(p.run(Stage::Mip), Err(Error::MissingDependency { .. })));

    assert!(!p.run(Stage::Segment).unwrap().cached);
    assert!(!p.run(Stage::Mip).unwrap().cached);
    let p = Pipeline::open(cfg.clone()).unwrap();
    assert!(p.run(Stage::Segment).unwrap().cached);
    assert!(p.run(Stage::Mip).unwrap().cached);
    assert_eq!(p.load_stack("synth-000", 5).unwrap().slab_thickness, 5);

    // a changed parameter invalidates the stage and everything after it
    let mut thin = cfg.clone();
    thin.lungseg.closing_radius += 1;
    let q = Pipeline::open(thin).unwrap();
    assert!(matches!(q.run(Stage::Mip), Err(Error::MissingDependency { .. })));

    // an edited input file is picked up
    let mhd = cfg.data_root.join("synth-001.mhd");
    let text = fs::read_to_string(&mhd).unwrap();
    fs::write(&mhd, format!("{text}\n")).unwrap();
    let r = Pipeline::open(cfg).unwrap();
    let out = r.run(Stage::Segment).unwrap();
    assert!(!out.cached);
    assert!(out.message.contains("1 scans segmented"), "{}", out.message);
}

#[test]
fn bad_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = setup(dir.path());
    cfg.fold = 5;
    assert!(matches!(Pipeline::open(cfg), Err(Error::Parameter(_))));
    let mut cfg = setup(dir.path());
    cfg.threshold = 1.5;
    assert!(Pipeline::open(cfg).is_err());
    assert!(!dir.path().join("cache").exists());
}
