use streamsgd::build_tile_plan;
use streamsgd::config::ExperimentConfig;
use streamsgd::equivalence::{baseline_forward_backward, compare_runs, streaming_forward_backward};
use streamsgd::experiment::{datasets, initial_params};

#[test]
fn four_tile_reference_runs_end_to_end() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/four_tiles.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.train_samples = 2;
    let net = cfg.network().unwrap();
    let plan = build_tile_plan(&net, cfg.image_size, cfg.grid).unwrap();
    assert_eq!(cfg.image_size, 514);
    assert_eq!(plan.tiles.len(), 4);

    let (train, _) = datasets::<f32>(&cfg).unwrap();
    let params = initial_params::<f32>(&cfg, &net).unwrap();
    let (image, label) = &train[0];
    let base = baseline_forward_backward(&net, &params, image, *label).unwrap();
    let stream = streaming_forward_backward(&net, &params, image, *label, &plan).unwrap();
    let report = compare_runs(&base, &stream, &cfg.tolerances()).unwrap();
    assert!(report.pass, "{:?}", report.first_failure());
    assert_eq!(report.get("split_map").unwrap().max_abs, 0.0);
    assert!(stream.peak_bytes < base.peak_bytes);
}
