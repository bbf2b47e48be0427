use adaug::dataset::synth_sine_toy;
use adaug::harness::presets::run_custom;
use adaug::harness::{export_points, load_points, ModelBundle, ModelVariant, RunConfig};

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "episodes = 2\nrl_steps = 12\nepochs_generator = 3\nepochs_detector = 3\nbatch_size = 32\n\
         minibatch = 12\nkde_samples = 20\nn_experts = 3\nk_range_max = 3\nepochs_expert = 3\nepochs_gate = 3\n",
    )
    .unwrap()
}

#[test]
fn bundle_round_trip_scores_identically() {
    let data = synth_sine_toy(80, 16, 0.1, 3).unwrap();
    let (pipeline, reports) = run_custom(&data, "toy", &tiny_config(), None).unwrap();
    assert_eq!(reports.len(), 2);
    let tmp = tempfile::tempdir().unwrap();
    let bundle = pipeline.bundle();
    bundle.save(tmp.path()).unwrap();
    let back = ModelBundle::load(tmp.path()).unwrap();
    let rows: Vec<Vec<f64>> = data.samples().iter().map(|s| s.features.clone()).collect();
    for v in [ModelVariant::Single, ModelVariant::Mome] {
        assert_eq!(back.score(v, &rows).unwrap(), bundle.score(v, &rows).unwrap());
    }
    assert_eq!(back.config, bundle.config);
}

#[test]
fn export_writes_every_row() {
    let data = synth_sine_toy(80, 16, 0.1, 3).unwrap();
    let (pipeline, _) = run_custom(&data, "toy", &tiny_config(), None).unwrap();
    let raw = pipeline.augmented_raw().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("points.csv");
    let n = export_points(&raw, &pipeline.artifacts.generated_episodes, None, &path).unwrap();
    assert_eq!(n, raw.len());
    let rows = load_points(&path).unwrap();
    assert_eq!(rows.len(), n);
    let tagged = rows.iter().filter(|r| r.episode.is_some()).count();
    assert_eq!(tagged, pipeline.artifacts.generated_episodes.len());
}
