use adaug::dataset::{synth_sine_toy, Label, Standardizer};
use adaug::diffcore::spectral_norm;
use adaug::generator::{GeneratorConfig, GeneratorModel};
use adaug::train::TrainConfig;

#[test]
fn training_lowers_the_loss_and_respects_the_cap() {
    let ds = synth_sine_toy(200, 40, 0.1, 2).unwrap();
    let ds = Standardizer::fit(&ds).unwrap().transform(&ds).unwrap();
    let mut gen = GeneratorModel::new(GeneratorConfig::for_features(2), 3).unwrap();
    let before = gen.elbo_loss(ds.samples(), 7).unwrap().total;
    let cfg = TrainConfig {
        epochs: 40,
        lr: 3e-3,
        batch_size: 64,
        seed: 5,
    };
    gen.train(&ds, &cfg).unwrap();
    let after = gen.elbo_loss(ds.samples(), 7).unwrap().total;
    assert!(after < before, "{before} -> {after}");
    let decoder = gen.decoder().clone();
    for (l, cap) in decoder.spec.spectral_caps.iter().enumerate() {
        if let Some(cap) = cap {
            assert!(spectral_norm(gen.params.expect(&decoder.weight_name(l))) <= cap + 1e-9);
        }
    }
    assert!(decoder.spec.spectral_caps.iter().any(Option::is_some));
}

#[test]
fn samples_and_codes_have_the_right_shape() {
    let gen = GeneratorModel::new(GeneratorConfig::for_features(5), 1).unwrap();
    let xs = gen.sample_anomalies(7, 2).unwrap();
    assert_eq!(xs.len(), 7);
    assert!(xs.iter().all(|x| x.len() == 5 && x.iter().all(|v| v.is_finite())));
    let code = gen.encode(&xs[0], Label::Anomalous, 3).unwrap();
    assert_eq!(code.z.len(), 5);
    assert_eq!(gen.sample_anomalies(7, 2).unwrap(), xs);
}
