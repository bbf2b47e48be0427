use adaug::dataset::{load_dataset, save_dataset, synth_sine_toy, trim_balance, Dataset, Label, LoadOptions, Sample};
use proptest::prelude::*;

fn labeled(normal: usize, anomalous: usize) -> Dataset {
    let samples = (0..normal + anomalous)
        .map(|i| {
            let label = if i < normal { Label::Normal } else { Label::Anomalous };
            Sample::new(vec![i as f64, -(i as f64) / 3.0], label)
        })
        .collect();
    Dataset::from_samples(2, samples).unwrap()
}

#[test]
fn csv_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("toy.csv");
    let ds = synth_sine_toy(50, 9, 0.1, 4).unwrap();
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path, LoadOptions::default()).unwrap();
    assert_eq!(back.samples(), ds.samples());
}

#[test]
fn split_is_stratified() {
    let ds = synth_sine_toy(100, 20, 0.1, 1).unwrap();
    let (train, test) = ds.split(0.6, 2).unwrap();
    assert_eq!((train.n_normal(), train.n_anomalous()), (60, 12));
    assert_eq!((test.n_normal(), test.n_anomalous()), (40, 8));
}

proptest! {
    #[test]
    fn balancing_keeps_the_minority(normal in 1usize..60, anomalous in 1usize..60, seed in any::<u64>()) {
        let ds = labeled(normal, anomalous);
        let b = trim_balance(&ds, seed).unwrap();
        let j = normal.min(anomalous);
        prop_assert_eq!(b.balance_count(), j);
        prop_assert_eq!(b.dataset().n_normal(), j);
        prop_assert_eq!(b.dataset().n_anomalous(), j);
        let minority = if normal <= anomalous { Label::Normal } else { Label::Anomalous };
        prop_assert_eq!(b.dataset().features_of(minority), ds.features_of(minority));
    }
}
