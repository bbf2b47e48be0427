use adaug::dataset::{synth_gaussian_clusters, GaussianClusterSpec};
use adaug::detector::{DetectorModel, SsmDetectorSpec};
use adaug::diffcore::checkpoint;
use adaug::harness::auc_roc;
use adaug::train::TrainConfig;

fn two_blobs(seed: u64) -> adaug::dataset::Dataset {
    let spec = GaussianClusterSpec {
        normal_clusters: 1,
        anomalous_clusters: 1,
        dim: 3,
        sigma: 0.5,
        centers: vec![vec![-1.0, 0.0, 0.5], vec![1.0, 0.5, -0.5]],
        samples_per_cluster: 80,
    };
    synth_gaussian_clusters(&spec, seed).unwrap()
}

#[test]
fn separates_two_blobs() {
    let train = two_blobs(1);
    let test = two_blobs(2);
    let mut det = DetectorModel::new(SsmDetectorSpec::expert(3), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        lr: 1e-2,
        batch_size: 32,
        seed: 4,
    };
    let metrics = det.train(&train, &cfg).unwrap();
    assert!(metrics.final_loss().unwrap() < 0.3);
    let xs: Vec<Vec<f64>> = test.samples().iter().map(|s| s.features.clone()).collect();
    let auc = auc_roc(&det.score_batch(&xs).unwrap(), &test.labels()).unwrap();
    assert!(auc > 0.95, "auc {auc}");
}

#[test]
fn checkpoint_restores_scores() {
    let det = DetectorModel::new(SsmDetectorSpec::large(3), 9).unwrap();
    let bytes = checkpoint::encode(&det.params);
    let back = DetectorModel::from_params(det.spec, checkpoint::decode(&bytes).unwrap()).unwrap();
    let x = [0.3, -1.2, 2.0];
    assert_eq!(back.score(&x).unwrap(), det.score(&x).unwrap());
}

#[test]
fn rejects_wrong_width() {
    let det = DetectorModel::new(SsmDetectorSpec::expert(3), 0).unwrap();
    assert!(det.score(&[1.0, 2.0]).is_err());
}
