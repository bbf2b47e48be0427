use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{synth_gaussian_clusters, synth_sine_toy, Dataset, GaussianClusterSpec, Label, Provenance, Standardizer};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::mome::train_mome;
use crate::rng;
use crate::selfloop::EpisodeReport;
use crate::train::TrainConfig;

use super::config::RunConfig;
use super::export::export_points;
use super::metrics::{evaluate, kendall_tau, median, EvalReport, ModelVariant, Scorer};
use super::pipeline::{train_pipeline, TrainedPipeline};

pub const PRESETS: [&str; 3] = ["sine_toy", "theorem_clusters", "custom"];

/// Share of rows on the correct side of 0.5.
pub fn accuracy(model: &impl Scorer, data: &Dataset) -> Result<f64> {
    let xs: Vec<Vec<f64>> = data.samples().iter().map(|s| s.features.clone()).collect();
    let scores = model.score_rows(&xs)?;
    let hits = scores
        .iter()
        .zip(data.samples())
        .filter(|(s, x)| (**s > 0.5) == (x.label == Label::Anomalous))
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Infeasible-action share over the first and last `ceil(len / 10)` episodes.
pub fn infeasible_shares(reports: &[EpisodeReport]) -> (f64, f64) {
    let w = reports.len().div_ceil(10).max(1).min(reports.len().max(1));
    let share = |rs: &[EpisodeReport]| {
        let steps: usize = rs.iter().map(|r| r.steps).sum();
        let bad: usize = rs.iter().map(|r| r.infeasible_count).sum();
        bad as f64 / steps.max(1) as f64
    };
    if reports.is_empty() {
        return (0.0, 0.0);
    }
    (share(&reports[..w]), share(&reports[reports.len() - w..]))
}

/// Kendall tau between episode index and average reward.
pub fn reward_trend(reports: &[EpisodeReport]) -> f64 {
    let idx: Vec<f64> = reports.iter().map(|r| r.episode as f64).collect();
    let reward: Vec<f64> = reports.iter().map(|r| r.average_reward).collect();
    kendall_tau(&idx, &reward)
}

#[derive(Debug, Clone)]
pub struct SineToyOutcome {
    pub pipeline: TrainedPipeline,
    pub train: Dataset,
    pub test: Dataset,
    pub reports: Vec<EvalReport>,
    pub reward_tau: f64,
    pub infeasible_first: f64,
    pub infeasible_last: f64,
}

pub fn sine_toy_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let all = synth_sine_toy(cfg.toy_normal, cfg.toy_anomalous, cfg.toy_noise, rng::derive_tag(cfg.seed, "toy"))?;
    all.split(cfg.train_fraction, rng::derive_tag(cfg.seed, "split"))
}

/// Augmentation loop and mixture on the sine toy, scored on a held-out split.
pub fn run_sine_toy(cfg: &RunConfig, log_path: Option<&Path>) -> Result<SineToyOutcome> {
    let (train, test) = sine_toy_data(cfg)?;
    let pipeline = train_pipeline(&train, cfg, log_path.map(Path::to_path_buf))?;
    let reports = pipeline.evaluate("sine_toy", &test)?;
    let (infeasible_first, infeasible_last) = infeasible_shares(&pipeline.artifacts.reports);
    Ok(SineToyOutcome {
        reward_tau: reward_trend(&pipeline.artifacts.reports),
        infeasible_first,
        infeasible_last,
        pipeline,
        train,
        test,
        reports,
    })
}

/// Writes `points.csv` with every row and `points_episode_NNN.csv` holding the
/// original rows plus the samples generated up to each episode.
pub fn export_episode_points(pipeline: &TrainedPipeline, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = pipeline.augmented_raw()?;
    let episodes = &pipeline.artifacts.generated_episodes;
    let n = export_points(&raw, episodes, None, dir.join("points.csv"))?;
    for report in &pipeline.artifacts.reports {
        let e = report.episode;
        let mut keep = Vec::new();
        let mut tags = Vec::new();
        let mut g = 0;
        for (i, &p) in raw.provenance().iter().enumerate() {
            match p {
                Provenance::Original => keep.push(i),
                Provenance::Generated => {
                    if episodes[g] <= e {
                        keep.push(i);
                        tags.push(episodes[g]);
                    }
                    g += 1;
                }
            }
        }
        export_points(&raw.subset(&keep), &tags, None, dir.join(format!("points_episode_{e:03}.csv")))?;
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSeedResult {
    pub seed: u64,
    pub n_clusters: usize,
    pub single_train_accuracy: f64,
    pub single_test_error: f64,
    pub mome_train_accuracy: f64,
    pub mome_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub runs: Vec<ClusterSeedResult>,
    pub median_single_test_error: f64,
    pub median_mome_test_error: f64,
    pub reports: Vec<EvalReport>,
}

/// Three normal and three anomalous isotropic clusters on a ring of radius
/// `cluster_spacing`, labels alternating around the ring.
pub fn ring_cluster_spec(cfg: &RunConfig) -> GaussianClusterSpec {
    let centers = [0usize, 2, 4, 1, 3, 5]
        .iter()
        .map(|&i| {
            let t = i as f64 * PI / 3.0;
            vec![cfg.cluster_spacing * t.cos(), cfg.cluster_spacing * t.sin()]
        })
        .collect();
    GaussianClusterSpec {
        normal_clusters: 3,
        anomalous_clusters: 3,
        dim: 2,
        sigma: cfg.cluster_sigma,
        centers,
        samples_per_cluster: cfg.cluster_samples,
    }
}

/// Large single detector against the mixture, paired over `cluster_seeds` seeds.
pub fn run_cluster_comparison(cfg: &RunConfig) -> Result<ClusterOutcome> {
    cfg.validate()?;
    let spec = ring_cluster_spec(cfg);
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for s in 0..cfg.cluster_seeds as u64 {
        let seed = rng::derive(cfg.seed, s);
        let train = synth_gaussian_clusters(&spec, rng::derive_tag(seed, "train"))?;
        let test = synth_gaussian_clusters(&spec, rng::derive_tag(seed, "test"))?;
        let st = Standardizer::fit(&train)?;
        let (train, test) = (st.transform(&train)?, st.transform(&test)?);
        let mut single = DetectorModel::new(cfg.detector_spec(2), rng::derive_tag(seed, "single"))?;
        single.train(
            &train,
            &TrainConfig {
                epochs: cfg.epochs_detector,
                lr: cfg.lr_detector,
                batch_size: cfg.batch_size,
                seed: rng::derive_tag(seed, "single_fit"),
            },
        )?;
        let (mome, report) = train_mome(&train, &cfg.mome_config(2), rng::derive_tag(seed, "mome"))?;
        let name = format!("theorem_clusters_seed{s}");
        reports.push(evaluate(&single, ModelVariant::Single, &name, &test, cfg.threshold)?);
        reports.push(evaluate(&mome, ModelVariant::Mome, &name, &test, cfg.threshold)?);
        runs.push(ClusterSeedResult {
            seed: s,
            n_clusters: report.n_clusters,
            single_train_accuracy: accuracy(&single, &train)?,
            single_test_error: 1.0 - accuracy(&single, &test)?,
            mome_train_accuracy: accuracy(&mome, &train)?,
            mome_test_error: 1.0 - accuracy(&mome, &test)?,
        });
    }
    let single: Vec<f64> = runs.iter().map(|r| r.single_test_error).collect();
    let mixture: Vec<f64> = runs.iter().map(|r| r.mome_test_error).collect();
    Ok(ClusterOutcome {
        median_single_test_error: median(&single),
        median_mome_test_error: median(&mixture),
        runs,
        reports,
    })
}

/// Full pipeline on user data split by `train_fraction`.
pub fn run_custom(data: &Dataset, name: &str, cfg: &RunConfig, log_path: Option<&Path>) -> Result<(TrainedPipeline, Vec<EvalReport>)> {
    let (train, test) = data.split(cfg.train_fraction, rng::derive_tag(cfg.seed, "split"))?;
    let pipeline = train_pipeline(&train, cfg, log_path.map(Path::to_path_buf))?;
    let reports = pipeline.evaluate(name, &test)?;
    Ok((pipeline, reports))
}

/// Runs a named preset. `custom` requires `data`.
pub fn run_preset(name: &str, cfg: &RunConfig, data: Option<&Dataset>) -> Result<Vec<EvalReport>> {
    match name {
        "sine_toy" => Ok(run_sine_toy(cfg, None)?.reports),
        "theorem_clusters" => Ok(run_cluster_comparison(cfg)?.reports),
        "custom" => {
            let data = data.ok_or_else(|| Error::Config("preset `custom` needs a dataset".into()))?;
            Ok(run_custom(data, "custom", cfg, None)?.1)
        }
        _ => Err(Error::Config(format!("unknown preset `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(episode: usize, reward: f64, infeasible: usize) -> EpisodeReport {
        EpisodeReport {
            episode,
            average_reward: reward,
            infeasible_count: infeasible,
            steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn shares_use_a_tenth_of_the_episodes() {
        let rs: Vec<EpisodeReport> = (0..20).map(|e| report(e, e as f64, 10 - e / 2)).collect();
        let (first, last) = infeasible_shares(&rs);
        assert_eq!(first, 1.0);
        assert_eq!(last, 0.1);
        assert_eq!(reward_trend(&rs), 1.0);
    }

    #[test]
    fn ring_alternates_labels() {
        let spec = ring_cluster_spec(&RunConfig::default());
        for (u, c) in spec.centers.iter().enumerate() {
            let angle = c[1].atan2(c[0]).rem_euclid(2.0 * PI);
            let slot = (angle / (PI / 3.0)).round() as usize % 6;
            assert_eq!(spec.label_of(u) == Label::Normal, slot.is_multiple_of(2));
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert!(matches!(run_preset("nope", &RunConfig::default(), None), Err(Error::Config(_))));
        assert!(run_preset("custom", &RunConfig::default(), None).is_err());
    }
}
