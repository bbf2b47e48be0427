//! The augmentation loop: retrain generator and detector, roll out the agent,
//! keep the highest-reward samples, rebalance, repeat until the average reward
//! stalls.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agent::{
    compute_reward, feasible_action_search, is_feasible, AgentBundle, AgentConfig, AgentState, FeasibleRegion,
    LatentObjective, PpoMetrics, RewardContext, SearchObjective, TransitionRecord,
};
use crate::dataset::{trim_balance, BalancedDataset, Dataset, Label, Sample};
use crate::density::{entropy_mc, fit_kde, Bandwidth, DEFAULT_BANDWIDTH, DEFAULT_KDE_SAMPLES};
use crate::detector::{self, DetectorModel, SsmDetectorSpec};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorConfig, GeneratorModel};
use crate::rng;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub episodes: usize,
    pub steps: usize,
    /// `None` means `max(1, steps / 10)`.
    pub top_l: Option<usize>,
    pub omega: f64,
    pub patience: usize,
    pub epochs_generator: usize,
    pub epochs_detector: usize,
    pub lr_generator: f64,
    pub lr_detector: f64,
    pub batch_size: usize,
    pub kde_bandwidth: Bandwidth,
    pub kde_samples: usize,
    pub generator: GeneratorConfig,
    pub detector: SsmDetectorSpec,
    pub agent: AgentConfig,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

impl LoopConfig {
    pub fn new(feature_dim: usize) -> Self {
        let generator = GeneratorConfig::for_features(feature_dim);
        let agent = AgentConfig::new(generator.latent_dim);
        Self {
            episodes: 200,
            steps: 500,
            top_l: None,
            omega: 1e-3,
            patience: 20,
            epochs_generator: generator::DEFAULT_EPOCHS,
            epochs_detector: detector::DEFAULT_EPOCHS,
            lr_generator: generator::DEFAULT_LR,
            lr_detector: detector::DEFAULT_LR,
            batch_size: 256,
            kde_bandwidth: Bandwidth::Fixed(DEFAULT_BANDWIDTH),
            kde_samples: DEFAULT_KDE_SAMPLES,
            generator,
            detector: SsmDetectorSpec::large(feature_dim),
            agent,
            seed: 0,
            log_path: None,
        }
    }

    pub fn top_l(&self) -> usize {
        self.top_l.unwrap_or((self.steps / 10).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.top_l();
        if self.steps == 0 || l == 0 || l > self.steps {
            return Err(Error::Config(format!("need 1 <= top_l <= steps, got top_l={l} steps={}", self.steps)));
        }
        if self.omega.is_nan() || self.omega < 0.0 {
            return Err(Error::Config(format!("omega must be non-negative, got {}", self.omega)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.agent.latent_dim != self.generator.latent_dim {
            return Err(Error::Config("agent and generator latent sizes differ".into()));
        }
        if self.generator.feature_dim != self.detector.feature_dim {
            return Err(Error::Config("generator and detector feature sizes differ".into()));
        }
        self.generator.validate()?;
        self.detector.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: usize,
    pub average_reward: f64,
    pub average_entropy_term: f64,
    pub average_evasion_term: f64,
    pub infeasible_count: usize,
    /// Infeasible actions whose search did not improve the reward.
    pub search_failures: usize,
    pub steps: usize,
    pub train_size: usize,
    pub balanced_size: usize,
    pub anomalous_count: usize,
    pub added: usize,
    pub generator_loss: Option<f64>,
    pub detector_loss: Option<f64>,
    pub detector_train_accuracy: f64,
    pub ppo: PpoMetrics,
    pub selected_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub step: usize,
    pub features: Vec<f64>,
    pub reward: f64,
}

/// Mutable state threaded through the episodes.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub generator: GeneratorModel,
    pub detector: DetectorModel,
    pub agent: AgentBundle,
    pub train: Dataset,
    /// Episode of each generated sample, in append order.
    pub generated_episodes: Vec<usize>,
}

impl LoopState {
    pub fn new(cfg: &LoopConfig, train: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.feature_dim() != cfg.generator.feature_dim {
            return Err(Error::Shape(format!(
                "data has {} features, config expects {}",
                train.feature_dim(),
                cfg.generator.feature_dim
            )));
        }
        Ok(Self {
            generator: GeneratorModel::new(cfg.generator.clone(), rng::derive_tag(cfg.seed, "generator"))?,
            detector: DetectorModel::new(cfg.detector, rng::derive_tag(cfg.seed, "detector"))?,
            agent: AgentBundle::new(cfg.agent.clone(), rng::derive_tag(cfg.seed, "agent"))?,
            train,
            generated_episodes: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: Vec<TransitionRecord>,
    pub generated: Vec<GeneratedSample>,
    pub report: EpisodeReport,
    pub balanced: BalancedDataset,
}

fn all_features(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples().iter().map(|s| s.features.clone()).collect()
}

fn accuracy(det: &DetectorModel, data: &Dataset) -> Result<f64> {
    let scores = det.score_batch(&all_features(data))?;
    let hits = scores
        .iter()
        .zip(data.samples())
        .filter(|(s, x)| (**s > 0.5) == (x.label == Label::Anomalous))
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// One episode on `state.train`; the dataset itself is not modified.
pub fn run_episode(state: &mut LoopState, episode: usize, cfg: &LoopConfig) -> Result<EpisodeOutcome> {
    if state.train.n_anomalous() == 0 {
        return Err(Error::EmptyClass("anomalous"));
    }
    let seed = rng::derive(cfg.seed, episode as u64);
    let gen_metrics = state.generator.train(
        &state.train,
        &TrainConfig {
            epochs: cfg.epochs_generator,
            lr: cfg.lr_generator,
            batch_size: cfg.batch_size,
            seed: rng::derive_tag(seed, "generator"),
        },
    )?;
    let balanced = trim_balance(&state.train, rng::derive_tag(seed, "balance"))?;
    let det_metrics = state.detector.train(
        balanced.dataset(),
        &TrainConfig {
            epochs: cfg.epochs_detector,
            lr: cfg.lr_detector,
            batch_size: cfg.batch_size,
            seed: rng::derive_tag(seed, "detector"),
        },
    )?;

    let anomalies = state.train.features_of(Label::Anomalous);
    let mut latents = Vec::with_capacity(anomalies.len());
    for x in &anomalies {
        latents.push(state.generator.encode_moments(x, Label::Anomalous)?.0);
    }
    let region = FeasibleRegion::from_points(&latents, &all_features(&state.train), cfg.agent.rho_margin)?;
    let bandwidth = cfg.kde_bandwidth;
    let data_kde = fit_kde(&anomalies, bandwidth)?;
    let latent_kde = fit_kde(&latents, bandwidth)?;
    let entropy_seed = rng::derive_tag(seed, "entropy");
    let entropy = entropy_mc(&data_kde, cfg.kde_samples, entropy_seed);
    let ctx = RewardContext {
        anomalous_kde: &data_kde,
        detector: &state.detector,
        episode,
        gamma: cfg.agent.gamma,
        kde_samples: cfg.kde_samples,
        entropy_seed,
    };
    let objective = LatentObjective {
        generator: &state.generator,
        region: &region,
        latent_kde: &latent_kde,
        reward_ctx: &ctx,
    };

    let mut order: Vec<usize> = (0..anomalies.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_tag(seed, "order")));
    let progress = episode as f64 / cfg.episodes.max(1) as f64;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut generated = Vec::with_capacity(cfg.steps);
    let mut infeasible_count = 0;
    let mut search_failures = 0;
    let agent = &mut state.agent;
    for t in 0..cfg.steps {
        let z = latents[order[t % order.len()]].clone();
        let s = AgentState { z, entropy, progress };
        let mut action = agent.act(&s, rng::derive(seed, 1 << 32 | t as u64))?;
        let z_hat: Vec<f64> = s.z.iter().zip(&action.delta).map(|(a, b)| a + b).collect();
        let feasible = is_feasible(&z_hat, &region, &state.generator)?;
        let z_final = if feasible {
            z_hat
        } else {
            infeasible_count += 1;
            let found = feasible_action_search(&s.z, &objective, cfg.agent.eta_feasible, cfg.agent.alpha_feasible)?;
            if !found.improved {
                search_failures += 1;
            }
            let delta_hat: Vec<f64> = found.z.iter().zip(&s.z).map(|(a, b)| a - b).collect();
            agent.imitation_update(&s, &delta_hat)?;
            action.log_prob = agent.log_prob(&s, &delta_hat)?;
            action.delta = delta_hat;
            found.z
        };
        debug_assert!(objective.is_feasible(&z_final).unwrap_or(true) || !feasible);
        let x_hat = state.generator.decode(&z_final, Label::Anomalous)?;
        let reward = compute_reward(&x_hat, &ctx)?;
        trajectory.push(TransitionRecord {
            value: agent.value_estimate(&s)?,
            state: s,
            action,
            reward,
            feasible,
            sample: x_hat.clone(),
        });
        generated.push(GeneratedSample {
            step: t,
            features: x_hat,
            reward: reward.total,
        });
    }
    let ppo = agent.ppo_update(&trajectory, rng::derive_tag(seed, "ppo"))?;

    let n = trajectory.len() as f64;
    let mean = |f: &dyn Fn(&TransitionRecord) -> f64| trajectory.iter().map(f).sum::<f64>() / n;
    let report = EpisodeReport {
        episode,
        average_reward: mean(&|t| t.reward.total),
        average_entropy_term: mean(&|t| t.reward.entropy_term),
        average_evasion_term: mean(&|t| t.reward.evasion_term),
        infeasible_count,
        search_failures,
        steps: trajectory.len(),
        train_size: state.train.len(),
        balanced_size: balanced.len(),
        anomalous_count: state.train.n_anomalous(),
        added: 0,
        generator_loss: gen_metrics.final_loss(),
        detector_loss: det_metrics.final_loss(),
        detector_train_accuracy: accuracy(&state.detector, balanced.dataset())?,
        ppo,
        selected_rewards: Vec::new(),
    };
    Ok(EpisodeOutcome {
        trajectory,
        generated,
        report,
        balanced,
    })
}

/// Indices of the `l` highest rewards, best first, earlier index on ties.
pub fn select_top_l(rewards: &[f64], l: usize) -> Result<Vec<usize>> {
    if l > rewards.len() {
        return Err(Error::InvalidArgument(format!("top {l} of {} samples", rewards.len())));
    }
    let mut idx: Vec<usize> = (0..rewards.len()).collect();
    idx.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
    idx.truncate(l);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EpisodeBudget,
    Converged,
}

#[derive(Debug, Clone)]
pub struct LoopArtifacts {
    pub generator: GeneratorModel,
    /// Retrained on the final balanced set.
    pub detector: DetectorModel,
    pub agent: AgentBundle,
    pub train: Dataset,
    pub balanced: BalancedDataset,
    pub generated_episodes: Vec<usize>,
    pub reports: Vec<EpisodeReport>,
    pub stop: StopReason,
}

/// Tracks the best average reward and the episodes since it last improved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    best: Option<f64>,
    stale: usize,
}

impl Convergence {
    pub fn new() -> Self {
        Self { best: None, stale: 0 }
    }

    /// Records one episode; true once `patience` consecutive episodes fail to
    /// beat the best by more than `omega`.
    pub fn observe(&mut self, reward: f64, omega: f64, patience: usize) -> bool {
        match self.best {
            Some(best) if !(reward > best + omega) => self.stale += 1,
            _ => {
                self.best = Some(reward);
                self.stale = 0;
            }
        }
        self.stale >= patience
    }
}

impl Default for Convergence {
    fn default() -> Self {
        Self::new()
    }
}

fn append_log(path: &PathBuf, report: &EpisodeReport) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(report).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn run_training(cfg: &LoopConfig, data: &Dataset) -> Result<LoopArtifacts> {
    if data.n_anomalous() == 0 {
        return Err(Error::EmptyClass("anomalous"));
    }
    if data.n_normal() == 0 {
        return Err(Error::EmptyClass("normal"));
    }
    let mut state = LoopState::new(cfg, data.clone())?;
    run_training_from(&mut state, cfg)
}

/// Continues the loop from an existing state.
pub fn run_training_from(state: &mut LoopState, cfg: &LoopConfig) -> Result<LoopArtifacts> {
    let mut reports = Vec::new();
    let mut convergence = Convergence::new();
    let mut stop = StopReason::EpisodeBudget;
    for e in 0..cfg.episodes {
        let outcome = run_episode(state, e, cfg)?;
        let rewards: Vec<f64> = outcome.generated.iter().map(|g| g.reward).collect();
        let top = select_top_l(&rewards, cfg.top_l())?;
        let room = state.train.n_normal().saturating_sub(state.train.n_anomalous());
        if room < top.len() {
            log::warn!(
                "episode {e}: anomalies would outnumber normals, adding {room} of {} samples",
                top.len()
            );
        }
        let chosen: Vec<Sample> = top
            .iter()
            .take(room)
            .map(|&i| Sample::new(outcome.generated[i].features.clone(), Label::Anomalous))
            .collect();
        state.generated_episodes.extend(std::iter::repeat_n(e, chosen.len()));
        state.train = state.train.append_generated(chosen.clone())?;
        let mut report = outcome.report;
        report.added = chosen.len();
        report.selected_rewards = top.iter().take(room).map(|&i| rewards[i]).collect();
        if let Some(path) = &cfg.log_path {
            append_log(path, &report)?;
        }
        log::info!(
            "episode {e}: reward {:.4} infeasible {}/{} added {}",
            report.average_reward,
            report.infeasible_count,
            report.steps,
            report.added
        );
        let avg = report.average_reward;
        reports.push(report);
        if convergence.observe(avg, cfg.omega, cfg.patience) {
            stop = StopReason::Converged;
            break;
        }
    }
    let seed = rng::derive_tag(cfg.seed, "final");
    let balanced = trim_balance(&state.train, rng::derive_tag(seed, "balance"))?;
    state.detector.train(
        balanced.dataset(),
        &TrainConfig {
            epochs: cfg.epochs_detector,
            lr: cfg.lr_detector,
            batch_size: cfg.batch_size,
            seed: rng::derive_tag(seed, "detector"),
        },
    )?;
    Ok(LoopArtifacts {
        generator: state.generator.clone(),
        detector: state.detector.clone(),
        agent: state.agent.clone(),
        train: state.train.clone(),
        balanced,
        generated_episodes: state.generated_episodes.clone(),
        reports,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_l_orders_and_breaks_ties_early() {
        assert_eq!(select_top_l(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_l(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 2, 1]);
        let mut r = vec![0.0; 9];
        r[4] = 5.0;
        r[7] = 5.0;
        assert_eq!(select_top_l(&r, 1).unwrap(), vec![4]);
        assert!(select_top_l(&r, 10).is_err());
    }

    #[test]
    fn infinite_threshold_stops_after_patience_plus_one() {
        let mut c = Convergence::new();
        let mut episodes = 0;
        for r in [1.0, 5.0, 9.0, 20.0, 30.0, 40.0, 50.0] {
            episodes += 1;
            if c.observe(r, f64::INFINITY, 3) {
                break;
            }
        }
        assert_eq!(episodes, 4);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut c = Convergence::new();
        assert!(!c.observe(1.0, 0.1, 2));
        assert!(!c.observe(1.05, 0.1, 2));
        assert!(!c.observe(1.2, 0.1, 2));
        assert!(!c.observe(1.2, 0.1, 2));
        assert!(c.observe(1.25, 0.1, 2));
    }

    #[test]
    fn config_bounds() {
        let mut cfg = LoopConfig::new(2);
        assert_eq!(cfg.top_l(), 50);
        cfg.steps = 5;
        assert_eq!(cfg.top_l(), 1);
        cfg.top_l = Some(6);
        assert!(cfg.validate().is_err());
        cfg.top_l = None;
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
    }
}
