//! Flat `key = value` run configuration covering every module.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::density::Bandwidth;
use crate::detector::SsmDetectorSpec;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::mome::MomeConfig;
use crate::selfloop::LoopConfig;

/// A value that can live on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool);

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((s != "none").then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|v| usize::parse_value(v.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Bandwidth {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "silverman" {
            Ok(Bandwidth::Silverman)
        } else {
            f64::parse_value(s).map(Bandwidth::Fixed)
        }
    }
    fn render(&self) -> String {
        match self {
            Bandwidth::Fixed(h) => h.to_string(),
            Bandwidth::Silverman => "silverman".into(),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])+ $key:ident: $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $($(#[doc = $doc])+ pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Every key with its one-line description.
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[$((stringify!($key), concat!($($doc),+)),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render()),)*]
            }
        }
    };
}

run_config! {
    /// Master seed; every random stream derives from it.
    seed: u64 = 0;
    /// Directory for run outputs, or `none`.
    out_dir: Option<PathBuf> = None;
    /// Train share when a dataset is split.
    train_fraction: f64 = 0.6;
    /// Fit a per-feature z-score transform on the training split.
    standardize: bool = true;
    /// Scores above this are predicted anomalous.
    threshold: f64 = 0.2;
    /// Maximum augmentation episodes.
    episodes: usize = 200;
    /// Agent steps per episode.
    rl_steps: usize = 500;
    /// Generated samples kept per episode; `auto` is a tenth of rl_steps.
    top_l: Option<usize> = None;
    /// Minimum average-reward gain that counts as improvement.
    omega: f64 = 1e-3;
    /// Episodes without improvement before stopping.
    patience: usize = 20;
    /// Discount on the entropy term per episode.
    gamma: f64 = 0.95;
    /// Generator learning rate.
    lr_cvae: f64 = 0.003;
    /// Detector learning rate.
    lr_detector: f64 = 0.001;
    /// Policy and value learning rate.
    lr_policy: f64 = 0.0001;
    /// Generator epochs per episode.
    epochs_generator: usize = 500;
    /// Detector epochs per episode.
    epochs_detector: usize = 600;
    /// Minibatch for generator, detector and mixture training.
    batch_size: usize = 256;
    /// Policy update minibatch.
    minibatch: usize = 256;
    /// KL weight of the generator loss, in (0, 1).
    kl_weight: f64 = 0.55;
    /// Latent size; `auto` is min(8, features).
    latent_dim: Option<usize> = None;
    /// Generator hidden widths.
    generator_hidden: Vec<usize> = vec![32, 32];
    /// Per-layer spectral norm cap of the decoder.
    spectral_cap: f64 = 1.0;
    /// Policy and value hidden widths.
    policy_hidden: Vec<usize> = vec![64, 64];
    /// Floor on the policy standard deviation.
    sigma_min: f64 = 1e-3;
    /// Initial policy standard deviation.
    sigma_init: f64 = 0.5;
    /// Ratio clip of the policy update.
    ppo_clip: f64 = 0.2;
    /// Passes over each trajectory per update.
    ppo_epochs: usize = 4;
    /// Value loss weight.
    value_coef: f64 = 0.5;
    /// Gradient steps of the feasible action search.
    eta_feasible: usize = 10;
    /// Step size of the feasible action search.
    alpha_feasible: f64 = 0.01;
    /// Feasible box margin as a share of each range.
    rho_margin: f64 = 0.1;
    /// KDE bandwidth, a number or `silverman`.
    bandwidth: Bandwidth = Bandwidth::Fixed(0.5);
    /// Monte Carlo draws for entropy estimates.
    kde_samples: usize = 300;
    /// Single detector embedding width.
    detector_embed_dim: usize = 32;
    /// Single detector state size.
    detector_state_dim: usize = 4;
    /// Single detector block count.
    detector_depth: usize = 2;
    /// Expert embedding width.
    expert_embed_dim: usize = 8;
    /// Expert state size.
    expert_state_dim: usize = 4;
    /// Expert block count.
    expert_depth: usize = 2;
    /// Number of experts.
    n_experts: usize = 20;
    /// Experts evaluated per prediction.
    top_k: usize = 2;
    /// Size penalty of the expert-to-cluster assignment.
    alpha_assign: f64 = 1.0;
    /// Base logit of the expert-to-cluster assignment.
    c0_assign: f64 = 1.0;
    /// Largest cluster count tried by the elbow rule.
    k_range_max: usize = 10;
    /// Fixed cluster count; `auto` uses the elbow rule.
    n_clusters: Option<usize> = None;
    /// Train experts on parallel threads.
    parallel_experts: bool = true;
    /// Expert epochs.
    epochs_expert: usize = 600;
    /// Expert learning rate.
    lr_expert: f64 = 0.001;
    /// Gate epochs.
    epochs_gate: usize = 200;
    /// Gate learning rate.
    lr_gate: f64 = 0.01;
    /// Sine toy normal count.
    toy_normal: usize = 1000;
    /// Sine toy anomaly count.
    toy_anomalous: usize = 100;
    /// Sine toy noise level.
    toy_noise: f64 = 0.1;
    /// Radius of the cluster ring.
    cluster_spacing: f64 = 6.0;
    /// Per-cluster standard deviation.
    cluster_sigma: f64 = 1.0;
    /// Samples per cluster in each of train and test.
    cluster_samples: usize = 100;
    /// Seeds of the cluster experiment.
    cluster_seeds: usize = 5;
}

impl RunConfig {
    /// Defaults with the overrides of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let overrides: &[(&str, &str)] = match name {
            "custom" => &[],
            "sine_toy" => &[
                ("episodes", "60"),
                ("patience", "60"),
                ("rl_steps", "100"),
                ("epochs_generator", "100"),
                ("epochs_detector", "100"),
                ("batch_size", "64"),
                ("epochs_expert", "200"),
                ("epochs_gate", "100"),
            ],
            "theorem_clusters" => &[
                ("epochs_detector", "300"),
                ("epochs_expert", "300"),
                ("batch_size", "64"),
            ],
            _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key with its value and description, defaults included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((key, value), (_, doc)) in self.entries().into_iter().zip(Self::KEYS) {
            let _ = writeln!(out, "# {}\n{key} = {value}", doc.trim());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn generator_config(&self, feature_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            feature_dim,
            latent_dim: self.latent_dim.unwrap_or(feature_dim.min(8)),
            hidden: self.generator_hidden.clone(),
            kl_weight: self.kl_weight,
            spectral_cap: self.spectral_cap,
        }
    }

    pub fn detector_spec(&self, feature_dim: usize) -> SsmDetectorSpec {
        SsmDetectorSpec {
            feature_dim,
            embed_dim: self.detector_embed_dim,
            state_dim: self.detector_state_dim,
            depth: self.detector_depth,
        }
    }

    pub fn expert_spec(&self, feature_dim: usize) -> SsmDetectorSpec {
        SsmDetectorSpec {
            feature_dim,
            embed_dim: self.expert_embed_dim,
            state_dim: self.expert_state_dim,
            depth: self.expert_depth,
        }
    }

    pub fn agent_config(&self, latent_dim: usize) -> AgentConfig {
        AgentConfig {
            latent_dim,
            hidden: self.policy_hidden.clone(),
            sigma_min: self.sigma_min,
            sigma_init: self.sigma_init,
            gamma: self.gamma,
            lr_policy: self.lr_policy,
            clip: self.ppo_clip,
            ppo_epochs: self.ppo_epochs,
            value_coef: self.value_coef,
            minibatch: self.minibatch,
            eta_feasible: self.eta_feasible,
            alpha_feasible: self.alpha_feasible,
            rho_margin: self.rho_margin,
        }
    }

    pub fn loop_config(&self, feature_dim: usize) -> LoopConfig {
        let generator = self.generator_config(feature_dim);
        LoopConfig {
            episodes: self.episodes,
            steps: self.rl_steps,
            top_l: self.top_l,
            omega: self.omega,
            patience: self.patience,
            epochs_generator: self.epochs_generator,
            epochs_detector: self.epochs_detector,
            lr_generator: self.lr_cvae,
            lr_detector: self.lr_detector,
            batch_size: self.batch_size,
            kde_bandwidth: self.bandwidth,
            kde_samples: self.kde_samples,
            agent: self.agent_config(generator.latent_dim),
            generator,
            detector: self.detector_spec(feature_dim),
            seed: self.seed,
            log_path: None,
        }
    }

    pub fn mome_config(&self, feature_dim: usize) -> MomeConfig {
        MomeConfig {
            n_experts: self.n_experts,
            top_k: self.top_k,
            alpha_assign: self.alpha_assign,
            c0_assign: self.c0_assign,
            k_range_max: self.k_range_max,
            n_clusters: self.n_clusters,
            parallel_experts: self.parallel_experts,
            expert: self.expert_spec(feature_dim),
            expert_epochs: self.epochs_expert,
            expert_lr: self.lr_expert,
            gate_epochs: self.epochs_gate,
            gate_lr: self.lr_gate,
            batch_size: self.batch_size,
        }
    }

    /// Checks the settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.episodes == 0 || self.batch_size == 0 || self.minibatch == 0 {
            return Err(Error::Config("episodes and batch sizes must be positive".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
            }
        }
        if self.kde_samples == 0 {
            return Err(Error::Config("kde_samples must be positive".into()));
        }
        let probe = self.loop_config(2.max(self.latent_dim.unwrap_or(2)));
        probe.validate()?;
        self.mome_config(2).validate()
    }
}
