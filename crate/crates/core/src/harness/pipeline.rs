use std::path::PathBuf;

use crate::dataset::{Dataset, Standardizer};
use crate::error::Result;
use crate::mome::{train_mome, MomeModel, MomeTrainReport};
use crate::rng;
use crate::selfloop::{run_training, LoopArtifacts};

use super::bundle::ModelBundle;
use super::config::RunConfig;
use super::metrics::{evaluate, EvalReport, ModelVariant};

/// Everything produced by one augmentation-then-mixture run.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub config: RunConfig,
    pub standardizer: Standardizer,
    pub artifacts: LoopArtifacts,
    pub mome: MomeModel,
    pub mome_report: MomeTrainReport,
}

/// Standardizes `train`, runs the augmentation loop, then fits the mixture on
/// the final balanced set.
pub fn train_pipeline(train: &Dataset, cfg: &RunConfig, log_path: Option<PathBuf>) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let standardizer = if cfg.standardize {
        Standardizer::fit(train)?
    } else {
        Standardizer::identity(train.feature_dim())
    };
    let model_train = standardizer.transform(train)?;
    let mut loop_cfg = cfg.loop_config(train.feature_dim());
    loop_cfg.log_path = log_path;
    loop_cfg.validate()?;
    let artifacts = run_training(&loop_cfg, &model_train)?;
    let (mome, mome_report) = train_mome(
        artifacts.balanced.dataset(),
        &cfg.mome_config(train.feature_dim()),
        rng::derive_tag(cfg.seed, "mome"),
    )?;
    Ok(TrainedPipeline {
        config: cfg.clone(),
        standardizer,
        artifacts,
        mome,
        mome_report,
    })
}

impl TrainedPipeline {
    /// Single-detector and mixture reports on raw-space `test`.
    pub fn evaluate(&self, name: &str, test: &Dataset) -> Result<Vec<EvalReport>> {
        let test = self.standardizer.transform(test)?;
        Ok(vec![
            evaluate(&self.artifacts.detector, ModelVariant::Single, name, &test, self.config.threshold)?,
            evaluate(&self.mome, ModelVariant::Mome, name, &test, self.config.threshold)?,
        ])
    }

    /// The augmented training set mapped back to raw feature space.
    pub fn augmented_raw(&self) -> Result<Dataset> {
        let st = &self.standardizer;
        let samples = self
            .artifacts
            .train
            .samples()
            .iter()
            .map(|s| crate::dataset::Sample::new(st.invert(&s.features), s.label))
            .collect();
        Dataset::with_provenance(
            self.artifacts.train.feature_dim(),
            samples,
            self.artifacts.train.provenance().to_vec(),
        )
    }

    pub fn bundle(&self) -> ModelBundle {
        ModelBundle {
            config: self.config.clone(),
            standardizer: self.standardizer.clone(),
            detector: self.artifacts.detector.clone(),
            mome: self.mome.clone(),
            generator: self.artifacts.generator.clone(),
            agent: self.artifacts.agent.clone(),
        }
    }
}
