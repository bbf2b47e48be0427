//! On-disk model bundle: a JSON manifest plus one checkpoint per parameter store.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentBundle, AgentConfig};
use crate::dataset::Standardizer;
use crate::detector::{DetectorModel, SsmDetectorSpec};
use crate::diffcore::checkpoint;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::mome::{ClusterModel, ExpertAssignment, MomeModel};

use super::config::RunConfig;
use super::metrics::ModelVariant;

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    feature_dim: usize,
    standardizer: Standardizer,
    detector: SsmDetectorSpec,
    generator: GeneratorConfig,
    agent: AgentConfig,
    top_k: usize,
    experts: Vec<SsmDetectorSpec>,
    clusters: Option<ClusterModel>,
    assignment: Option<ExpertAssignment>,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub standardizer: Standardizer,
    pub detector: DetectorModel,
    pub mome: MomeModel,
    pub generator: GeneratorModel,
    pub agent: AgentBundle,
}

fn expert_file(m: usize) -> String {
    format!("expert_{m:03}.swhy")
}

impl ModelBundle {
    pub fn feature_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            version: BUNDLE_VERSION,
            feature_dim: self.feature_dim(),
            standardizer: self.standardizer.clone(),
            detector: self.detector.spec,
            generator: self.generator.config.clone(),
            agent: self.agent.config.clone(),
            top_k: self.mome.top_k,
            experts: self.mome.experts.iter().map(|e| e.spec).collect(),
            clusters: self.mome.clusters.clone(),
            assignment: self.mome.assignment.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
        self.config.save(dir.join(CONFIG_FILE))?;
        checkpoint::save(&self.detector.params, dir.join("detector.swhy"))?;
        checkpoint::save(&self.mome.gate, dir.join("gate.swhy"))?;
        for (m, e) in self.mome.experts.iter().enumerate() {
            checkpoint::save(&e.params, dir.join(expert_file(m)))?;
        }
        checkpoint::save(&self.generator.params, dir.join("generator.swhy"))?;
        checkpoint::save(&self.agent.policy, dir.join("policy.swhy"))?;
        checkpoint::save(&self.agent.value, dir.join("value.swhy"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.version != BUNDLE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported bundle version {}", m.version)));
        }
        if m.standardizer.dim() != m.feature_dim {
            return Err(Error::Checkpoint("standardizer size disagrees with manifest".into()));
        }
        let detector = DetectorModel::from_params(m.detector, checkpoint::load(dir.join("detector.swhy"))?)?;
        let experts = m
            .experts
            .iter()
            .enumerate()
            .map(|(i, spec)| DetectorModel::from_params(*spec, checkpoint::load(dir.join(expert_file(i)))?))
            .collect::<Result<Vec<_>>>()?;
        let mome = MomeModel::from_parts(m.top_k, experts, checkpoint::load(dir.join("gate.swhy"))?, m.clusters, m.assignment)?;
        let generator = GeneratorModel::from_params(m.generator, checkpoint::load(dir.join("generator.swhy"))?)?;
        let agent = AgentBundle::from_params(
            m.agent,
            checkpoint::load(dir.join("policy.swhy"))?,
            checkpoint::load(dir.join("value.swhy"))?,
        )?;
        Ok(Self {
            config: m.config,
            standardizer: m.standardizer,
            detector,
            mome,
            generator,
            agent,
        })
    }

    /// Scores raw-space rows with one variant.
    pub fn score(&self, variant: ModelVariant, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.feature_dim()) {
            return Err(Error::Shape(format!("row has {} features, model expects {}", r.len(), self.feature_dim())));
        }
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| self.standardizer.apply(r)).collect();
        match variant {
            ModelVariant::Single => self.detector.score_batch(&xs),
            ModelVariant::Mome => self.mome.predict_batch(&xs),
        }
    }

    /// `(component, parameter count)` rows.
    pub fn parameter_table(&self) -> Vec<(String, usize)> {
        let mut rows = vec![
            ("generator".to_string(), self.generator.params.num_scalars()),
            ("policy".to_string(), self.agent.policy.num_scalars()),
            ("value".to_string(), self.agent.value.num_scalars()),
            ("single detector".to_string(), self.detector.num_parameters()),
            ("gate".to_string(), self.mome.gate.num_scalars()),
        ];
        for (m, e) in self.mome.experts.iter().enumerate() {
            rows.push((format!("expert {m}"), e.num_parameters()));
        }
        rows.push(("mixture total".to_string(), self.mome.num_parameters()));
        let active = self.mome.gate.num_scalars()
            + self.mome.experts.iter().map(DetectorModel::num_parameters).max().unwrap_or(0) * self.mome.top_k;
        rows.push(("mixture active per prediction".to_string(), active));
        rows
    }
}
