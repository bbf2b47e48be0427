//! Conditional VAE: label-conditioned encoder to a diagonal-Gaussian latent and
//! a spectrally capped decoder back to feature space.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, Sample};
use crate::diffcore::{value_and_grad, Activation, Bound, Graph, Mlp, NetworkSpec, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{self, TrainConfig, TrainMetrics};

pub const DEFAULT_KL_WEIGHT: f64 = 0.55;
pub const DEFAULT_LR: f64 = 0.003;
pub const DEFAULT_EPOCHS: usize = 500;
pub const LOGVAR_BOUND: f64 = 20.0;

const ENCODER: &str = "enc.";
const DECODER: &str = "dec.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    pub spectral_cap: f64,
}

impl GeneratorConfig {
    /// Latent size `min(8, P)`, two hidden layers of 32.
    pub fn for_features(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            latent_dim: feature_dim.min(8),
            hidden: vec![32, 32],
            kl_weight: DEFAULT_KL_WEIGHT,
            spectral_cap: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument("feature and latent sizes must be positive".into()));
        }
        if !(self.kl_weight > 0.0 && self.kl_weight < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "kl_weight {} outside (0, 1)",
                self.kl_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParameterStore,
    encoder: Mlp,
    decoder: Mlp,
}

/// Label as a one-hot pair `[normal, anomalous]`.
pub fn label_one_hot(label: Label) -> [f64; 2] {
    match label {
        Label::Normal => [1.0, 0.0],
        Label::Anomalous => [0.0, 1.0],
    }
}

/// Closed-form `KL(N(μ, e^{logvar}) ‖ N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Weighted ELBO terms for one reconstruction.
pub fn elbo_terms(x: &[f64], x_hat: &[f64], mu: &[f64], logvar: &[f64], kl_weight: f64) -> LossBreakdown {
    let reconstruction =
        x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let kl = kl_divergence(mu, logvar);
    LossBreakdown {
        reconstruction,
        kl,
        total: (1.0 - kl_weight) * reconstruction + kl_weight * kl,
    }
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.feature_dim, config.latent_dim);
        let mut enc_sizes = vec![p + 2];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(2 * d);
        let mut dec_sizes = vec![d + 2];
        dec_sizes.extend(&config.hidden);
        dec_sizes.push(p);
        let enc_spec = NetworkSpec::mlp(&enc_sizes, Activation::Relu, Activation::Identity);
        let dec_spec = NetworkSpec::mlp(&dec_sizes, Activation::Relu, Activation::Identity)
            .with_spectral_cap(config.spectral_cap);
        enc_spec.validate()?;
        dec_spec.validate()?;
        let encoder = Mlp::new(enc_spec, ENCODER);
        let decoder = Mlp::new(dec_spec, DECODER);
        let mut params = ParameterStore::new();
        let mut r = rng::seeded(seed);
        encoder.init(&mut params, &mut r);
        decoder.init(&mut params, &mut r);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model around previously saved parameters.
    pub fn from_params(config: GeneratorConfig, params: ParameterStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (name, t) in model.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("generator parameter `{name}` missing or misshapen"))),
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// `(μ, logvar)` for `x` conditioned on `y`; logvar clamped to ±20.
    pub fn encode_moments(&self, x: &[f64], y: Label) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(x.len(), self.feature_dim(), "features")?;
        let mut input = x.to_vec();
        input.extend(label_one_hot(y));
        let out = self.encoder.forward(&self.params, &input)?;
        let d = self.latent_dim();
        let mu = out[..d].to_vec();
        let logvar = out[d..].iter().map(|v| v.clamp(-LOGVAR_BOUND, LOGVAR_BOUND)).collect();
        Ok((mu, logvar))
    }

    pub fn encode(&self, x: &[f64], y: Label, seed: u64) -> Result<LatentCode> {
        let mut r = rng::seeded(seed);
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| StandardNormal.sample(&mut r)).collect();
        self.encode_with_noise(x, y, &eps)
    }

    /// Reparameterized code `z = μ + exp(logvar/2) ⊙ ε` for a given `ε`.
    pub fn encode_with_noise(&self, x: &[f64], y: Label, eps: &[f64]) -> Result<LatentCode> {
        self.check_len(eps.len(), self.latent_dim(), "noise")?;
        let (mu, logvar) = self.encode_moments(x, y)?;
        let z = mu
            .iter()
            .zip(&logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(LatentCode { mu, logvar, z })
    }

    pub fn decode(&self, z: &[f64], y: Label) -> Result<Vec<f64>> {
        self.check_len(z.len(), self.latent_dim(), "latent")?;
        let mut input = z.to_vec();
        input.extend(label_one_hot(y));
        self.decoder.forward(&self.params, &input)
    }

    /// Decodes every row of `z` (`n × d`) under label `y`.
    pub fn decode_batch(&self, z: &Tensor, y: Label) -> Result<Tensor> {
        self.check_len(z.cols(), self.latent_dim(), "latent")?;
        let oh = label_one_hot(y);
        let input = Tensor::from_fn(z.rows(), z.cols() + 2, |i, j| {
            if j < z.cols() {
                z.get(i, j)
            } else {
                oh[j - z.cols()]
            }
        });
        self.decoder.forward_batch(&self.params, &input)
    }

    /// Decoder graph from a latent node (`n × d`) under label `y`.
    pub fn decode_graph(&self, g: &mut Graph, bound: &Bound, z: Var, y: Label) -> Var {
        let n = g.value(z).rows();
        let oh = label_one_hot(y);
        let lab = g.leaf(Tensor::from_fn(n, 2, |_, j| oh[j]));
        let input = g.concat_cols(&[z, lab]);
        self.decoder.graph(g, bound, input)
    }

    fn check_len(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::Shape(format!("{what} length {got}, expected {want}")));
        }
        Ok(())
    }

    /// Builds the weighted ELBO graph for the given rows and noise.
    fn loss_graph(&self, g: &mut Graph, bound: &Bound, xs: &Tensor, ys: &Tensor, eps: &Tensor) -> (Var, Var, Var) {
        let d = self.latent_dim();
        let p = self.config.kl_weight;
        let n = xs.rows() as f64;
        let x = g.leaf(xs.clone());
        let y = g.leaf(ys.clone());
        let e = g.leaf(eps.clone());
        let enc_in = g.concat_cols(&[x, y]);
        let out = self.encoder.graph(g, bound, enc_in);
        let mu = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let logvar = g.clamp(raw, -LOGVAR_BOUND, LOGVAR_BOUND);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        let dec_in = g.concat_cols(&[z, y]);
        let x_hat = self.decoder.graph(g, bound, dec_in);
        let diff = g.sub(x_hat, x);
        let sq = g.square(diff);
        let recon = g.mean(sq);
        let mu2 = g.square(mu);
        let var = g.exp(logvar);
        let a = g.add(mu2, var);
        let b = g.sub(a, logvar);
        let b = g.add_scalar(b, -1.0);
        let kl_sum = g.sum(b);
        let kl = g.scale(kl_sum, 0.5 / n);
        let wr = g.scale(recon, 1.0 - p);
        let wk = g.scale(kl, p);
        let total = g.add(wr, wk);
        (recon, kl, total)
    }

    fn batch_tensors(samples: &[&Sample]) -> (Tensor, Tensor) {
        let xs = Tensor::from_rows(&samples.iter().map(|s| s.features.as_slice()).collect::<Vec<_>>());
        let ys = Tensor::from_rows(&samples.iter().map(|s| label_one_hot(s.label)).collect::<Vec<_>>());
        (xs, ys)
    }

    fn noise(&self, n: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(n, self.latent_dim(), |_, _| StandardNormal.sample(&mut r))
    }

    /// Batch-mean loss terms with reparameterization noise drawn from `seed`.
    pub fn elbo_loss(&self, batch: &[Sample], seed: u64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("ELBO of an empty batch".into()));
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (xs, ys) = Self::batch_tensors(&refs);
        let eps = self.noise(batch.len(), seed);
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let (r, k, t) = self.loss_graph(&mut g, &bound, &xs, &ys, &eps);
        Ok(LossBreakdown {
            reconstruction: g.value(r).item(),
            kl: g.value(k).item(),
            total: g.value(t).item(),
        })
    }

    /// Gradients of the total loss for explicit noise, for gradient checks.
    pub fn loss_and_grad(&self, batch: &[Sample], eps: &Tensor) -> Result<(f64, crate::diffcore::Gradients)> {
        let refs: Vec<&Sample> = batch.iter().collect();
        let (xs, ys) = Self::batch_tensors(&refs);
        value_and_grad(&self.params, |g, b| self.loss_graph(g, b, &xs, &ys, eps).2)
    }

    /// Minibatch Adam on the weighted ELBO, projecting the decoder after every step.
    pub fn train(&mut self, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainMetrics> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("generator training set is empty".into()));
        }
        if ds.feature_dim() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "generator is {}-d, dataset is {}-d",
                self.feature_dim(),
                ds.feature_dim()
            )));
        }
        let this = self.clone();
        let mut noise_rng = rng::seeded(rng::derive_tag(cfg.seed, "cvae-noise"));
        let d = self.latent_dim();
        let decoder = self.decoder.clone();
        train::fit(
            &mut self.params,
            ds.len(),
            cfg,
            |params, idx| {
                let refs: Vec<&Sample> = idx.iter().map(|&i| ds.sample(i)).collect();
                let (xs, ys) = Self::batch_tensors(&refs);
                let eps = Tensor::from_fn(idx.len(), d, |_, _| StandardNormal.sample(&mut noise_rng));
                value_and_grad(params, |g, b| this.loss_graph(g, b, &xs, &ys, &eps).2)
            },
            |params| decoder.project(params),
        )
    }

    /// Decodes `n` prior draws `z ~ N(0, I)` under the anomalous label.
    pub fn sample_anomalies(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let z = self.noise(n, seed);
        let out = self.decode_batch(&z, Label::Anomalous)?;
        Ok((0..n).map(|i| out.row_slice(i).to_vec()).collect())
    }
}
