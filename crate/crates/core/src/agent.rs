//! Latent-space agent: Gaussian policy and value networks, the entropy plus
//! evasion reward, the feasibility test, gradient search for feasible actions,
//! imitation from searched actions, and clipped-surrogate policy updates.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::density::{entropy_mc, entropy_mc_last_grad, KdeModel};
use crate::detector::DetectorModel;
use crate::diffcore::{
    adam_step, scalar, value_and_grad, Activation, Bound, Gradients, Graph, Mlp, NetworkSpec, OptimizerState, ParameterStore,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::rng;
use crate::train::minibatches;

pub const DEFAULT_GAMMA: f64 = 0.95;
pub const DEFAULT_LR_POLICY: f64 = 0.0001;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;

const POLICY: &str = "pi.";
const VALUE: &str = "v.";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub sigma_min: f64,
    /// Initial policy spread, set through the σ-head bias.
    pub sigma_init: f64,
    pub gamma: f64,
    pub lr_policy: f64,
    pub clip: f64,
    pub ppo_epochs: usize,
    pub value_coef: f64,
    pub minibatch: usize,
    /// Gradient-search iteration count `η`.
    pub eta_feasible: usize,
    /// Gradient-search step size `α`.
    pub alpha_feasible: f64,
    /// Feasible-box inflation as a fraction of each range.
    pub rho_margin: f64,
}

impl AgentConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            hidden: vec![64, 64],
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_init: 0.5,
            gamma: DEFAULT_GAMMA,
            lr_policy: DEFAULT_LR_POLICY,
            clip: 0.2,
            ppo_epochs: 4,
            value_coef: 0.5,
            minibatch: 256,
            eta_feasible: 10,
            alpha_feasible: 1e-2,
            rho_margin: 0.1,
        }
    }
}

/// Latent of a sampled anomaly plus a fixed-size dataset summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub z: Vec<f64>,
    /// Current entropy estimate of the anomalous training features.
    pub entropy: f64,
    /// Episode index divided by the episode budget.
    pub progress: f64,
}

impl AgentState {
    pub fn input(&self) -> Vec<f64> {
        let mut v = self.z.clone();
        v.push(self.entropy);
        v.push(self.progress);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub entropy_term: f64,
    pub evasion_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: AgentState,
    pub action: Action,
    pub reward: RewardBreakdown,
    pub value: f64,
    pub feasible: bool,
    pub sample: Vec<f64>,
}

/// Log-density of `delta` under `N(μ, diag(σ²))`.
pub fn gaussian_log_prob(delta: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    delta
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((d, m), s)| {
            let e = (d - m) / s;
            -0.5 * e * e - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Axis-aligned boxes in latent and feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRegion {
    pub latent_lo: Vec<f64>,
    pub latent_hi: Vec<f64>,
    pub data_lo: Vec<f64>,
    pub data_hi: Vec<f64>,
}

fn inflated_box(points: &[Vec<f64>], rho: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("feasible box of no points".into()))?;
    let mut lo = first.clone();
    let mut hi = first.clone();
    for p in points {
        for j in 0..lo.len() {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    for j in 0..lo.len() {
        let pad = rho * (hi[j] - lo[j]);
        lo[j] -= pad;
        hi[j] += pad;
    }
    Ok((lo, hi))
}

fn inside(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
}

impl FeasibleRegion {
    /// Latent box over `latents`, data box over `features`, each padded by `rho` of its range.
    pub fn from_points(latents: &[Vec<f64>], features: &[Vec<f64>], rho: f64) -> Result<Self> {
        let (latent_lo, latent_hi) = inflated_box(latents, rho)?;
        let (data_lo, data_hi) = inflated_box(features, rho)?;
        Ok(Self {
            latent_lo,
            latent_hi,
            data_lo,
            data_hi,
        })
    }

    pub fn contains_latent(&self, z: &[f64]) -> bool {
        inside(z, &self.latent_lo, &self.latent_hi)
    }

    pub fn contains_data(&self, x: &[f64]) -> bool {
        inside(x, &self.data_lo, &self.data_hi)
    }
}

/// Inside the latent box and decoding (as an anomaly) inside the data box.
pub fn is_feasible(z_hat: &[f64], region: &FeasibleRegion, generator: &GeneratorModel) -> Result<bool> {
    if !region.contains_latent(z_hat) {
        return Ok(false);
    }
    let x = generator.decode(z_hat, Label::Anomalous)?;
    Ok(region.contains_data(&x))
}

/// Everything the reward needs besides the candidate sample.
#[derive(Debug, Clone)]
pub struct RewardContext<'a> {
    /// KDE over the anomalous training features.
    pub anomalous_kde: &'a KdeModel,
    pub detector: &'a DetectorModel,
    pub episode: usize,
    pub gamma: f64,
    pub kde_samples: usize,
    /// Fixed within an episode.
    pub entropy_seed: u64,
}

impl RewardContext<'_> {
    pub fn discount(&self) -> f64 {
        self.gamma.powi(self.episode as i32)
    }
}

/// `γ^e · H(anomalous ∪ {x̂}) − log W(x̂)`.
pub fn compute_reward(x_hat: &[f64], ctx: &RewardContext<'_>) -> Result<RewardBreakdown> {
    let kde = ctx.anomalous_kde.with_point(x_hat);
    let entropy_term = ctx.discount() * entropy_mc(&kde, ctx.kde_samples, ctx.entropy_seed);
    let evasion_term = -ctx.detector.score(x_hat)?.ln();
    Ok(RewardBreakdown {
        entropy_term,
        evasion_term,
        total: entropy_term + evasion_term,
    })
}

/// The reward at `dec(z, +1)` and its exact latent gradient, the entropy
/// estimate differentiated with its draws held fixed.
pub fn reward_latent_grad(generator: &GeneratorModel, z: &[f64], ctx: &RewardContext<'_>) -> Result<(f64, Vec<f64>)> {
    let x = generator.decode(z, Label::Anomalous)?;
    let (h, gh) = entropy_mc_last_grad(&ctx.anomalous_kde.with_point(&x), ctx.kde_samples, ctx.entropy_seed);
    let w = ctx.discount();
    let mut g = Graph::new();
    let gen_bound = g.bind(&generator.params);
    let det_bound = g.bind(&ctx.detector.params);
    let zv = g.leaf(Tensor::row(z.to_vec()));
    let xv = generator.decode_graph(&mut g, &gen_bound, zv, Label::Anomalous);
    let logit = ctx.detector.logit_graph(&mut g, &det_bound, xv);
    let ls = g.log_sigmoid(logit);
    let ghv = g.leaf(Tensor::row(gh.iter().map(|v| w * v).collect()));
    let lin = g.mul(ghv, xv);
    let ent = g.sum(lin);
    let total = g.sub(ent, ls);
    let reward = w * h - g.value(ls).item();
    let adj = g.backward(total);
    Ok((reward, adj.wrt(zv).into_vec()))
}

/// Objective for [`feasible_action_search`].
pub trait SearchObjective {
    /// Loss minimized by the search and its latent gradient.
    fn loss_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Reward used to accept or reject the searched point.
    fn reward(&self, z: &[f64]) -> Result<f64>;
    fn is_feasible(&self, z: &[f64]) -> Result<bool>;
}

/// The detector/decoder objective `log W(dec(z)) + γ^e log p̂_latent(z)`.
pub struct LatentObjective<'a> {
    pub generator: &'a GeneratorModel,
    pub region: &'a FeasibleRegion,
    pub latent_kde: &'a KdeModel,
    pub reward_ctx: &'a RewardContext<'a>,
}

impl LatentObjective<'_> {
    /// `∇_z log W(dec(z, +1))` through decoder and detector.
    pub fn log_score_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let gen_bound = g.bind(&self.generator.params);
        let det_bound = g.bind(&self.reward_ctx.detector.params);
        let zv = g.leaf(Tensor::row(z.to_vec()));
        let x = self.generator.decode_graph(&mut g, &gen_bound, zv, Label::Anomalous);
        let logit = self.reward_ctx.detector.logit_graph(&mut g, &det_bound, x);
        let ls = g.log_sigmoid(logit);
        let value = g.value(ls).item();
        let adj = g.backward(ls);
        (value, adj.wrt(zv).into_vec())
    }
}

impl SearchObjective for LatentObjective<'_> {
    fn loss_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ls, g_det) = self.log_score_grad(z);
        let (lp, g_kde) = self.latent_kde.log_pdf_grad(z);
        let w = self.reward_ctx.discount();
        let grad = g_det.iter().zip(&g_kde).map(|(a, b)| a + w * b).collect();
        Ok((ls + w * lp, grad))
    }

    fn reward(&self, z: &[f64]) -> Result<f64> {
        let x = self.generator.decode(z, Label::Anomalous)?;
        Ok(compute_reward(&x, self.reward_ctx)?.total)
    }

    fn is_feasible(&self, z: &[f64]) -> Result<bool> {
        is_feasible(z, self.region, self.generator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Last feasible iterate.
    pub z: Vec<f64>,
    pub steps_taken: usize,
    pub reward_before: f64,
    pub reward_after: f64,
    /// False when the searched point does not improve the reward.
    pub improved: bool,
}

/// Up to `steps` iterations of `z ← z − α ∇L(z)`, stopping before the first
/// infeasible iterate.
pub fn feasible_action_search(
    z: &[f64],
    objective: &impl SearchObjective,
    steps: usize,
    alpha: f64,
) -> Result<SearchOutcome> {
    let reward_before = objective.reward(z)?;
    let mut current = z.to_vec();
    let mut steps_taken = 0;
    for _ in 0..steps {
        let (_, grad) = objective.loss_and_grad(&current)?;
        let next: Vec<f64> = current.iter().zip(&grad).map(|(c, g)| c - alpha * g).collect();
        if !next.iter().all(|v| v.is_finite()) || !objective.is_feasible(&next)? {
            break;
        }
        current = next;
        steps_taken += 1;
    }
    let reward_after = if steps_taken == 0 {
        reward_before
    } else {
        objective.reward(&current)?
    };
    Ok(SearchOutcome {
        z: current,
        steps_taken,
        reward_before,
        reward_after,
        improved: reward_after >= reward_before,
    })
}

/// Policy and value networks with their own optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub config: AgentConfig,
    pub policy: ParameterStore,
    pub value: ParameterStore,
    policy_net: Mlp,
    value_net: Mlp,
    policy_opt: OptimizerState,
    value_opt: OptimizerState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoMetrics {
    /// Clipped surrogate of the first minibatch, before any update.
    pub initial_surrogate: f64,
    pub final_surrogate: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub mean_advantage: f64,
}

impl AgentBundle {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        let d = config.latent_dim;
        if d == 0 || !(config.sigma_min > 0.0) || !(config.sigma_init > config.sigma_min) {
            return Err(Error::InvalidArgument(format!("invalid agent config {config:?}")));
        }
        let mut p_sizes = vec![d + 2];
        p_sizes.extend(&config.hidden);
        p_sizes.push(2 * d);
        let mut v_sizes = vec![d + 2];
        v_sizes.extend(&config.hidden);
        v_sizes.push(1);
        let policy_net = Mlp::new(NetworkSpec::mlp(&p_sizes, Activation::Tanh, Activation::Identity), POLICY);
        let value_net = Mlp::new(NetworkSpec::mlp(&v_sizes, Activation::Tanh, Activation::Identity), VALUE);
        policy_net.spec.validate()?;
        value_net.spec.validate()?;
        let mut r = rng::seeded(seed);
        let mut policy = ParameterStore::new();
        let mut value = ParameterStore::new();
        policy_net.init(&mut policy, &mut r);
        value_net.init(&mut value, &mut r);
        let last = policy_net.spec.num_layers() - 1;
        let w = policy.expect(&policy_net.weight_name(last)).scale(0.01);
        policy.insert(policy_net.weight_name(last), w);
        let sb = (config.sigma_init - config.sigma_min).exp_m1().ln();
        let bias = Tensor::from_fn(1, 2 * d, |_, j| if j < d { 0.0 } else { sb });
        policy.insert(policy_net.bias_name(last), bias);
        Ok(Self {
            policy_opt: OptimizerState::new(config.lr_policy),
            value_opt: OptimizerState::new(config.lr_policy),
            config,
            policy,
            value,
            policy_net,
            value_net,
        })
    }

    pub fn from_params(config: AgentConfig, policy: ParameterStore, value: ParameterStore) -> Result<Self> {
        let mut b = Self::new(config, 0)?;
        for (store, saved, what) in [(&b.policy, &policy, "policy"), (&b.value, &value, "value")] {
            for (name, t) in store.iter() {
                match saved.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    _ => return Err(Error::Checkpoint(format!("{what} parameter `{name}` missing or misshapen"))),
                }
            }
        }
        b.policy = policy;
        b.value = value;
        Ok(b)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `(μ, σ)` at `state`.
    pub fn distribution(&self, state: &AgentState) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.policy_net.forward(&self.policy, &state.input())?;
        let d = self.latent_dim();
        let mu = out[..d].to_vec();
        let sigma = out[d..].iter().map(|v| scalar::softplus(*v) + self.config.sigma_min).collect();
        Ok((mu, sigma))
    }

    pub fn value_estimate(&self, state: &AgentState) -> Result<f64> {
        Ok(self.value_net.forward(&self.value, &state.input())?[0])
    }

    pub fn log_prob(&self, state: &AgentState, delta: &[f64]) -> Result<f64> {
        let (mu, sigma) = self.distribution(state)?;
        Ok(gaussian_log_prob(delta, &mu, &sigma))
    }

    /// Samples `δ = μ + σ ⊙ ε` with `ε` drawn from `seed`.
    pub fn act(&self, state: &AgentState, seed: u64) -> Result<Action> {
        let mut r = rng::seeded(seed);
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| StandardNormal.sample(&mut r)).collect();
        self.act_with_noise(state, &eps)
    }

    pub fn act_with_noise(&self, state: &AgentState, eps: &[f64]) -> Result<Action> {
        if state.z.len() != self.latent_dim() || eps.len() != self.latent_dim() {
            return Err(Error::Shape("state or noise does not match the latent size".into()));
        }
        if !state.input().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite agent state".into()));
        }
        let (mu, sigma) = self.distribution(state)?;
        let delta: Vec<f64> = mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();
        let log_prob = gaussian_log_prob(&delta, &mu, &sigma);
        Ok(Action {
            mu,
            sigma,
            delta,
            log_prob,
        })
    }

    /// Per-row log-probabilities of `deltas` (`B × d`) under the policy at `inputs`.
    fn log_prob_graph(&self, g: &mut Graph, bound: &Bound, inputs: &Tensor, deltas: &Tensor) -> Var {
        let d = self.latent_dim();
        let x = g.leaf(inputs.clone());
        let out = self.policy_net.graph(g, bound, x);
        let mu = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, self.config.sigma_min);
        let log_sigma = g.ln(sigma, f64::MIN_POSITIVE);
        let neg = g.neg(log_sigma);
        let inv = g.exp(neg);
        let dv = g.leaf(deltas.clone());
        let diff = g.sub(dv, mu);
        let e = g.mul(diff, inv);
        let e2 = g.square(e);
        let half = g.scale(e2, -0.5);
        let terms = g.sub(half, log_sigma);
        let terms = g.add_scalar(terms, -0.5 * LN_2PI);
        g.sum_cols(terms)
    }

    /// Mean `−log π(δ | s)` over rows and its gradient in `policy`, which must
    /// share this bundle's layout.
    pub fn policy_nll_and_grad(
        &self,
        policy: &ParameterStore,
        states: &[AgentState],
        deltas: &[Vec<f64>],
    ) -> Result<(f64, Gradients)> {
        let inputs = Tensor::from_rows(&states.iter().map(AgentState::input).collect::<Vec<_>>());
        let deltas = Tensor::from_rows(deltas);
        value_and_grad(policy, |g, bound| {
            let lp = self.log_prob_graph(g, bound, &inputs, &deltas);
            let m = g.mean(lp);
            g.neg(m)
        })
    }

    /// Mean squared value error against `returns` and its gradient in `value`.
    pub fn value_loss_and_grad(
        &self,
        value: &ParameterStore,
        states: &[AgentState],
        returns: &[f64],
    ) -> Result<(f64, Gradients)> {
        let inputs = Tensor::from_rows(&states.iter().map(AgentState::input).collect::<Vec<_>>());
        let targets = Tensor::from_vec(returns.len(), 1, returns.to_vec());
        value_and_grad(value, |g, bound| {
            let x = g.leaf(inputs);
            let v = self.value_net.graph(g, bound, x);
            let t = g.leaf(targets);
            let err = g.sub(v, t);
            let sq = g.square(err);
            g.mean(sq)
        })
    }

    /// One Adam step on `−log π(δ̂ | state)`; returns the loss before the step.
    pub fn imitation_update(&mut self, state: &AgentState, delta_hat: &[f64]) -> Result<f64> {
        if delta_hat.len() != self.latent_dim() {
            return Err(Error::Shape("imitation target does not match the latent size".into()));
        }
        let inputs = Tensor::row(state.input());
        let deltas = Tensor::row(delta_hat.to_vec());
        let mut g = Graph::new();
        let bound = g.bind(&self.policy);
        let lp = self.log_prob_graph(&mut g, &bound, &inputs, &deltas);
        let loss = g.neg(lp);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let grads = g.backward(loss).collect(&self.policy, &bound);
        adam_step(&mut self.policy, &grads, &mut self.policy_opt)?;
        Ok(value)
    }

    /// Clipped-surrogate update on one-step episodes with `A = R − V(s)`.
    ///
    /// The old log-probabilities and baselines are those of the current
    /// networks, so the first minibatch sees ratio 1.
    pub fn ppo_update(&mut self, trajectory: &[TransitionRecord], seed: u64) -> Result<PpoMetrics> {
        if trajectory.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        let n = trajectory.len();
        let inputs: Vec<Vec<f64>> = trajectory.iter().map(|t| t.state.input()).collect();
        let deltas: Vec<Vec<f64>> = trajectory.iter().map(|t| t.action.delta.clone()).collect();
        let returns: Vec<f64> = trajectory.iter().map(|t| t.reward.total).collect();
        let mut old_lp = Vec::with_capacity(n);
        let mut adv = Vec::with_capacity(n);
        for (i, t) in trajectory.iter().enumerate() {
            old_lp.push(self.log_prob(&t.state, &deltas[i])?);
            adv.push(returns[i] - self.value_estimate(&t.state)?);
        }
        let clip = self.config.clip;
        let mut metrics = PpoMetrics {
            mean_advantage: adv.iter().sum::<f64>() / n as f64,
            ..PpoMetrics::default()
        };
        let mut r = rng::seeded(seed);
        let mut first = true;
        let mut clipped = 0usize;
        let mut seen = 0usize;
        for _ in 0..self.config.ppo_epochs {
            for idx in minibatches(n, self.config.minibatch, &mut r) {
                let b = idx.len();
                let x = Tensor::from_rows(&idx.iter().map(|&i| inputs[i].as_slice()).collect::<Vec<_>>());
                let dl = Tensor::from_rows(&idx.iter().map(|&i| deltas[i].as_slice()).collect::<Vec<_>>());
                let olp = Tensor::from_vec(b, 1, idx.iter().map(|&i| old_lp[i]).collect());
                let av = Tensor::from_vec(b, 1, idx.iter().map(|&i| adv[i]).collect());
                let ret = Tensor::from_vec(b, 1, idx.iter().map(|&i| returns[i]).collect());

                let mut g = Graph::new();
                let pb = g.bind(&self.policy);
                let vb = g.bind(&self.value);
                let lp = self.log_prob_graph(&mut g, &pb, &x, &dl);
                let olp_v = g.leaf(olp);
                let diff = g.sub(lp, olp_v);
                let ratio = g.exp(diff);
                let a = g.leaf(av.clone());
                let unclipped = g.mul(ratio, a);
                let rc = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
                let clipped_term = g.mul(rc, a);
                let surr = surrogate_min(&mut g, unclipped, clipped_term);
                let surr_mean = g.mean(surr);
                let xv = g.leaf(x.clone());
                let v = self.value_net.graph(&mut g, &vb, xv);
                let rv = g.leaf(ret);
                let verr = g.sub(v, rv);
                let vsq = g.square(verr);
                let vloss = g.mean(vsq);
                let neg_surr = g.neg(surr_mean);
                let vterm = g.scale(vloss, self.config.value_coef);
                let loss = g.add(neg_surr, vterm);
                let loss_value = g.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss(loss_value));
                }
                let sv = g.value(surr_mean).item();
                if first {
                    metrics.initial_surrogate = sv;
                    first = false;
                }
                metrics.final_surrogate = sv;
                metrics.value_loss = g.value(vloss).item();
                clipped += g
                    .value(ratio)
                    .data()
                    .iter()
                    .filter(|q| (**q - 1.0).abs() > clip)
                    .count();
                seen += b;
                let adj = g.backward(loss);
                let pg = adj.collect(&self.policy, &pb);
                let vg = adj.collect(&self.value, &vb);
                adam_step(&mut self.policy, &pg, &mut self.policy_opt)?;
                adam_step(&mut self.value, &vg, &mut self.value_opt)?;
            }
        }
        metrics.clip_fraction = clipped as f64 / seen.max(1) as f64;
        Ok(metrics)
    }
}

/// Elementwise `min(a, b)` as `b − relu(b − a)`.
fn surrogate_min(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(b, a);
    let r = g.relu(d);
    g.sub(b, r)
}

/// Clipped-surrogate contribution of one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Closed-form Gaussian NLL for comparison with the policy graph.
pub fn gaussian_nll(delta: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    -gaussian_log_prob(delta, mu, sigma)
}

/// Used by tests as an independent density: `Π_j φ((δ_j − μ_j)/σ_j)/σ_j`.
pub fn gaussian_density(delta: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    delta
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((d, m), s)| (-(d - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()))
        .product()
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::density::{fit_kde, Bandwidth};
    use crate::detector::SsmDetectorSpec;
    use crate::generator::GeneratorConfig;

    fn state(d: usize, seed: u64) -> AgentState {
        let mut r = rng::seeded(seed);
        AgentState {
            z: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            entropy: 2.3,
            progress: 0.25,
        }
    }

    #[test]
    fn zero_noise_gives_mean_and_sigma_floor_holds() {
        let mut cfg = AgentConfig::new(3);
        cfg.sigma_init = 0.0011;
        let a = AgentBundle::new(cfg, 1).unwrap();
        let s = state(3, 2);
        let act = a.act_with_noise(&s, &[0.0; 3]).unwrap();
        assert_eq!(act.delta, act.mu);
        for seed in 0..50 {
            let act = a.act(&state(3, seed), seed).unwrap();
            assert!(act.sigma.iter().all(|&v| v >= 1e-3));
        }
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let a = AgentBundle::new(AgentConfig::new(2), 3).unwrap();
        for seed in 0..20 {
            let s = state(2, seed);
            let act = a.act(&s, seed + 100).unwrap();
            let oracle = gaussian_density(&act.delta, &act.mu, &act.sigma).ln();
            assert!((act.log_prob - oracle).abs() <= 1e-10);
        }
    }

    #[test]
    fn graph_log_prob_matches_plain() {
        let a = AgentBundle::new(AgentConfig::new(2), 4).unwrap();
        let s = state(2, 1);
        let delta = [0.3, -0.2];
        let mut g = Graph::new();
        let b = g.bind(&a.policy);
        let lp = a.log_prob_graph(&mut g, &b, &Tensor::row(s.input()), &Tensor::row(delta.to_vec()));
        assert!((g.value(lp).item() - a.log_prob(&s, &delta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn surrogate_clipping_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 1.2 * 2.0);
        assert_eq!(clipped_surrogate(1.0, -3.0, 0.2), -3.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    fn sine_models() -> (GeneratorModel, DetectorModel) {
        let g = GeneratorModel::new(GeneratorConfig::for_features(2), 1).unwrap();
        let mut d = DetectorModel::new(SsmDetectorSpec::expert(2), 2).unwrap();
        d.params.insert("head.w", Tensor::filled(8, 1, 0.2));
        (g, d)
    }

    #[test]
    fn reward_decomposes_exactly() {
        let (_, det) = sine_models();
        let kde = fit_kde(&[vec![0.0, 1.0], vec![1.0, -1.0]], Bandwidth::Fixed(0.5)).unwrap();
        let ctx = RewardContext {
            anomalous_kde: &kde,
            detector: &det,
            episode: 3,
            gamma: 0.95,
            kde_samples: 300,
            entropy_seed: 9,
        };
        let r = compute_reward(&[0.2, 0.4], &ctx).unwrap();
        assert_eq!(r.total, r.entropy_term + r.evasion_term);
        assert!((r.evasion_term + det.score(&[0.2, 0.4]).unwrap().ln()).abs() < 1e-15);
        let later = RewardContext { episode: 10, ..ctx.clone() };
        assert!(compute_reward(&[0.2, 0.4], &later).unwrap().entropy_term < r.entropy_term);
        let far = RewardContext { episode: 100, ..ctx };
        assert!((far.discount() - 0.95f64.powi(100)).abs() < 1e-18);
        assert!((far.discount() - 5.92e-3).abs() < 1e-5);
    }

    #[test]
    fn confident_detector_leaves_only_entropy() {
        let (_, mut det) = sine_models();
        det.params.insert("head.w", Tensor::zeros(8, 1));
        det.params.insert("head.b", Tensor::scalar(60.0));
        let kde = fit_kde(&[vec![0.0, 0.0]], Bandwidth::Fixed(0.5)).unwrap();
        let ctx = RewardContext {
            anomalous_kde: &kde,
            detector: &det,
            episode: 0,
            gamma: 0.95,
            kde_samples: 50,
            entropy_seed: 1,
        };
        let r = compute_reward(&[1.0, 1.0], &ctx).unwrap();
        assert!(r.evasion_term.abs() < 1e-20);
        assert!((r.total - r.entropy_term).abs() < 1e-20);
    }

    #[test]
    fn feasibility_boxes() {
        let (gen, _) = sine_models();
        let latents = vec![vec![-1.0, 0.0], vec![1.0, 2.0]];
        let feats: Vec<Vec<f64>> = latents
            .iter()
            .map(|z| gen.decode(z, Label::Anomalous).unwrap())
            .collect();
        let region = FeasibleRegion::from_points(&latents, &feats, 0.1).unwrap();
        assert!(is_feasible(&latents[0], &region, &gen).unwrap());
        assert!(!is_feasible(&[1.0 + 10.0 * 2.0, 1.0], &region, &gen).unwrap());
    }

    struct Quadratic;

    impl SearchObjective for Quadratic {
        fn loss_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((z.iter().map(|v| v * v).sum(), z.iter().map(|v| 2.0 * v).collect()))
        }
        fn reward(&self, z: &[f64]) -> Result<f64> {
            Ok(-z.iter().map(|v| v * v).sum::<f64>())
        }
        fn is_feasible(&self, z: &[f64]) -> Result<bool> {
            Ok(z.iter().all(|v| v.abs() <= 5.0))
        }
    }

    #[test]
    fn search_takes_gradient_steps() {
        let out = feasible_action_search(&[1.0, 0.0], &Quadratic, 1, 0.1).unwrap();
        assert!((out.z[0] - 0.8).abs() < 1e-15 && out.z[1] == 0.0);
        assert!(out.improved);
        let still = feasible_action_search(&[0.0, 0.0], &Quadratic, 5, 0.1).unwrap();
        assert_eq!(still.z, vec![0.0, 0.0]);
        assert_eq!(still.reward_after, still.reward_before);
        // A huge step leaves the box immediately: nothing moves.
        let stuck = feasible_action_search(&[1.0, 0.0], &Quadratic, 3, 10.0).unwrap();
        assert_eq!((stuck.steps_taken, stuck.z.clone()), (0, vec![1.0, 0.0]));
    }

    #[test]
    fn decode_score_gradient_matches_finite_differences() {
        let (gen, det) = sine_models();
        let kde = fit_kde(&[vec![0.0, 0.0]], Bandwidth::Fixed(0.5)).unwrap();
        let region = FeasibleRegion::from_points(&[vec![-9.0, -9.0], vec![9.0, 9.0]], &[vec![-9.0, -9.0], vec![9.0, 9.0]], 0.1).unwrap();
        let ctx = RewardContext {
            anomalous_kde: &kde,
            detector: &det,
            episode: 0,
            gamma: 0.95,
            kde_samples: 10,
            entropy_seed: 0,
        };
        let obj = LatentObjective {
            generator: &gen,
            region: &region,
            latent_kde: &kde,
            reward_ctx: &ctx,
        };
        let z = [0.3, -0.6];
        let (_, g) = obj.log_score_grad(&z);
        let f = |z: &[f64]| det.score(&gen.decode(z, Label::Anomalous).unwrap()).unwrap().ln();
        for j in 0..2 {
            let mut a = z;
            let mut b = z;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-4));
        }
    }

    #[test]
    fn exact_reward_gradient_matches_finite_differences() {
        let (gen, det) = sine_models();
        let kde = fit_kde(&[vec![0.0, 1.0], vec![1.0, -1.0], vec![-0.5, 0.2]], Bandwidth::Fixed(0.5)).unwrap();
        let ctx = RewardContext {
            anomalous_kde: &kde,
            detector: &det,
            episode: 2,
            gamma: 0.95,
            kde_samples: 100,
            entropy_seed: 3,
        };
        let z = [0.4, -0.2];
        let (r, g) = reward_latent_grad(&gen, &z, &ctx).unwrap();
        let f = |z: &[f64]| compute_reward(&gen.decode(z, Label::Anomalous).unwrap(), &ctx).unwrap().total;
        assert!((r - f(&z)).abs() < 1e-12);
        for j in 0..2 {
            let mut a = z;
            let mut b = z;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn imitation_closes_the_gap() {
        let mut cfg = AgentConfig::new(2);
        cfg.lr_policy = 1e-3;
        let mut a = AgentBundle::new(cfg, 5).unwrap();
        let s = state(2, 3);
        let target = [0.7, -0.4];
        let (mu, sigma) = a.distribution(&s).unwrap();
        let loss = a.imitation_update(&s, &target).unwrap();
        assert!((loss - gaussian_nll(&target, &mu, &sigma)).abs() <= 1e-10);
        let dist = |a: &AgentBundle| {
            let (mu, _) = a.distribution(&s).unwrap();
            mu.iter().zip(&target).map(|(m, t)| (m - t).powi(2)).sum::<f64>().sqrt()
        };
        let mut checkpoints = vec![dist(&a)];
        for step in 1..=500 {
            a.imitation_update(&s, &target).unwrap();
            if step % 50 == 0 {
                checkpoints.push(dist(&a));
            }
        }
        for w in checkpoints.windows(2) {
            assert!(w[1] <= w[0] + 1e-2, "{checkpoints:?}");
        }
        let prev = *checkpoints.last().unwrap();
        assert!(prev < 0.05);
    }

    #[test]
    fn zero_learning_rate_imitation_is_inert() {
        let mut cfg = AgentConfig::new(2);
        cfg.lr_policy = 0.0;
        let mut a = AgentBundle::new(cfg, 5).unwrap();
        let before = a.policy.clone();
        a.imitation_update(&state(2, 1), &[0.1, 0.1]).unwrap();
        assert!(a.policy.iter().zip(before.iter()).all(|(x, y)| x == y));
    }
}
