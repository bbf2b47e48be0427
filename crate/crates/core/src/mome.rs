//! Sparse mixture of small detectors.
//!
//! Training runs in two phases. Experts are first assigned to k-means clusters
//! of the feature space and trained only on their cluster. The frozen experts
//! are then combined by a noisy top-k linear gate
//!
//! ```text
//! h(x) = x·G + ε ⊙ softplus(x·N),   λ = softmax(topk(h, k)),   F(x) = Σ_m λ_m f_m(x)
//! ```
//!
//! trained with binary cross-entropy on `F`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::detector::{self, DetectorModel, SsmDetectorSpec};
use crate::diffcore::{adam_step, scalar, value_and_grad, Gradients, Graph, OptimizerState, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{minibatches, TrainConfig};

pub const KMEANS_MAX_ITER: usize = 300;
const ELBOW_RESTARTS: u64 = 3;
const GATE_W: &str = "gate.w";
const GATE_NOISE: &str = "gate.noise";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    /// Cluster id of each fitted point.
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from `k` distinct seeded data points.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || k > data.len() {
        return Err(Error::InvalidArgument(format!("k = {k} for {} points", data.len())));
    }
    let dim = data[0].len();
    let mut r = rng::seeded(seed);
    let starts = rand::seq::index::sample(&mut r, data.len(), k);
    let mut centroids: Vec<Vec<f64>> = starts.iter().map(|i| data[i].clone()).collect();
    let mut assignment = vec![usize::MAX; data.len()];
    let mut sse_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut dists = vec![0.0; data.len()];
        for (i, x) in data.iter().enumerate() {
            let (j, d) = nearest(&centroids, x);
            dists[i] = d;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &j) in data.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..data.len())
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("k <= n leaves a cluster with two points");
                counts[assignment[far]] -= 1;
                for (s, v) in sums[assignment[far]].iter_mut().zip(&data[far]) {
                    *s -= v;
                }
                assignment[far] = j;
                dists[far] = 0.0;
                counts[j] = 1;
                sums[j] = data[far].clone();
                changed = true;
            }
        }
        for j in 0..k {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
        let sse = data
            .iter()
            .zip(&assignment)
            .map(|(x, &j)| sq_dist(x, &centroids[j]))
            .sum();
        sse_history.push(sse);
        if !changed {
            break;
        }
    }
    let mut sizes = vec![0; k];
    for &j in &assignment {
        sizes[j] += 1;
    }
    Ok(ClusterModel {
        centroids,
        sizes,
        assignment,
        sse_history,
    })
}

/// Elbow of an SSE curve indexed from `k = 1`.
pub fn elbow_from_sse(sse: &[f64]) -> usize {
    match sse.len() {
        0 | 1 => 1,
        _ if sse[0] <= 1.05 * sse[1] => 1,
        2 => 2,
        n => {
            let mut best = (2, f64::NEG_INFINITY);
            for k in 2..n {
                let curv = sse[k - 2] - 2.0 * sse[k - 1] + sse[k];
                if curv > best.1 {
                    best = (k, curv);
                }
            }
            best.0
        }
    }
}

/// Cluster count by maximum curvature of the SSE curve over `1..=k_max`,
/// best of three restarts per `k`. Returns the count and the curve.
pub fn elbow_select_k(data: &[Vec<f64>], k_max: usize, seed: u64) -> Result<(usize, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("elbow on empty data".into()));
    }
    let top = k_max.min(data.len()).max(1);
    let mut sse = Vec::with_capacity(top);
    for k in 1..=top {
        let mut best = f64::INFINITY;
        for rep in 0..ELBOW_RESTARTS {
            let m = kmeans(data, k, rng::derive(seed, k as u64 * ELBOW_RESTARTS + rep))?;
            best = best.min(m.sse());
        }
        sse.push(best);
    }
    Ok((elbow_from_sse(&sse), sse))
}

/// Cluster-choice distribution `softmax_u(c0 − α·n_u / s_u)`.
pub fn assignment_probs(counts: &[usize], sizes: &[f64], alpha: f64, c0: f64) -> Result<Vec<f64>> {
    if counts.len() != sizes.len() || sizes.is_empty() {
        return Err(Error::Shape("counts and sizes differ in length".into()));
    }
    if sizes.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("cluster sizes must be positive".into()));
    }
    let logits: Vec<f64> = counts
        .iter()
        .zip(sizes)
        .map(|(&n, &s)| c0 - alpha / s * n as f64)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    /// Cluster of each expert.
    pub expert_cluster: Vec<usize>,
    /// Experts per cluster.
    pub counts: Vec<usize>,
    pub alpha: f64,
    pub c0: f64,
}

/// Index drawn from `probs` with one uniform variate.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Experts pick clusters one after another, each draw seeing the counts so far.
pub fn assign_experts(m: usize, sizes: &[usize], alpha: f64, c0: f64, seed: u64) -> Result<ExpertAssignment> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one expert".into()));
    }
    let s: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
    let mut counts = vec![0; sizes.len()];
    let mut expert_cluster = Vec::with_capacity(m);
    let mut r = rng::seeded(seed);
    for _ in 0..m {
        let p = assignment_probs(&counts, &s, alpha, c0)?;
        let u = categorical(&p, r.random::<f64>());
        counts[u] += 1;
        expert_cluster.push(u);
    }
    Ok(ExpertAssignment {
        expert_cluster,
        counts,
        alpha,
        c0,
    })
}

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum())
        .collect()
}

/// Gate scores `x·G`, plus `ε ⊙ softplus(x·N)` with `ε` drawn from `seed` when noise is on.
pub fn gate_scores(x: &[f64], g: &Tensor, noise: &Tensor, noise_active: bool, seed: u64) -> Result<Vec<f64>> {
    if g.rows() != x.len() || noise.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "gate {:?} / {:?} for a {}-feature input",
            g.shape(),
            noise.shape(),
            x.len()
        )));
    }
    let mut h = row_times(x, g);
    if noise_active {
        let spread = row_times(x, noise);
        let mut r = rng::seeded(seed);
        for (hv, s) in h.iter_mut().zip(spread) {
            let e: f64 = StandardNormal.sample(&mut r);
            *hv += e * scalar::softplus(s);
        }
    }
    Ok(h)
}

/// Indices of the `k` largest entries, largest first, lower index on ties.
pub fn topk_indices(h: &[f64], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    topk_into(h, k, &mut out);
    out
}

/// [`topk_indices`] into a reused buffer.
pub fn topk_into(h: &[f64], k: usize, out: &mut Vec<usize>) {
    out.clear();
    let k = k.min(h.len());
    for (i, v) in h.iter().enumerate() {
        let pos = out.iter().position(|&j| v.total_cmp(&h[j]).is_gt()).unwrap_or(out.len());
        if pos < k {
            if out.len() == k {
                out.pop();
            }
            out.insert(pos, i);
        }
    }
}

/// Softmax over the `k` largest entries; every other weight is exactly zero.
pub fn topk_softmax(h: &[f64], k: usize) -> Vec<f64> {
    let top = topk_indices(h, k);
    let max = h[top[0]];
    let mut out = vec![0.0; h.len()];
    let mut z = 0.0;
    for &i in &top {
        out[i] = (h[i] - max).exp();
        z += out[i];
    }
    for &i in &top {
        out[i] /= z;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub alpha_assign: f64,
    pub c0_assign: f64,
    pub k_range_max: usize,
    /// Fixed cluster count; `None` selects it by the elbow rule.
    pub n_clusters: Option<usize>,
    pub parallel_experts: bool,
    pub expert: SsmDetectorSpec,
    pub expert_epochs: usize,
    pub expert_lr: f64,
    pub gate_epochs: usize,
    pub gate_lr: f64,
    pub batch_size: usize,
}

impl MomeConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            n_experts: 20,
            top_k: 2,
            alpha_assign: 1.0,
            c0_assign: 1.0,
            k_range_max: 10,
            n_clusters: None,
            parallel_experts: true,
            expert: SsmDetectorSpec::expert(feature_dim),
            expert_epochs: detector::DEFAULT_EPOCHS,
            expert_lr: detector::DEFAULT_LR,
            gate_epochs: 200,
            gate_lr: 0.01,
            batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= n_experts, got {} and {}",
                self.top_k, self.n_experts
            )));
        }
        if self.k_range_max == 0 || self.n_clusters == Some(0) {
            return Err(Error::Config("cluster counts must be positive".into()));
        }
        self.expert.validate()
    }
}

/// Counts expert forward passes.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

impl Clone for EvalCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

impl PartialEq for EvalCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomeModel {
    pub top_k: usize,
    pub experts: Vec<DetectorModel>,
    /// `gate.w` and `gate.noise`, both `P × M`.
    pub gate: ParameterStore,
    pub clusters: Option<ClusterModel>,
    pub assignment: Option<ExpertAssignment>,
    pub evaluations: EvalCounter,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomeTrainReport {
    pub n_clusters: usize,
    pub sse_curve: Vec<f64>,
    pub expert_final_losses: Vec<Option<f64>>,
    pub gate_losses: Vec<f64>,
}

/// Both gate matrices start at zero, so early routing is driven by the noise alone.
fn init_gate(p: usize, m: usize) -> ParameterStore {
    let mut gate = ParameterStore::new();
    gate.insert(GATE_W, Tensor::zeros(p, m));
    gate.insert(GATE_NOISE, Tensor::zeros(p, m));
    gate
}

impl MomeModel {
    /// Reassembles a trained mixture, checking the gate against the experts.
    pub fn from_parts(
        top_k: usize,
        experts: Vec<DetectorModel>,
        gate: ParameterStore,
        clusters: Option<ClusterModel>,
        assignment: Option<ExpertAssignment>,
    ) -> Result<Self> {
        let m = experts.len();
        if m == 0 || top_k == 0 || top_k > m {
            return Err(Error::Checkpoint(format!("need 1 <= top_k <= experts, got {top_k} and {m}")));
        }
        let p = experts[0].spec.feature_dim;
        if experts.iter().any(|e| e.spec.feature_dim != p) {
            return Err(Error::Checkpoint("experts disagree on feature size".into()));
        }
        for name in [GATE_W, GATE_NOISE] {
            match gate.get(name) {
                Some(t) if t.shape() == (p, m) => {}
                _ => return Err(Error::Checkpoint(format!("gate parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(Self {
            top_k,
            experts,
            gate,
            clusters,
            assignment,
            evaluations: EvalCounter::default(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.gate.expect(GATE_W).rows()
    }

    pub fn num_parameters(&self) -> usize {
        self.gate.num_scalars() + self.experts.iter().map(DetectorModel::num_parameters).sum::<usize>()
    }

    pub fn gate_scores(&self, x: &[f64], noise_active: bool, seed: u64) -> Result<Vec<f64>> {
        gate_scores(x, self.gate.expect(GATE_W), self.gate.expect(GATE_NOISE), noise_active, seed)
    }

    /// Gate weights at inference (noise off).
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(topk_softmax(&self.gate_scores(x, false, 0)?, self.top_k))
    }

    /// Mixture score evaluating only the selected experts.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let h = self.gate_scores(x, false, 0)?;
        let lambda = topk_softmax(&h, self.top_k);
        let mut out = 0.0;
        for m in topk_indices(&h, self.top_k) {
            out += lambda[m] * self.experts[m].score(x)?;
            self.evaluations.add(1);
        }
        Ok(out)
    }

    /// Batched [`MomeModel::predict`]: rows are grouped by expert so each expert runs once.
    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let gw = self.gate.expect(GATE_W);
        if let Some(x) = xs.iter().find(|x| x.len() != gw.rows()) {
            return Err(Error::Shape(format!("gate expects {} features, got {}", gw.rows(), x.len())));
        }
        let m = self.n_experts();
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut weights: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut h = vec![0.0; m];
        let mut top = Vec::with_capacity(self.top_k);
        for (i, x) in xs.iter().enumerate() {
            h.iter_mut().for_each(|v| *v = 0.0);
            for (xv, row) in x.iter().zip(gw.data().chunks_exact(m)) {
                for (hv, w) in h.iter_mut().zip(row) {
                    *hv += xv * w;
                }
            }
            topk_into(&h, self.top_k, &mut top);
            let max = h[top[0]];
            let z: f64 = top.iter().map(|&j| (h[j] - max).exp()).sum();
            for &j in &top {
                routed[j].push(i);
                weights[j].push((h[j] - max).exp() / z);
            }
        }
        let mut out = vec![0.0; xs.len()];
        for (j, rows) in routed.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let scores = self.experts[j].score_selected(xs, rows)?;
            self.evaluations.add(rows.len() as u64);
            for ((&i, s), w) in rows.iter().zip(scores).zip(&weights[j]) {
                out[i] += w * s;
            }
        }
        Ok(out)
    }

    /// Share of rows whose largest gate weight belongs to each expert.
    pub fn primary_fractions(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.n_experts()];
        for x in xs {
            counts[topk_indices(&self.gate_scores(x, false, 0)?, 1)[0]] += 1;
        }
        Ok(counts.iter().map(|&c| c as f64 / xs.len().max(1) as f64).collect())
    }

    /// Mean gate weight of each expert over `xs`.
    pub fn load_fractions(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut load = vec![0.0; self.n_experts()];
        for x in xs {
            for (l, w) in load.iter_mut().zip(self.weights(x)?) {
                *l += w;
            }
        }
        Ok(load.iter().map(|l| l / xs.len().max(1) as f64).collect())
    }

    /// Share of rows for which each expert is among the selected ones.
    pub fn routing_fractions(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.n_experts()];
        for x in xs {
            for m in topk_indices(&self.gate_scores(x, false, 0)?, self.top_k) {
                counts[m] += 1;
            }
        }
        Ok(counts.iter().map(|&c| c as f64 / xs.len().max(1) as f64).collect())
    }
}

fn rows(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples().iter().map(|s| s.features.clone()).collect()
}

fn targets(data: &Dataset) -> Vec<f64> {
    data.samples().iter().map(|s| s.label.target()).collect()
}

/// Noisy gate scores for a batch as a graph node, plus the top-k mask.
fn gate_graph(g: &mut Graph, gw: Var, gn: Var, x: &Tensor, eps: &Tensor, k: usize) -> (Var, Vec<bool>) {
    let xv = g.leaf(x.clone());
    let clean = g.matmul(xv, gw);
    let raw = g.matmul(xv, gn);
    let spread = g.softplus(raw);
    let ev = g.leaf(eps.clone());
    let noise = g.mul(ev, spread);
    let h = g.add(clean, noise);
    let hv = g.value(h);
    let m = hv.cols();
    let mut mask = vec![false; hv.len()];
    for i in 0..hv.rows() {
        for j in topk_indices(hv.row_slice(i), k) {
            mask[i * m + j] = true;
        }
    }
    let lambda = g.masked_softmax(h, mask.clone());
    (lambda, mask)
}

/// `mean(−t ln F − (1 − t) ln(1 − F))` for a `B × 1` probability node.
fn bce_prob(g: &mut Graph, f: Var, t: &Tensor) -> Var {
    let tv = g.leaf(t.clone());
    let lf = g.ln(f, 1e-12);
    let nf = g.neg(f);
    let one_minus = g.add_scalar(nf, 1.0);
    let l1 = g.ln(one_minus, 1e-12);
    let a = g.mul(tv, lf);
    let nt = g.neg(tv);
    let one_minus_t = g.add_scalar(nt, 1.0);
    let b = g.mul(one_minus_t, l1);
    let s = g.add(a, b);
    let m = g.mean(s);
    g.neg(m)
}

fn noise_tensor(b: usize, m: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(b, m, |_, _| StandardNormal.sample(&mut r))
}

/// Cluster, assign, train experts on their clusters, then train the gate with
/// the experts frozen.
pub fn train_mome(data: &Dataset, cfg: &MomeConfig, seed: u64) -> Result<(MomeModel, MomeTrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("mixture training set is empty".into()));
    }
    if data.feature_dim() != cfg.expert.feature_dim {
        return Err(Error::Shape("expert spec does not match the data".into()));
    }
    let xs = rows(data);
    let (u, sse_curve) = match cfg.n_clusters {
        Some(u) => (u.min(xs.len()), Vec::new()),
        None => elbow_select_k(&xs, cfg.k_range_max, rng::derive_tag(seed, "elbow"))?,
    };
    let clusters = kmeans(&xs, u, rng::derive_tag(seed, "kmeans"))?;
    let assignment = assign_experts(
        cfg.n_experts,
        &clusters.sizes,
        cfg.alpha_assign,
        cfg.c0_assign,
        rng::derive_tag(seed, "assign"),
    )?;

    let train_one = |m: usize| -> Result<(DetectorModel, Option<f64>)> {
        let cluster = assignment.expert_cluster[m];
        let idx: Vec<usize> = (0..data.len()).filter(|&i| clusters.assignment[i] == cluster).collect();
        let expert_seed = rng::derive(rng::derive_tag(seed, "expert"), m as u64);
        let mut expert = DetectorModel::new(cfg.expert, expert_seed)?;
        let metrics = expert.train(
            &data.subset(&idx),
            &TrainConfig {
                epochs: cfg.expert_epochs,
                lr: cfg.expert_lr,
                batch_size: cfg.batch_size,
                seed: rng::derive(expert_seed, 1),
            },
        )?;
        Ok((expert, metrics.final_loss()))
    };
    let trained: Vec<(DetectorModel, Option<f64>)> = if cfg.parallel_experts {
        (0..cfg.n_experts).into_par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        (0..cfg.n_experts).map(train_one).collect::<Result<_>>()?
    };
    let (experts, expert_final_losses): (Vec<_>, Vec<_>) = trained.into_iter().unzip();

    let mut model = MomeModel {
        top_k: cfg.top_k,
        experts,
        gate: init_gate(data.feature_dim(), cfg.n_experts),
        clusters: Some(clusters.clone()),
        assignment: Some(assignment),
        evaluations: EvalCounter::default(),
    };
    let gate_losses = train_gate(&mut model, data, cfg, rng::derive_tag(seed, "gate-train"))?;
    Ok((
        model,
        MomeTrainReport {
            n_clusters: clusters.k(),
            sse_curve,
            expert_final_losses,
            gate_losses,
        },
    ))
}

/// Phase two: experts frozen, noisy gate trained on the mixture BCE.
/// Mixture BCE of frozen expert scores `expert_scores` (`B × M`) under the
/// noisy gate with noise draws `eps`, and its gradient in the gate parameters.
pub fn gate_loss_and_grad(
    gate: &ParameterStore,
    top_k: usize,
    x: &Tensor,
    targets: &Tensor,
    expert_scores: &Tensor,
    eps: &Tensor,
) -> Result<(f64, Gradients)> {
    value_and_grad(gate, |g, bound| {
        let (lambda, _) = gate_graph(g, bound.get(GATE_W), bound.get(GATE_NOISE), x, eps, top_k);
        let sv = g.leaf(expert_scores.clone());
        let ws = g.mul(lambda, sv);
        let f = g.sum_cols(ws);
        bce_prob(g, f, targets)
    })
}

fn train_gate(model: &mut MomeModel, data: &Dataset, cfg: &MomeConfig, seed: u64) -> Result<Vec<f64>> {
    let xs = rows(data);
    let ts = targets(data);
    let m = model.n_experts();
    let mut expert_scores = Tensor::zeros(xs.len(), m);
    for (j, e) in model.experts.iter().enumerate() {
        for (i, s) in e.score_batch(&xs)?.into_iter().enumerate() {
            expert_scores.set(i, j, s);
        }
    }
    let mut opt = OptimizerState::new(cfg.gate_lr);
    let mut r = rng::seeded(seed);
    let mut losses = Vec::with_capacity(cfg.gate_epochs);
    for epoch in 0..cfg.gate_epochs {
        let mut total = 0.0;
        for (b, idx) in minibatches(xs.len(), cfg.batch_size, &mut r).into_iter().enumerate() {
            let x = Tensor::from_rows(&idx.iter().map(|&i| xs[i].as_slice()).collect::<Vec<_>>());
            let t = Tensor::from_vec(idx.len(), 1, idx.iter().map(|&i| ts[i]).collect());
            let s = expert_scores.select_rows(&idx);
            let eps = noise_tensor(idx.len(), m, rng::derive(seed, (epoch as u64) << 32 | b as u64));
            let (value, grads) = match gate_loss_and_grad(&model.gate, model.top_k, &x, &t, &s, &eps) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss(loss)) => return Err(Error::Diverged { epoch, loss }),
                Err(e) => return Err(e),
            };
            total += value * idx.len() as f64;
            adam_step(&mut model.gate, &grads, &mut opt)?;
        }
        losses.push(total / xs.len() as f64);
    }
    model.gate.bump_version();
    Ok(losses)
}

/// Single-phase baseline: gate and experts trained jointly from the start, each
/// expert receiving gradient only from the rows routed to it.
pub fn train_gate_first(data: &Dataset, cfg: &MomeConfig, seed: u64) -> Result<MomeModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("mixture training set is empty".into()));
    }
    let xs = rows(data);
    let ts = targets(data);
    let m = cfg.n_experts;
    let mut experts = Vec::with_capacity(m);
    for j in 0..m {
        experts.push(DetectorModel::new(
            cfg.expert,
            rng::derive(rng::derive_tag(seed, "expert"), j as u64),
        )?);
    }
    let mut model = MomeModel {
        top_k: cfg.top_k,
        experts,
        gate: init_gate(data.feature_dim(), m),
        clusters: None,
        assignment: None,
        evaluations: EvalCounter::default(),
    };
    let mut gate_opt = OptimizerState::new(cfg.gate_lr);
    let mut expert_opts: Vec<OptimizerState> = (0..m).map(|_| OptimizerState::new(cfg.expert_lr)).collect();
    let mut r = rng::seeded(rng::derive_tag(seed, "joint"));
    for epoch in 0..cfg.expert_epochs {
        for (b, idx) in minibatches(xs.len(), cfg.batch_size, &mut r).into_iter().enumerate() {
            let n = idx.len();
            let x = Tensor::from_rows(&idx.iter().map(|&i| xs[i].as_slice()).collect::<Vec<_>>());
            let t = Tensor::from_vec(n, 1, idx.iter().map(|&i| ts[i]).collect());
            let eps = noise_tensor(n, m, rng::derive(seed, (epoch as u64) << 32 | b as u64));
            let mut g = Graph::new();
            let gate_bound = g.bind(&model.gate);
            let (lambda, mask) = gate_graph(&mut g, gate_bound.get(GATE_W), gate_bound.get(GATE_NOISE), &x, &eps, cfg.top_k);
            let xv = g.leaf(x);
            let mut bounds = Vec::with_capacity(m);
            let mut cols = Vec::with_capacity(m);
            for (j, expert) in model.experts.iter().enumerate() {
                let routed: Vec<usize> = (0..n).filter(|&i| mask[i * m + j]).collect();
                if routed.is_empty() {
                    bounds.push(None);
                    cols.push(g.leaf(Tensor::zeros(n, 1)));
                    continue;
                }
                let eb = g.bind(&expert.params);
                let sub = g.gather_rows(xv, routed.clone());
                let logit = expert.logit_graph(&mut g, &eb, sub);
                let score = g.sigmoid(logit);
                cols.push(g.place_rows(score, routed, n));
                bounds.push(Some(eb));
            }
            let s = g.concat_cols(&cols);
            let ws = g.mul(lambda, s);
            let f = g.sum_cols(ws);
            let loss = bce_prob(&mut g, f, &t);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let adj = g.backward(loss);
            let gg = adj.collect(&model.gate, &gate_bound);
            adam_step(&mut model.gate, &gg, &mut gate_opt)?;
            for (j, eb) in bounds.iter().enumerate() {
                if let Some(eb) = eb {
                    let eg = adj.collect(&model.experts[j].params, eb);
                    adam_step(&mut model.experts[j].params, &eg, &mut expert_opts[j])?;
                }
            }
        }
    }
    Ok(model)
}

/// Fraction of rows classified correctly at 0.5.
pub fn mixture_accuracy(model: &MomeModel, data: &Dataset) -> Result<f64> {
    let scores = model.predict_batch(&rows(data))?;
    let hits = scores
        .iter()
        .zip(data.samples())
        .filter(|(s, x)| (**s > 0.5) == (x.label == Label::Anomalous))
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    proptest::proptest! {
        #[test]
        fn topk_matches_stable_sort(h in proptest::collection::vec(-3i8..3, 1..24), k in 1usize..6) {
            let h: Vec<f64> = h.into_iter().map(f64::from).collect();
            let mut idx: Vec<usize> = (0..h.len()).collect();
            idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]));
            idx.truncate(k);
            proptest::prop_assert_eq!(topk_indices(&h, k), idx);
        }
    }

    #[test]
    fn topk_softmax_example_and_ties() {
        let l = topk_softmax(&[0.1, 0.5, 0.2], 2);
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 0.574_442_516_811_659_9).abs() < 1e-12);
        assert!((l[2] - 0.425_557_483_188_340_1).abs() < 1e-12);
        assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 1), vec![0]);
        let full = topk_softmax(&[0.3, -1.0, 2.0], 3);
        let z: f64 = [0.3f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        for (a, b) in full.iter().zip([0.3f64, -1.0, 2.0]) {
            assert!((a - b.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn assignment_probability_examples() {
        let p = assignment_probs(&[1, 0], &[100.0, 100.0], 1.0, 1.0).unwrap();
        assert!((p[0] - 0.497_500_020_833_3).abs() < 1e-9 && (p[1] - 0.502_499_979_166_7).abs() < 1e-9);
        let q = assignment_probs(&[1, 1], &[1000.0, 10.0], 1.0, 1.0).unwrap();
        assert!((q[0] - 1.0 / (1.0 + (-0.099f64).exp())).abs() < 1e-12);
        assert!((q[0] - 0.5247).abs() < 1e-4);
        let u = assignment_probs(&[0, 0, 0], &[5.0, 5.0, 5.0], 1.0, 1.0).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(assignment_probs(&[0], &[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn kmeans_basics() {
        let one = kmeans(&[vec![1.5, -2.0]], 1, 0).unwrap();
        assert_eq!(one.centroids, vec![vec![1.5, -2.0]]);
        let mut r = rng::seeded(3);
        let mut pts = Vec::new();
        for c in [0.0, 100.0] {
            for _ in 0..50 {
                let a: f64 = StandardNormal.sample(&mut r);
                let b: f64 = StandardNormal.sample(&mut r);
                pts.push(vec![c + a, b]);
            }
        }
        let m = kmeans(&pts, 2, 9).unwrap();
        let mut xs: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!(xs[0].abs() < 0.5 && (xs[1] - 100.0).abs() < 0.5);
        assert_eq!(m.sizes.iter().sum::<usize>(), 100);
        for w in m.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn elbow_arithmetic() {
        assert_eq!(elbow_from_sse(&[100.0, 20.0, 18.0, 17.0, 16.5]), 2);
        assert_eq!(elbow_from_sse(&[10.0, 9.8, 9.0, 8.0]), 1);
        assert_eq!(elbow_from_sse(&[5.0]), 1);
    }

    #[test]
    fn gate_noise_floor_and_determinism() {
        let g = Tensor::zeros(2, 3);
        let n = Tensor::zeros(2, 3);
        let x = [0.4, -0.3];
        assert_eq!(gate_scores(&x, &g, &n, false, 1).unwrap(), vec![0.0; 3]);
        let a = gate_scores(&x, &g, &n, true, 7).unwrap();
        assert_eq!(a, gate_scores(&x, &g, &n, true, 7).unwrap());
        let mut r = rng::seeded(7);
        for v in a {
            let e: f64 = StandardNormal.sample(&mut r);
            assert!((v - e * std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(gate_scores(&[1.0], &g, &n, false, 0).is_err());
    }

    fn toy_data() -> Dataset {
        let mut r = rng::seeded(1);
        let mut samples = Vec::new();
        for i in 0..80 {
            let a: f64 = r.random_range(-1.0..1.0);
            let b: f64 = r.random_range(-1.0..1.0);
            let label = if i % 2 == 0 { Label::Normal } else { Label::Anomalous };
            let off = if label == Label::Anomalous { 2.0 } else { 0.0 };
            samples.push(Sample::new(vec![a + off, b], label));
        }
        Dataset::from_samples(2, samples).unwrap()
    }

    #[test]
    fn single_expert_mixture_is_that_expert() {
        let data = toy_data();
        let mut cfg = MomeConfig::new(2);
        cfg.n_experts = 1;
        cfg.top_k = 1;
        cfg.n_clusters = Some(1);
        cfg.expert_epochs = 5;
        cfg.gate_epochs = 2;
        let (model, report) = train_mome(&data, &cfg, 3).unwrap();
        assert_eq!(report.n_clusters, 1);
        for s in data.samples().iter().take(10) {
            assert_eq!(model.predict(&s.features).unwrap(), model.experts[0].score(&s.features).unwrap());
        }
    }

    #[test]
    fn exactly_k_experts_run_per_prediction() {
        let data = toy_data();
        let mut cfg = MomeConfig::new(2);
        cfg.n_experts = 6;
        cfg.top_k = 2;
        cfg.n_clusters = Some(3);
        cfg.expert_epochs = 3;
        cfg.gate_epochs = 3;
        let (model, _) = train_mome(&data, &cfg, 4).unwrap();
        let xs = rows(&data);
        model.evaluations.reset();
        let batch = model.predict_batch(&xs).unwrap();
        assert_eq!(model.evaluations.get(), 2 * xs.len() as u64);
        model.evaluations.reset();
        for (x, b) in xs.iter().zip(&batch) {
            let p = model.predict(x).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert!((p - b).abs() < 1e-15);
        }
        assert_eq!(model.evaluations.get(), 2 * xs.len() as u64);
        let w = model.weights(&xs[0]).unwrap();
        assert_eq!(w.iter().filter(|v| **v > 0.0).count(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn experts_train_on_one_cluster_each() {
        let data = toy_data();
        let mut cfg = MomeConfig::new(2);
        cfg.n_experts = 8;
        cfg.n_clusters = Some(4);
        cfg.expert_epochs = 1;
        cfg.gate_epochs = 1;
        let (model, _) = train_mome(&data, &cfg, 5).unwrap();
        let a = model.assignment.as_ref().unwrap();
        let c = model.clusters.as_ref().unwrap();
        assert_eq!(a.counts.iter().sum::<usize>(), 8);
        assert!(a.expert_cluster.iter().all(|&u| u < c.k()));
        assert_eq!(c.sizes.iter().sum::<usize>(), data.len());
    }
}
