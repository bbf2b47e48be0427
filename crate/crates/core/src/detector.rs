//! Selective state-space binary classifier over tabular rows.
//!
//! A row of `P` features is read as a length-`P` sequence of scalars. Each
//! scalar is embedded with a learned positional offset, passed through `depth`
//! residual selective-scan blocks, mean-pooled, and mapped to a probability.
//!
//! Per block and position `t` with input `u_t ∈ R^E`:
//!
//! ```text
//! Δ_t    = softplus(u_t W_Δ + b_Δ)              ∈ R^E
//! Ā_t    = exp(Δ_t[e] · A[e, n])                ∈ R^{E×N},  A = −softplus(a_raw)
//! h_t    = Ā_t ⊙ h_{t−1} + Δ_t[e] u_t[e] B_t[n], B_t = u_t W_B ∈ R^N
//! y_t[e] = Σ_n C_t[n] h_t[e, n] + D[e] u_t[e],   C_t = u_t W_C ∈ R^N
//! out_t  = u_t + leaky_relu(y_t)
//! ```

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffcore::{scalar, value_and_grad, Bound, Graph, ParameterStore, Tensor, Var};
use crate::diffcore::network::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{self, TrainConfig, TrainMetrics};

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_EPOCHS: usize = 600;
pub const DEFAULT_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmDetectorSpec {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub depth: usize,
}

impl SsmDetectorSpec {
    /// Single large detector: embed 32, state 4.
    pub fn large(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 32,
            state_dim: 4,
            depth: DEFAULT_DEPTH,
        }
    }

    /// Expert backbone, roughly an eighth of [`SsmDetectorSpec::large`].
    pub fn expert(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 8,
            state_dim: 4,
            depth: DEFAULT_DEPTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.state_dim == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument(format!("detector dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let (p, e, n) = (self.feature_dim, self.embed_dim, self.state_dim);
        let embed = 2 * e + p * e;
        let block = e * e + e + e * n + 2 * e * n + e;
        embed + self.depth * block + e + 1
    }
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// One block's parameters as plain arrays, with `A` already negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlock {
    pub embed_dim: usize,
    pub state_dim: usize,
    /// `E × E`, row-major.
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    /// `E × N`, row-major, every entry negative for a stable scan.
    pub a: Vec<f64>,
    /// `E × N`
    pub w_b: Vec<f64>,
    /// `E × N`
    pub w_c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Everything a scan produced, position by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace {
    /// Block outputs `y_t` before the residual.
    pub y: Vec<Vec<f64>>,
    /// Hidden states `h_t` (`E·N`, row-major).
    pub h: Vec<Vec<f64>>,
    /// Decay factors `Ā_t`.
    pub a_bar: Vec<Vec<f64>>,
    /// Input terms `B̄_t u_t`.
    pub b_bar_u: Vec<Vec<f64>>,
}

impl SsmBlock {
    /// Strictly sequential left-to-right scan from `h_0 = 0`.
    pub fn scan(&self, u: &[Vec<f64>]) -> ScanTrace {
        let (e_dim, n_dim) = (self.embed_dim, self.state_dim);
        let mut h = vec![0.0; e_dim * n_dim];
        let mut trace = ScanTrace {
            y: Vec::with_capacity(u.len()),
            h: Vec::with_capacity(u.len()),
            a_bar: Vec::with_capacity(u.len()),
            b_bar_u: Vec::with_capacity(u.len()),
        };
        let mut delta = vec![0.0; e_dim];
        let mut bv = vec![0.0; n_dim];
        let mut cv = vec![0.0; n_dim];
        let mut y = vec![0.0; e_dim];
        for ut in u {
            self.step(ut, &mut h, &mut delta, &mut bv, &mut cv, &mut y, Some(&mut trace));
        }
        trace
    }

    /// One scan step writing the block output into `y`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        ut: &[f64],
        h: &mut [f64],
        delta: &mut [f64],
        bv: &mut [f64],
        cv: &mut [f64],
        y: &mut [f64],
        trace: Option<&mut ScanTrace>,
    ) {
        let (e_dim, n_dim) = (self.embed_dim, self.state_dim);
        delta.copy_from_slice(&self.b_delta);
        bv.iter_mut().for_each(|v| *v = 0.0);
        cv.iter_mut().for_each(|v| *v = 0.0);
        for (k, &uk) in ut.iter().enumerate() {
            let wd = &self.w_delta[k * e_dim..(k + 1) * e_dim];
            for (dv, w) in delta.iter_mut().zip(wd) {
                *dv += uk * w;
            }
            let wb = &self.w_b[k * n_dim..(k + 1) * n_dim];
            let wc = &self.w_c[k * n_dim..(k + 1) * n_dim];
            for n in 0..n_dim {
                bv[n] += uk * wb[n];
                cv[n] += uk * wc[n];
            }
        }
        delta.iter_mut().for_each(|v| *v = scalar::softplus(*v));
        let mut a_bar = trace.as_ref().map(|_| vec![0.0; e_dim * n_dim]);
        let mut b_bar_u = trace.as_ref().map(|_| vec![0.0; e_dim * n_dim]);
        for e in 0..e_dim {
            let du = delta[e] * ut[e];
            let mut acc = 0.0;
            for n in 0..n_dim {
                let k = e * n_dim + n;
                let ab = (delta[e] * self.a[k]).exp();
                let inp = du * bv[n];
                h[k] = ab * h[k] + inp;
                acc += cv[n] * h[k];
                if let (Some(a), Some(b)) = (a_bar.as_mut(), b_bar_u.as_mut()) {
                    a[k] = ab;
                    b[k] = inp;
                }
            }
            y[e] = acc + self.d[e] * ut[e];
        }
        if let Some(t) = trace {
            t.y.push(y.to_vec());
            t.h.push(h.to_vec());
            t.a_bar.push(a_bar.expect("allocated with trace"));
            t.b_bar_u.push(b_bar_u.expect("allocated with trace"));
        }
    }
}

/// Plain-array copy of a detector, built once per batch of forward passes.
#[derive(Debug, Clone)]
struct Compiled {
    spec: SsmDetectorSpec,
    embed_w: Vec<f64>,
    embed_b: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<SsmBlock>,
    head_w: Vec<f64>,
    head_b: f64,
}

impl Compiled {
    fn logit(&self, x: &[f64], buf: &mut ScanBuffers) -> f64 {
        let (p, e_dim) = (self.spec.feature_dim, self.spec.embed_dim);
        let u = &mut buf.u;
        for i in 0..p {
            for e in 0..e_dim {
                u[i * e_dim + e] = lrelu(x[i] * self.embed_w[e] + self.embed_b[e] + self.pos[i * e_dim + e]);
            }
        }
        for block in &self.blocks {
            buf.h.iter_mut().for_each(|v| *v = 0.0);
            for ut in u.chunks_exact_mut(e_dim) {
                block.step(ut, &mut buf.h, &mut buf.delta, &mut buf.bv, &mut buf.cv, &mut buf.y, None);
                for (o, yv) in ut.iter_mut().zip(&buf.y) {
                    *o += lrelu(*yv);
                }
            }
        }
        let mut logit = self.head_b;
        for e in 0..e_dim {
            let pooled = (0..p).map(|i| u[i * e_dim + e]).sum::<f64>() / p as f64;
            logit += pooled * self.head_w[e];
        }
        logit
    }
}

/// Scratch space for [`Compiled::logit`], reused across rows.
struct ScanBuffers {
    u: Vec<f64>,
    h: Vec<f64>,
    delta: Vec<f64>,
    bv: Vec<f64>,
    cv: Vec<f64>,
    y: Vec<f64>,
}

impl ScanBuffers {
    fn new(spec: &SsmDetectorSpec) -> Self {
        let (e, n) = (spec.embed_dim, spec.state_dim);
        Self {
            u: vec![0.0; spec.feature_dim * e],
            h: vec![0.0; e * n],
            delta: vec![0.0; e],
            bv: vec![0.0; n],
            cv: vec![0.0; n],
            y: vec![0.0; e],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub spec: SsmDetectorSpec,
    pub params: ParameterStore,
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn blk(l: usize, name: &str) -> String {
    format!("blk{l}.{name}")
}

impl DetectorModel {
    /// Glorot projections, `A[e, n] = −(n + 1)`, `Δ ≈ 0.13`, `D = 1`, zero head.
    pub fn new(spec: SsmDetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (p, e, n) = (spec.feature_dim, spec.embed_dim, spec.state_dim);
        let mut r = rng::seeded(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let lim = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(rows, cols, |_, _| r.random_range(-lim..lim))
        };
        let mut params = ParameterStore::new();
        params.insert("embed.w", glorot(1, e));
        params.insert("embed.b", Tensor::zeros(1, e));
        params.insert("embed.pos", glorot(p, e));
        for l in 0..spec.depth {
            params.insert(blk(l, "w_delta"), glorot(e, e));
            params.insert(blk(l, "b_delta"), Tensor::filled(1, e, -2.0));
            params.insert(blk(l, "a_raw"), Tensor::from_fn(1, e * n, |_, k| inv_softplus((k % n + 1) as f64)));
            params.insert(blk(l, "w_b"), glorot(e, n));
            params.insert(blk(l, "w_c"), glorot(e, n));
            params.insert(blk(l, "d"), Tensor::filled(1, e, 1.0));
        }
        params.insert("head.w", Tensor::zeros(e, 1));
        params.insert("head.b", Tensor::zeros(1, 1));
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: SsmDetectorSpec, params: ParameterStore) -> Result<Self> {
        let template = Self::new(spec, 0)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("detector parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { spec, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Block `l` with `A = −softplus(a_raw)` resolved.
    pub fn block(&self, l: usize) -> SsmBlock {
        let get = |name: &str| self.params.expect(&blk(l, name)).data().to_vec();
        SsmBlock {
            embed_dim: self.spec.embed_dim,
            state_dim: self.spec.state_dim,
            w_delta: get("w_delta"),
            b_delta: get("b_delta"),
            a: get("a_raw").into_iter().map(|v| -scalar::softplus(v)).collect(),
            w_b: get("w_b"),
            w_c: get("w_c"),
            d: get("d"),
        }
    }

    /// Position-wise embeddings `leaky_relu(x_i w + b + pos_i)`.
    pub fn embed(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let w = self.params.expect("embed.w").data();
        let b = self.params.expect("embed.b").data();
        let pos = self.params.expect("embed.pos");
        (0..self.spec.feature_dim)
            .map(|i| {
                (0..self.spec.embed_dim)
                    .map(|e| lrelu(x[i] * w[e] + b[e] + pos.get(i, e)))
                    .collect()
            })
            .collect()
    }

    fn compile(&self) -> Compiled {
        Compiled {
            spec: self.spec,
            embed_w: self.params.expect("embed.w").data().to_vec(),
            embed_b: self.params.expect("embed.b").data().to_vec(),
            pos: self.params.expect("embed.pos").data().to_vec(),
            blocks: (0..self.spec.depth).map(|l| self.block(l)).collect(),
            head_w: self.params.expect("head.w").data().to_vec(),
            head_b: self.params.expect("head.b").item(),
        }
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.spec.feature_dim {
            return Err(Error::Shape(format!(
                "detector expects {} features, got {got}",
                self.spec.feature_dim
            )));
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x.len())?;
        Ok(self.compile().logit(x, &mut ScanBuffers::new(&self.spec)))
    }

    /// Anomaly probability in `(0, 1)`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(scalar::sigmoid(self.logit(x)?))
    }

    /// Scores every row; parameters are unpacked once.
    pub fn score_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..xs.len()).collect();
        self.score_selected(xs, &rows)
    }

    /// Scores the rows `xs[i]` for each `i` in `rows`, in that order.
    pub fn score_selected<R: AsRef<[f64]>>(&self, xs: &[R], rows: &[usize]) -> Result<Vec<f64>> {
        if let Some(&i) = rows.iter().find(|&&i| xs[i].as_ref().len() != self.spec.feature_dim) {
            self.check_len(xs[i].as_ref().len())?;
        }
        let c = self.compile();
        let mut buf = ScanBuffers::new(&self.spec);
        Ok(rows.iter().map(|&i| scalar::sigmoid(c.logit(xs[i].as_ref(), &mut buf))).collect())
    }

    /// Logit graph for a batch node `x` (`B × P`), returning `B × 1`.
    pub fn logit_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let (p, e_dim, n_dim) = (self.spec.feature_dim, self.spec.embed_dim, self.spec.state_dim);
        let ew = bound.get("embed.w");
        let eb = bound.get("embed.b");
        let pos = bound.get("embed.pos");
        let mut u: Vec<Var> = (0..p)
            .map(|i| {
                let xi = g.slice_cols(x, i, 1);
                let lin = g.matmul(xi, ew);
                let lin = g.add_row(lin, eb);
                let pi = g.gather_rows(pos, vec![i]);
                let lin = g.add_row(lin, pi);
                g.leaky_relu(lin, LEAKY_SLOPE)
            })
            .collect();
        for l in 0..self.spec.depth {
            let w_delta = bound.get(&blk(l, "w_delta"));
            let b_delta = bound.get(&blk(l, "b_delta"));
            let a_raw = bound.get(&blk(l, "a_raw"));
            let w_b = bound.get(&blk(l, "w_b"));
            let w_c = bound.get(&blk(l, "w_c"));
            let d = bound.get(&blk(l, "d"));
            let a_pos = g.softplus(a_raw);
            let a = g.neg(a_pos);
            let mut h: Option<Var> = None;
            for ut in u.iter_mut() {
                let pre = g.affine(*ut, w_delta, b_delta);
                let delta = g.softplus(pre);
                let rep = g.repeat_cols(delta, n_dim);
                let da = g.mul_row(rep, a);
                let a_bar = g.exp(da);
                let bv = g.matmul(*ut, w_b);
                let cv = g.matmul(*ut, w_c);
                let du = g.mul(delta, *ut);
                let du_rep = g.repeat_cols(du, n_dim);
                let b_tile = g.tile_cols(bv, e_dim);
                let inp = g.mul(du_rep, b_tile);
                let h_new = match h {
                    Some(prev) => {
                        let decayed = g.mul(a_bar, prev);
                        g.add(decayed, inp)
                    }
                    None => inp,
                };
                h = Some(h_new);
                let c_tile = g.tile_cols(cv, e_dim);
                let hc = g.mul(h_new, c_tile);
                let y = g.group_sum_cols(hc, n_dim);
                let skip = g.mul_row(*ut, d);
                let y = g.add(y, skip);
                let act = g.leaky_relu(y, LEAKY_SLOPE);
                *ut = g.add(*ut, act);
            }
        }
        let mut pooled = u[0];
        for ut in &u[1..] {
            pooled = g.add(pooled, *ut);
        }
        let pooled = g.scale(pooled, 1.0 / p as f64);
        let hw = bound.get("head.w");
        let hb = bound.get("head.b");
        g.affine(pooled, hw, hb)
    }

    /// `∇_x log score(x)`.
    pub fn score_input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let mut g = Graph::new();
        let bound = g.bind(&self.params);
        let xv = g.leaf(Tensor::row(x.to_vec()));
        let logit = self.logit_graph(&mut g, &bound, xv);
        let ls = g.log_sigmoid(logit);
        let adj = g.backward(ls);
        Ok(adj.wrt(xv).into_vec())
    }

    /// Mean binary cross-entropy graph against `targets` (`B × 1` of 0/1).
    pub fn bce_graph(&self, g: &mut Graph, bound: &Bound, xs: &Tensor, targets: &Tensor) -> Var {
        let x = g.leaf(xs.clone());
        let logit = self.logit_graph(g, bound, x);
        bce_from_logits(g, logit, targets)
    }

    /// BCE on a balanced set, labels mapped `−1 → 0`, `+1 → 1`.
    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<TrainMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("detector training set is empty".into()));
        }
        self.check_len(data.feature_dim())?;
        let this = self.clone();
        train::fit(
            &mut self.params,
            data.len(),
            cfg,
            |params, idx| {
                let (xs, ts) = batch(data, idx);
                value_and_grad(params, |g, b| this.bce_graph(g, b, &xs, &ts))
            },
            |_| {},
        )
    }
}

/// `mean(softplus(s) − t·s)`, the stable form of binary cross-entropy on logits.
pub fn bce_from_logits(g: &mut Graph, logit: Var, targets: &Tensor) -> Var {
    let t = g.leaf(targets.clone());
    let sp = g.softplus(logit);
    let ts = g.mul(t, logit);
    let l = g.sub(sp, ts);
    g.mean(l)
}

/// Features and 0/1 targets of the rows `idx`.
pub fn batch(data: &Dataset, idx: &[usize]) -> (Tensor, Tensor) {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| data.sample(i).features.as_slice()).collect();
    let xs = Tensor::from_rows(&rows);
    let ts = Tensor::from_vec(idx.len(), 1, idx.iter().map(|&i| data.sample(i).label.target()).collect());
    (xs, ts)
}
