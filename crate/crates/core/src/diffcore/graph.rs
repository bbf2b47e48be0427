//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in evaluation order. Calling
//! [`Graph::backward`] walks the nodes in reverse and accumulates adjoints.
//! Graphs are cheap to build and are meant to be thrown away after one
//! forward/backward pass.

use indexmap::IndexMap;

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    /// `ln(max(x, floor))`; the adjoint is zero where the floor is active.
    Ln(Var, f64),
    Square(Var),
    /// Elementwise clamp to `[lo, hi]`; the adjoint is zero outside.
    Clamp(Var, f64, f64),
    SumAll(Var),
    /// `r × c -> r × 1`
    SumCols(Var),
    /// `r × c -> 1 × c`
    SumRows(Var),
    /// `1 × c -> n × c`
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatCols(Var, usize),
    TileCols(Var, usize),
    GroupSumCols(Var, usize),
    MaskedSoftmax(Var, Vec<bool>),
    GatherRows(Var, Vec<usize>),
    PlaceRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Parameters of a [`ParameterStore`] registered as leaves of a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Panics if `name` was not part of the bound store.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Gradient with respect to `v`, zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients for every parameter of `store` bound through `bound`.
    pub fn collect(&self, store: &ParameterStore, bound: &Bound) -> Gradients {
        let mut out = Gradients::new();
        for (name, t) in store.iter() {
            let g = match bound.try_get(name) {
                Some(v) => self.wrt(v),
                None => Tensor::zeros(t.rows(), t.cols()),
            };
            out.insert(name.to_string(), g);
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub(crate) mod scalar {
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers every tensor of `store` as a leaf.
    pub fn bind(&mut self, store: &ParameterStore) -> Bound {
        let mut vars = IndexMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            let v = self.leaf(t.clone());
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    /// Registers only the parameters whose names start with `prefix`.
    pub fn bind_prefix(&mut self, store: &ParameterStore, prefix: &str) -> Bound {
        let mut vars = IndexMap::new();
        for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let v = self.leaf(t.clone());
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (r × c) + row (1 × c)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let c = av.cols();
        let r = rv.data();
        let mut out = av.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o += r[k % c];
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `a (r × c) ⊙ row (1 × c)`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "mul_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let c = av.cols();
        let r = rv.data();
        let mut out = av.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o *= r[k % c];
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural log with inputs floored at `floor`.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Ln(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `r × c -> r × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect();
        let v = Tensor::from_vec(av.rows(), 1, out);
        self.push(v, Op::SumCols(a))
    }

    /// Sum across rows: `r × c -> 1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows_to_row();
        self.push(v, Op::SumRows(a))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * av.cols());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let v = Tensor::from_vec(n, av.cols(), data);
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                data.extend_from_slice(pv.row_slice(i));
            }
        }
        let v = Tensor::from_vec(rows, total, data);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice out of range");
        let v = Tensor::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        self.push(v, Op::SliceCols(a, start))
    }

    /// Each column repeated `n` times in place: `[a, b] -> [a, a, b, b]` for `n = 2`.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let v = Tensor::from_fn(av.rows(), av.cols() * n, |i, j| av.get(i, j / n));
        self.push(v, Op::RepeatCols(a, n))
    }

    /// The whole row block repeated `n` times: `[a, b] -> [a, b, a, b]` for `n = 2`.
    pub fn tile_cols(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let v = Tensor::from_fn(av.rows(), c * n, |i, j| av.get(i, j % c));
        self.push(v, Op::TileCols(a, n))
    }

    /// Sums consecutive groups of `n` columns: inverse shape of [`Graph::repeat_cols`].
    pub fn group_sum_cols(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols() % n, 0, "group size does not divide width");
        let groups = av.cols() / n;
        let v = Tensor::from_fn(av.rows(), groups, |i, g| {
            av.row_slice(i)[g * n..(g + 1) * n].iter().sum()
        });
        self.push(v, Op::GroupSumCols(a, n))
    }

    /// Row-wise softmax restricted to entries where `mask` is set; all others
    /// are exactly zero. `mask` is row-major with the shape of `a`.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len(), "mask shape mismatch");
        let (r, c) = av.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = av.row_slice(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..c {
                if m[j] {
                    out.set(i, j, out.get(i, j) / z);
                }
            }
        }
        self.push(out, Op::MaskedSoftmax(a, mask))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select_rows(&idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Scatters the rows of `a` to positions `idx` of a zero `total × c` tensor.
    pub fn place_rows(&mut self, a: Var, idx: Vec<usize>, total: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "place_rows index count mismatch");
        let c = av.cols();
        let mut out = Tensor::zeros(total, c);
        for (r, &dst) in idx.iter().enumerate() {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(av.row_slice(r));
        }
        self.push(out, Op::PlaceRows(a, idx))
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Adjoints {
        let (r, c) = self.value(output).shape();
        self.backward_with(output, Tensor::filled(r, c, 1.0))
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Adjoints {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Adjoints {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_t(val(*b)));
                acc(grads, *b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_rows_to_row());
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let av = val(*a);
                let c = rv.cols();
                let mut ga = g.clone();
                let mut gr = vec![0.0; c];
                for (k, o) in ga.data_mut().iter_mut().enumerate() {
                    gr[k % c] += *o * av.data()[k];
                    *o *= rv.data()[k % c];
                }
                acc(grads, *a, ga);
                acc(grads, *row, Tensor::row(gr));
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(
                    grads,
                    *a,
                    g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { s * d }),
                )
            }
            Op::Softplus(a) => acc(grads, *a, g.zip_map(val(*a), |d, x| d * sigmoid(x))),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::LogSigmoid(a) => acc(grads, *a, g.zip_map(val(*a), |d, x| d * sigmoid(-x))),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Ln(a, floor) => {
                let f = *floor;
                acc(
                    grads,
                    *a,
                    g.zip_map(val(*a), |d, x| if x > f { d / x } else { 0.0 }),
                )
            }
            Op::Square(a) => acc(grads, *a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    grads,
                    *a,
                    g.zip_map(val(*a), |d, x| if x >= lo && x <= hi { d } else { 0.0 }),
                )
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::BroadcastRows(a) => acc(grads, *a, g.sum_rows_to_row()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let off = offset;
                    acc(grads, *p, Tensor::from_fn(r, c, |i, j| g.get(i, off + j)));
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let len = g.cols();
                let s = *start;
                acc(
                    grads,
                    *a,
                    Tensor::from_fn(r, c, |i, j| {
                        if j >= s && j < s + len {
                            g.get(i, j - s)
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::RepeatCols(a, n) => {
                let (r, c) = val(*a).shape();
                let n = *n;
                acc(
                    grads,
                    *a,
                    Tensor::from_fn(r, c, |i, j| (0..n).map(|k| g.get(i, j * n + k)).sum()),
                );
            }
            Op::TileCols(a, n) => {
                let (r, c) = val(*a).shape();
                let n = *n;
                acc(
                    grads,
                    *a,
                    Tensor::from_fn(r, c, |i, j| (0..n).map(|k| g.get(i, k * c + j)).sum()),
                );
            }
            Op::GroupSumCols(a, n) => {
                let (r, c) = val(*a).shape();
                let n = *n;
                acc(grads, *a, Tensor::from_fn(r, c, |i, j| g.get(i, j / n)));
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| y.get(i, j) * g.get(i, j)).sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = ga.get(src, j) + g.get(k, j);
                        ga.set(src, j, v);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::PlaceRows(a, idx) => acc(grads, *a, g.select_rows(idx)),
        }
    }
}
