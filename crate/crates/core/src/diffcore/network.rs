use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{scalar, Bound, Graph, Var};
use super::params::{Gradients, ParameterStore};
use super::spectral::project_spectral;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Softplus,
    Identity,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Softplus => scalar::softplus(x),
            Activation::Identity => x,
            Activation::Sigmoid => scalar::sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn graph(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Softplus => g.softplus(x),
            Activation::Identity => x,
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Shape of a fully connected feed-forward network.
///
/// `sizes` lists the widths from input to output; layer `j` maps
/// `sizes[j] -> sizes[j + 1]` followed by `activations[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Optional spectral-norm cap for each layer's weight matrix.
    pub spectral_caps: Vec<Option<f64>>,
}

impl NetworkSpec {
    /// Hidden layers share `hidden_act`; the last layer uses `out_act`.
    pub fn mlp(sizes: &[usize], hidden_act: Activation, out_act: Activation) -> Self {
        let n = sizes.len().saturating_sub(1);
        let mut activations = vec![hidden_act; n];
        if let Some(last) = activations.last_mut() {
            *last = out_act;
        }
        Self {
            sizes: sizes.to_vec(),
            activations,
            spectral_caps: vec![None; n],
        }
    }

    pub fn with_spectral_cap(mut self, cap: f64) -> Self {
        self.spectral_caps = vec![Some(cap); self.num_layers()];
        self
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("empty network spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network sizes {:?} need at least two positive widths",
                self.sizes
            )));
        }
        if self.activations.len() != self.num_layers() || self.spectral_caps.len() != self.num_layers()
        {
            return Err(Error::InvalidArgument(
                "one activation and one cap entry per layer required".into(),
            ));
        }
        for cap in self.spectral_caps.iter().flatten() {
            if !(*cap > 0.0 && *cap <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "spectral cap {cap} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// A [`NetworkSpec`] whose parameters live under `prefix` in a shared store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: NetworkSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: NetworkSpec, prefix: impl Into<String>) -> Self {
        Self {
            spec,
            prefix: prefix.into(),
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}b{layer}", self.prefix)
    }

    /// Glorot-uniform weights, zero biases. Capped layers are projected after init.
    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        for j in 0..self.spec.num_layers() {
            let (fan_in, fan_out) = (self.spec.sizes[j], self.spec.sizes[j + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
            if let Some(cap) = self.spec.spectral_caps[j] {
                w = project_spectral(&w, cap);
            }
            store.insert(self.weight_name(j), w);
            store.insert(self.bias_name(j), Tensor::zeros(1, fan_out));
        }
    }

    /// Re-applies every layer's spectral cap in place.
    pub fn project(&self, store: &mut ParameterStore) {
        for j in 0..self.spec.num_layers() {
            if let Some(cap) = self.spec.spectral_caps[j] {
                let name = self.weight_name(j);
                let w = store.expect(&name);
                let projected = project_spectral(w, cap);
                store.insert(name, projected);
            }
        }
    }

    /// Plain evaluation on a batch (`rows × input_dim`).
    pub fn forward_batch(&self, store: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "network expects width {}, got {}",
                self.spec.input_dim(),
                input.cols()
            )));
        }
        let mut h = input.clone();
        for j in 0..self.spec.num_layers() {
            let w = store.expect(&self.weight_name(j));
            let b = store.expect(&self.bias_name(j));
            let act = self.spec.activations[j];
            let mut z = h.matmul(w);
            let c = z.cols();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + b.data()[k % c]);
            }
            if !z.is_finite() {
                return Err(Error::NonFinite { layer: j });
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, store: &ParameterStore, input: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(store, &Tensor::row(input.to_vec()))?;
        Ok(out.into_vec())
    }

    pub fn graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for j in 0..self.spec.num_layers() {
            let w = bound.get(&self.weight_name(j));
            let b = bound.get(&self.bias_name(j));
            let z = g.affine(h, w, b);
            h = self.spec.activations[j].graph(g, z);
        }
        h
    }
}

/// Loss value and parameter gradients of a scalar graph built by `f`.
///
/// `f` receives the graph and the bound parameters and must return a `1 × 1`
/// node. Fails if the loss is not finite.
pub fn value_and_grad<F>(store: &ParameterStore, f: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph, &Bound) -> Var,
{
    let mut g = Graph::new();
    let bound = g.bind(store);
    let loss = f(&mut g, &bound);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value));
    }
    let adj = g.backward(loss);
    Ok((value, adj.collect(store, &bound)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zeroed(store: &mut ParameterStore) {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_identity_gives_final_bias() {
        let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Identity, Activation::Identity);
        let net = Mlp::new(spec, "n.");
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        zeroed(&mut store);
        store.insert("n.b1", Tensor::row(vec![0.25, -1.5]));
        let out = net.forward(&store, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.25, -1.5]);
    }

    #[test]
    fn single_relu_layer_hand_arithmetic() {
        let spec = NetworkSpec::mlp(&[1, 1], Activation::Relu, Activation::Relu);
        let net = Mlp::new(spec, "");
        let mut store = ParameterStore::new();
        store.insert("w0", Tensor::scalar(2.0));
        store.insert("b0", Tensor::row(vec![0.0]));
        assert_eq!(net.forward(&store, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn forward_is_deterministic_and_matches_graph() {
        let spec = NetworkSpec::mlp(&[4, 8, 8, 3], Activation::Tanh, Activation::Identity);
        let net = Mlp::new(spec, "m.");
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let x = [0.1, -0.7, 1.3, 0.4];
        let a = net.forward(&store, &x).unwrap();
        let b = net.forward(&store, &x).unwrap();
        assert_eq!(a, b);

        let mut g = Graph::new();
        let bound = g.bind(&store);
        let xv = g.leaf(Tensor::row(x.to_vec()));
        let y = net.graph(&mut g, &bound, xv);
        for (p, q) in g.value(y).data().iter().zip(&a) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Mlp::new(
            NetworkSpec::mlp(&[2, 2], Activation::Relu, Activation::Relu),
            "",
        );
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(net.forward(&store, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_intermediate_names_layer() {
        let net = Mlp::new(
            NetworkSpec::mlp(&[1, 1, 1], Activation::Identity, Activation::Identity),
            "",
        );
        let mut store = ParameterStore::new();
        store.insert("w0", Tensor::scalar(1e300));
        store.insert("b0", Tensor::row(vec![0.0]));
        store.insert("w1", Tensor::scalar(1e300));
        store.insert("b1", Tensor::row(vec![0.0]));
        match net.forward(&store, &[1.0]) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let net = Mlp::new(
            NetworkSpec::mlp(&[2, 3, 1], Activation::Relu, Activation::Identity),
            "",
        );
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let (v, grads) = value_and_grad(&store, |g, _| g.leaf(Tensor::scalar(4.0))).unwrap();
        assert_eq!(v, 4.0);
        assert!(grads.values().all(|t| t.data().iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn invalid_cap_rejected() {
        let spec = NetworkSpec::mlp(&[2, 2], Activation::Relu, Activation::Relu).with_spectral_cap(1.5);
        assert!(spec.validate().is_err());
    }
}
