//! Fully connected classifiers and the cross-entropy loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softplus => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Seed of the weight initialization; runs set it from the run seed.
    #[serde(skip)]
    pub init_seed: u64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            dims.push((w, fan_in));
            fan_in = w;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_out, fan_in]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Weights `Unif(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.init_seed, &[rng::purpose::INIT]);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(out, fan_in)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                let w = (0..out * fan_in)
                    .map(|_| bound * (2.0 * r.random::<f64>() - 1.0))
                    .collect();
                Layer {
                    weight: Tensor::from_raw(vec![out, fan_in], w),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((out, fan_in), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [*out, *fan_in] || l.bias.shape() != [*out] {
                return Err(Error::Config(format!(
                    "layer {i}: weight {:?} / bias {:?}, expected [{out}, {fan_in}] / [{out}]",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Registers the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect(),
            activation: self.config.activation,
            classes: self.config.classes,
        }
    }

    /// Logits for a batch `[n, d]`, outside any graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let (n, _) = logits.dims2().expect("logits are a matrix");
        Ok((0..n).map(|i| argmax(logits.row(i))).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// An [`Mlp`] whose parameters live in a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
    pub classes: usize,
}

impl BoundMlp {
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn activate(&self, g: &mut Graph, z: Var) -> Result<Var> {
        match self.activation {
            Activation::Relu => g.relu(z),
            Activation::Softplus => g.softplus(z),
        }
    }

    fn affine(&self, g: &mut Graph, layer: usize, h: Var) -> Result<Var> {
        let (w, b) = self.layers[layer];
        let z = g.matmul_t(h, w, false, true)?;
        g.add_row(z, b)
    }

    fn finish(&self, g: &mut Graph, first_pre: Var) -> Result<Var> {
        let mut h = self.activate(g, first_pre)?;
        let last = self.layers.len() - 1;
        for i in 1..=last {
            let z = self.affine(g, i, h)?;
            h = if i == last { z } else { self.activate(g, z)? };
        }
        Ok(h)
    }

    /// Logits `[n, classes]` for inputs `[n, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.layers.len() == 1 {
            return self.affine(g, 0, x);
        }
        let z = self.affine(g, 0, x)?;
        self.finish(g, z)
    }

    /// Logits at `(1-α)·x_a + α·x_b` (per-row α) given the first-layer
    /// pre-activations of the two endpoints. The first layer is affine, so
    /// mixing pre-activations equals evaluating at the mixed input.
    pub fn forward_mixed(&self, g: &mut Graph, za: Var, zb: Var, alpha: Var) -> Result<Var> {
        let one_minus = g.affine(alpha, -1.0, 1.0)?;
        let a = g.scale_rows(za, one_minus)?;
        let b = g.scale_rows(zb, alpha)?;
        let z = g.add(a, b)?;
        if self.layers.len() == 1 {
            return Ok(z);
        }
        self.finish(g, z)
    }

    /// First-layer pre-activations.
    pub fn first_layer(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.affine(g, 0, x)
    }

    /// Logits from first-layer pre-activations.
    pub fn from_first_layer(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if self.layers.len() == 1 {
            return Ok(z);
        }
        self.finish(g, z)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelRange { label: y, classes });
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_raw(vec![labels.len(), classes], data))
}

/// Per-example `-log softmax(logits)[y]`, shape `[n]`. `onehot` is a
/// constant `[n, classes]` node.
pub fn cross_entropy_per_example(g: &mut Graph, logits: Var, onehot: Var) -> Result<Var> {
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.mul(logits, onehot)?;
    let picked = g.row_sum(picked)?;
    g.sub(lse, picked)
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.value(logits).dims2().map(|(_, c)| c).unwrap_or(0);
    let oh = one_hot(labels, classes)?;
    let oh = g.constant(oh);
    let per = cross_entropy_per_example(g, logits, oh)?;
    g.mean(per)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hidden: Vec<usize>, act: Activation) -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            hidden,
            classes: 2,
            activation: act,
            init_seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = Mlp::new(cfg(vec![4], Activation::Relu)).unwrap();
        let b = Mlp::new(cfg(vec![4], Activation::Relu)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].weight.shape(), &[4, 2]);
        assert_eq!(a.layers[1].weight.shape(), &[2, 4]);
        assert!(a
            .layers
            .iter()
            .all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        let bound = (1.0f64 / 2.0).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Mlp::new(cfg(vec![0], Activation::Relu)).is_err());
        assert!(Mlp::new(cfg(vec![], Activation::Relu)).is_ok());
        let mut c = cfg(vec![3], Activation::Relu);
        c.classes = 1;
        assert!(Mlp::new(c).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Mlp::new(cfg(vec![3], Activation::Softplus)).unwrap();
        m.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_ln2() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy(&mut g, z, &[0, 1]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            cross_entropy(&mut g, z, &[2]),
            Err(Error::LabelRange { label: 2, .. })
        ));
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let mut g = Graph::new();
            let z = g.input(Tensor::matrix(1, 2, vec![m, 0.0]).unwrap());
            let ce = cross_entropy(&mut g, z, &[0]).unwrap();
            let l = g.value(ce).item();
            assert!(l < prev || l == 0.0);
            prev = l;
        }
        assert!(prev < 1e-40);
    }
}
