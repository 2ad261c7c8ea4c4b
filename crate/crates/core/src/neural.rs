//! Fully connected surrogates for the state trajectory and for the
//! time-varying interaction rate.
//!
//! A network maps normalized time (one input) through affine layers with
//! SiLU between them and Softplus on the output, so every output is
//! strictly positive. Weights are stored `out x in` and a batch of inputs
//! is `N x in`, so a layer computes `X W^T + b`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => autodiff::silu(x),
            Activation::Softplus => autodiff::softplus(x),
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &mut Tape, z: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(z),
            Activation::Softplus => tape.softplus(z),
            Activation::Identity => z,
        }
    }

    /// Derivative of the activation at `z`, as a node.
    fn record_derivative(self, tape: &mut Tape, z: Var) -> Option<Var> {
        match self {
            Activation::Silu => Some(tape.silu_prime(z)),
            Activation::Softplus => Some(tape.sigmoid(z)),
            Activation::Identity => None,
        }
    }
}

/// Weight initialization. Only one scheme is implemented: weights uniform
/// on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    UniformFanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "one")]
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
    #[serde(default)]
    pub init: InitScheme,
}

fn one() -> usize {
    1
}

fn default_hidden_activation() -> Activation {
    Activation::Silu
}

fn default_output_activation() -> Activation {
    Activation::Softplus
}

impl NetworkConfig {
    pub fn new(hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim: 1,
            hidden,
            output_dim,
            hidden_activation: Activation::Silu,
            output_activation: Activation::Softplus,
            init: InitScheme::UniformFanIn,
        }
    }

    /// State surrogate: time -> (C, T, M, G).
    pub fn state_default() -> Self {
        Self::new(vec![100, 100, 100], 4)
    }

    /// Rate surrogate: time -> s_MT.
    pub fn rate_default() -> Self {
        Self::new(vec![200, 200], 1)
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn num_parameters(&self) -> usize {
        self.widths()
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("network.input_dim", "must be positive"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("network.output_dim", "must be positive"));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(
                format!("network.hidden[{i}]"),
                "layer size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
}

impl Network {
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::new(fan_out, fan_in, data),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Network with every weight and bias equal to zero.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .widths()
            .windows(2)
            .map(|p| Layer {
                weight: Tensor::zeros(p[1], p[0]),
                bias: Tensor::zeros(1, p[1]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters: for each layer, the weight (row-major) then
    /// the bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Evaluate at a batch of (normalized) times without recording.
    /// Returns `N x output_dim`.
    pub fn forward(&self, times: &[f64]) -> Result<Tensor> {
        self.forward_named(times, "")
    }

    pub(crate) fn forward_named(&self, times: &[f64], name: &str) -> Result<Tensor> {
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network input {t}")));
        }
        let mut h = Tensor::column(times);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let bias = layer.bias.broadcast_to(h.rows(), layer.weight.rows());
            let z = Tensor::matmul(&h, false, &layer.weight, true).zip_map(&bias, |a, b| a + b);
            let act = if k == last {
                self.config.output_activation
            } else {
                self.config.hidden_activation
            };
            h = z.map(|x| act.apply(x));
            if !h.all_finite() {
                return Err(Error::NonFiniteLayer {
                    network: name.to_string(),
                    layer: k,
                });
            }
        }
        Ok(h)
    }

    /// Record every weight and bias as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        let leaves = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        BoundNetwork {
            leaves,
            hidden_activation: self.config.hidden_activation,
            output_activation: self.config.output_activation,
        }
    }

    /// CSV checkpoint: a `#` header line with the config and seed as JSON,
    /// then `index,value` in [`Network::parameters`] order.
    pub fn to_checkpoint_csv(&self, seed: u64) -> Result<String> {
        let header = serde_json::json!({ "config": self.config, "seed": seed });
        let mut out = format!("# {}\nindex,value\n", serde_json::to_string(&header)?);
        for (i, v) in self.parameters().iter().enumerate() {
            writeln!(out, "{i},{v}").expect("write to string");
        }
        Ok(out)
    }

    pub fn from_checkpoint_csv(text: &str) -> Result<(Self, u64)> {
        let name = "network checkpoint";
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::csv(name, 1, "empty checkpoint"))?;
        let header: serde_json::Value = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::csv(name, 1, "missing header line"))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::csv(name, 1, e.to_string())))?;
        let config: NetworkConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::csv(name, 1, e.to_string()))?;
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| Error::csv(name, 1, "missing seed"))?;
        match lines.next() {
            Some((_, "index,value")) => {}
            _ => return Err(Error::csv(name, 2, "expected header `index,value`")),
        }
        let mut values = Vec::with_capacity(config.num_parameters());
        for (i, line) in lines {
            let (idx, val) = line
                .split_once(',')
                .ok_or_else(|| Error::csv(name, i + 1, "expected two fields"))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::csv(name, i + 1, "bad index"))?;
            if idx != values.len() {
                return Err(Error::csv(name, i + 1, "indices out of order"));
            }
            values.push(
                val.parse::<f64>()
                    .map_err(|_| Error::csv(name, i + 1, "bad value"))?,
            );
        }
        let mut net = Network::zeros(&config)?;
        net.set_parameters(&values)?;
        Ok((net, seed))
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_csv(seed)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        Self::from_checkpoint_csv(&std::fs::read_to_string(path)?)
    }
}

/// Leaf handles of a network recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    leaves: Vec<(Var, Var)>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl BoundNetwork {
    /// `(weight, bias)` leaf per layer.
    pub fn leaves(&self) -> &[(Var, Var)] {
        &self.leaves
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Var {
        let mut h = input;
        let last = self.leaves.len() - 1;
        for (k, &(w, b)) in self.leaves.iter().enumerate() {
            let wx = tape.matmul(h, false, w, true);
            let z = tape.add(wx, b);
            h = if k == last {
                self.output_activation.record(tape, z)
            } else {
                self.hidden_activation.record(tape, z)
            };
        }
        h
    }

    /// Outputs and their derivative with respect to the (scalar per row)
    /// input, both as nodes. The tangent is carried forward layer by layer:
    /// `dz_k = dh_{k-1} W_k^T`, `dh_k = act'(z_k) * dz_k`, starting from
    /// `dh_0 = 1`. Because these are ordinary tape ops, a later reverse
    /// sweep differentiates the derivative with respect to the weights.
    pub fn forward_with_time_derivative(&self, tape: &mut Tape, input: Var) -> (Var, Var) {
        let rows = tape.value(input).rows();
        assert_eq!(
            tape.value(input).cols(),
            1,
            "time derivative needs a single input column"
        );
        let mut h = input;
        let mut dh = tape.constant(Tensor::filled(rows, 1, 1.0));
        let last = self.leaves.len() - 1;
        for (k, &(w, b)) in self.leaves.iter().enumerate() {
            let wx = tape.matmul(h, false, w, true);
            let z = tape.add(wx, b);
            let dz = tape.matmul(dh, false, w, true);
            let act = if k == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = act.record(tape, z);
            dh = match act.record_derivative(tape, z) {
                Some(d) => tape.mul(d, dz),
                None => dz,
            };
        }
        (h, dh)
    }

    /// Gradient with respect to every parameter, in
    /// [`Network::parameters`] order.
    pub fn flat_gradient(&self, grads: &Gradients, out: &mut Vec<f64>) {
        for &(w, b) in &self.leaves {
            for v in [w, b] {
                match grads.get(v) {
                    Some(g) => out.extend_from_slice(g.as_slice()),
                    None => {
                        let n = grads.wrt(v).len();
                        out.extend(std::iter::repeat_n(0.0, n));
                    }
                }
            }
        }
    }
}

/// Positive scalar parameter stored as an unconstrained real;
/// `value = softplus(raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableScalar {
    pub raw: f64,
}

impl TrainableScalar {
    pub fn from_value(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "trainable scalar needs a positive finite initial value, got {value}"
            )));
        }
        Ok(Self {
            raw: autodiff::softplus_inv(value),
        })
    }

    pub fn value(&self) -> f64 {
        autodiff::softplus(self.raw)
    }

    /// Leaf for `raw` and the node holding `softplus(raw)`.
    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        let raw = tape.leaf(Tensor::scalar(self.raw));
        let value = tape.softplus(raw);
        (raw, value)
    }
}
