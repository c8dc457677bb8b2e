//! Multilayer perceptrons with reverse-mode gradients, exact Jacobians,
//! and the two optimizers used by the experiment harness.
//!
//! Networks are plain affine+activation stacks in 64-bit floats.
//! Nonlinearities apply to hidden layers only; the final layer is always
//! affine. Batched passes process a whole minibatch as one matrix per layer.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::linalg::{matmul_into, Matrix};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at flat index {index}")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative given pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(NetError::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `out x in` weight matrix.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

/// Per-layer gradients plus the gradient w.r.t. the network input.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Matrix,
}

impl NetGradients {
    pub fn zeros_like(net: &MlpNetwork, batch: usize) -> NetGradients {
        NetGradients {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.output_dim()]).collect(),
            input: Matrix::zeros(batch, net.input_dim),
        }
    }
}

/// Forward-pass cache: `activations[0]` is the input batch and
/// `activations[l+1]` / `pre_activations[l]` belong to layer `l`.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub activations: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl BatchCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

impl MlpNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<MlpNetwork> {
        if layers.is_empty() {
            return Err(NetError::ShapeMismatch("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(NetError::ShapeMismatch(format!(
                    "layer chain broken: {} -> {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(NetError::ShapeMismatch("bias length != layer output".into()));
            }
        }
        let input_dim = layers[0].input_dim();
        let output_dim = layers.last().unwrap().output_dim();
        Ok(MlpNetwork { layers, input_dim, output_dim })
    }

    /// Fresh network with uniform `+-sqrt(6/(fan_in+fan_out))` weights and
    /// zero biases. `hidden_activation` applies to hidden layers only;
    /// the final layer stays affine.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        rng: &mut impl Rng,
    ) -> MlpNetwork {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let fan_in = dims[i];
            let fan_out = dims[i + 1];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound));
            let activation = if i + 1 < dims.len() - 1 { hidden_activation } else { Activation::Linear };
            layers.push(Layer { weight, bias: vec![0.0; fan_out], activation });
        }
        MlpNetwork::from_layers(layers).expect("init produces a consistent chain")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<BatchCache> {
        if x.cols() != self.input_dim {
            return Err(NetError::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        let batch = x.rows();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let prev = activations.last().unwrap();
            let mut pre = Matrix::zeros(batch, layer.output_dim());
            // pre = prev * W^T + b
            for i in 0..batch {
                let arow = prev.row(i);
                let orow = pre.row_mut(i);
                for (j, b) in layer.bias.iter().enumerate() {
                    let wrow = layer.weight.row(j);
                    let mut acc = *b;
                    for k in 0..wrow.len() {
                        acc += arow[k] * wrow[k];
                    }
                    orow[j] = acc;
                }
            }
            let act = match layer.activation {
                Activation::Linear => pre.clone(),
                a => {
                    let mut out = pre.clone();
                    for v in out.data_mut() {
                        *v = a.apply(*v);
                    }
                    out
                }
            };
            pre_activations.push(pre);
            activations.push(act);
        }
        Ok(BatchCache { activations, pre_activations })
    }

    /// Deterministic single-sample evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
        let cache = self.forward_batch(&m)?;
        Ok(cache.output().row(0).to_vec())
    }

    /// Reverse-mode gradients for a batch. `upstream` holds
    /// `dLoss/d(output)` per sample; the result carries parameter gradients
    /// summed over the batch and the per-sample input gradient.
    pub fn backward_batch(&self, cache: &BatchCache, upstream: &Matrix) -> Result<NetGradients> {
        let batch = cache.activations[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.output_dim {
            return Err(NetError::ShapeMismatch(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                batch,
                self.output_dim
            )));
        }
        let mut grads = NetGradients::zeros_like(self, batch);
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre_activations[l];
            let act = &cache.activations[l + 1];
            let mut d_pre = g;
            if layer.activation != Activation::Linear {
                for i in 0..batch {
                    let prow = pre.row(i);
                    let yrow = act.row(i);
                    let drow = d_pre.row_mut(i);
                    for j in 0..drow.len() {
                        drow[j] *= layer.activation.derivative(prow[j], yrow[j]);
                    }
                }
            }
            // dW = d_pre^T * activations[l]
            grads.weights[l] = d_pre.matmul_at(&cache.activations[l]);
            let db = &mut grads.biases[l];
            for i in 0..batch {
                for (j, v) in d_pre.row(i).iter().enumerate() {
                    db[j] += v;
                }
            }
            // next upstream: d_pre * W
            let mut next = Matrix::zeros(batch, layer.input_dim());
            matmul_into(&d_pre, &layer.weight, &mut next);
            g = next;
        }
        grads.input = g;
        Ok(grads)
    }

    /// Single-sample gradients of a scalar loss with the given upstream
    /// gradient; returns parameter gradients and the input gradient.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(NetGradients, Vec<f64>)> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
        let cache = self.forward_batch(&xm)?;
        let um = Matrix::from_vec(1, upstream.len(), upstream.to_vec())
            .map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
        let grads = self.backward_batch(&cache, &um)?;
        let input = grads.input.row(0).to_vec();
        Ok((grads, input))
    }

    /// Exact Jacobian `d(output)/d(input)` at `z` via chained per-layer
    /// Jacobians.
    pub fn decoder_jacobian(&self, z: &[f64]) -> Result<Matrix> {
        let zm = Matrix::from_vec(1, z.len(), z.to_vec())
            .map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
        let cache = self.forward_batch(&zm)?;
        let mut jac: Option<Matrix> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            // rows of W scaled by the activation derivative at this sample
            let pre = cache.pre_activations[l].row(0);
            let act = cache.activations[l + 1].row(0);
            let mut local = layer.weight.clone();
            if layer.activation != Activation::Linear {
                for j in 0..local.rows() {
                    let d = layer.activation.derivative(pre[j], act[j]);
                    for v in local.row_mut(j) {
                        *v *= d;
                    }
                }
            }
            jac = Some(match jac {
                None => local,
                Some(prev) => local.matmul(&prev),
            });
        }
        Ok(jac.unwrap())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Appends all parameters (per layer: weights row-major, then bias).
    pub fn flatten_params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn set_params_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(NetError::ShapeMismatch(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.data_mut();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let blen = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        Ok(())
    }

    /// Appends gradients in the same order as `flatten_params_into`.
    pub fn flatten_grads_into(grads: &NetGradients, out: &mut Vec<f64>) {
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "mlp v1 layers {} input {} output {}", self.layers.len(), self.input_dim, self.output_dim)?;
        for l in &self.layers {
            writeln!(w, "layer {} {} {}", l.input_dim(), l.output_dim(), l.activation)?;
            write_floats(w, "w", l.weight.data())?;
            write_floats(w, "b", &l.bias)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(lines: &mut std::io::Lines<impl BufRead>) -> Result<MlpNetwork> {
        let header = next_line(lines)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != "mlp" || fields[1] != "v1" {
            return Err(NetError::Parse(format!("bad mlp header: '{header}'")));
        }
        let n_layers: usize = parse_field(fields[3], "layer count")?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = next_line(lines)?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 || f[0] != "layer" {
                return Err(NetError::Parse(format!("bad layer header: '{line}'")));
            }
            let in_dim: usize = parse_field(f[1], "layer input dim")?;
            let out_dim: usize = parse_field(f[2], "layer output dim")?;
            let activation: Activation = f[3].parse()?;
            let wdata = read_floats(lines, "w", in_dim * out_dim)?;
            let bias = read_floats(lines, "b", out_dim)?;
            let weight = Matrix::from_vec(out_dim, in_dim, wdata)
                .map_err(|e| NetError::Parse(e.to_string()))?;
            layers.push(Layer { weight, bias, activation });
        }
        MlpNetwork::from_layers(layers)
    }
}

fn next_line(lines: &mut std::io::Lines<impl BufRead>) -> Result<String> {
    match lines.next() {
        Some(l) => Ok(l?),
        None => Err(NetError::Parse("unexpected end of checkpoint".into())),
    }
}

fn parse_field<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| NetError::Parse(format!("cannot parse {what} from '{s}'")))
}

fn write_floats(w: &mut impl Write, tag: &str, vals: &[f64]) -> Result<()> {
    write!(w, "{tag}")?;
    for v in vals {
        // Display for f64 is shortest-round-trip, so parsing restores bits.
        write!(w, " {v}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn read_floats(lines: &mut std::io::Lines<impl BufRead>, tag: &str, count: usize) -> Result<Vec<f64>> {
    let line = next_line(lines)?;
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(t) if t == tag => {}
        other => return Err(NetError::Parse(format!("expected '{tag}' line, got {other:?}"))),
    }
    let vals: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
    let vals = vals.map_err(|e| NetError::Parse(format!("bad float in '{tag}' line: {e}")))?;
    if vals.len() != count {
        return Err(NetError::Parse(format!(
            "'{tag}' line has {} values, expected {count}",
            vals.len()
        )));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAGRAD_EPS: f64 = 1e-8;

/// Per-parameter optimizer state.
///
/// Adam keeps first/second moments; AdaGrad keeps squared-gradient sums in
/// the second-moment buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, param_count: usize) -> OptimizerState {
        let first = match kind {
            OptimizerKind::Adam => vec![0.0; param_count],
            OptimizerKind::Adagrad => Vec::new(),
        };
        OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: first,
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update in place. Non-finite gradients abort with the offending
    /// flat index so the caller can report which run diverged.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.second_moment.len() || grads.len() != params.len() {
            return Err(NetError::ShapeMismatch(format!(
                "optimizer state holds {} params, got {} params / {} grads",
                self.second_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient { index });
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    let m = &mut self.first_moment[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    let v = &mut self.second_moment[i];
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            OptimizerKind::Adagrad => {
                for i in 0..params.len() {
                    let g = grads[i];
                    let acc = &mut self.second_moment[i];
                    *acc += g * g;
                    params[i] -= lr * g / (*acc + ADAGRAD_EPS).sqrt();
                }
            }
        }
        Ok(())
    }
}
