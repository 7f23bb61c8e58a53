//! Minimal neural-network substrate: dense layers with hand-written
//! reverse mode, softmax cross-entropy, Adam and a finite-difference checker.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is `out_dim × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations recorded by [`DenseNet::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Layer activations of a whole batch, one column per example.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    batch: usize,
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl BatchTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self, example: usize) -> &[f64] {
        let d = self.output.nrows();
        &self.output.as_slice()[example * d..(example + 1) * d]
    }
}

/// Gradients with the same layout as the net's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            add_into(w, ow);
            add_into(b, ob);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl DenseNet {
    /// `dims` lists layer widths from input to output; `activations` has one
    /// entry per layer (`dims.len() - 1`).
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 0x9E37_79B9));
                Dense::xavier(w[0], w[1], act, &mut rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("net needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::DimensionMismatch {
                    expected: w[0].out_dim,
                    got: w[1].in_dim,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidArgument("layer parameter shape".into()));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer
                .preactivation(&x)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let z = layer.preactivation(&x);
            let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        Ok(Trace {
            inputs,
            pre,
            output: x,
        })
    }

    /// Reverse pass from `upstream = dLoss/dOutput`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(&trace.pre[li])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let x = &trace.inputs[li];
            let mut gw = vec![0.0; layer.weights.len()];
            for (row, d) in gw.chunks_exact_mut(layer.in_dim).zip(&delta) {
                if *d != 0.0 {
                    row.iter_mut().zip(x).for_each(|(g, v)| *g = d * v);
                }
            }
            let mut gin = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                if *d != 0.0 {
                    gin.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
                }
            }
            grads.push((gw, delta));
            delta_out = gin;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, delta_out))
    }

    /// Batched forward pass. `inputs` holds `batch` examples back to back.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<BatchTrace> {
        let d = self.input_dim();
        if batch == 0 || inputs.len() != d * batch {
            return Err(Error::DimensionMismatch {
                expected: d * batch.max(1),
                got: inputs.len(),
            });
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input"));
        }
        let mut x = DMatrix::from_column_slice(d, batch, inputs);
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = DMatrixView::from_slice(&layer.weights, layer.in_dim, layer.out_dim).transpose();
            let mut z = &w * &x;
            for mut col in z.column_iter_mut() {
                col.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
            }
            let next = z.map(|v| layer.activation.apply(v));
            layer_inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        Ok(BatchTrace {
            batch,
            inputs: layer_inputs,
            pre,
            output: x,
        })
    }

    /// Gradients summed over the batch, plus per-example input gradients laid
    /// out like the forward inputs. `upstream` is laid out like the output.
    pub fn backward_batch(&self, trace: &BatchTrace, upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let out = self.output_dim();
        if upstream.len() != out * trace.batch {
            return Err(Error::DimensionMismatch {
                expected: out * trace.batch,
                got: upstream.len(),
            });
        }
        let mut delta_out = DMatrix::from_column_slice(out, trace.batch, upstream);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let delta = delta_out.zip_map(&trace.pre[li], |g, z| g * layer.activation.derivative(z));
            let gw = &trace.inputs[li] * delta.transpose();
            let gb: Vec<f64> = delta.column_sum().iter().copied().collect();
            let wt = DMatrixView::from_slice(&layer.weights, layer.in_dim, layer.out_dim);
            delta_out = wt * &delta;
            grads.push((gw.as_slice().to_vec(), gb));
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, delta_out.as_slice().to_vec()))
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.param_tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            arch: self
                .layers
                .iter()
                .map(|l| LayerArch {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    activation: l.activation,
                })
                .collect(),
            params: self
                .layers
                .iter()
                .map(|l| l.weights.iter().chain(&l.bias).copied().collect())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        if ck.arch.len() != ck.params.len() {
            return Err(Error::Parse("arch/params layer count differ".into()));
        }
        let layers = ck
            .arch
            .iter()
            .zip(&ck.params)
            .map(|(a, p)| {
                let nw = a.in_dim * a.out_dim;
                if p.len() != nw + a.out_dim {
                    return Err(Error::Parse(format!(
                        "layer {}x{} expects {} params, found {}",
                        a.in_dim,
                        a.out_dim,
                        nw + a.out_dim,
                        p.len()
                    )));
                }
                Ok(Dense {
                    in_dim: a.in_dim,
                    out_dim: a.out_dim,
                    weights: p[..nw].to_vec(),
                    bias: p[nw..].to_vec(),
                    activation: a.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerArch {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Serialized form of one [`DenseNet`]: architecture plus one flat array per
/// layer (weights row-major, then bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub arch: Vec<LayerArch>,
    pub params: Vec<Vec<f64>>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `(−log p[target], p − onehot(target))`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of {} classes",
            logits.len()
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to every parameter each step.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    got: if p.len() != m.len() { p.len() } else { g.len() },
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradients"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_relative_error: f64,
    /// Parameter index where the maximum was observed.
    pub worst_index: usize,
    pub checked: usize,
}

/// Central-difference check of `analytic` against `loss` evaluated at
/// perturbed copies of `params`.
pub fn check_gradients(
    params: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + FD_STEP;
        let up = loss(&theta);
        theta[i] = orig - FD_STEP;
        let down = loss(&theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    GradCheckReport {
        passed: worst.0 < tolerance,
        max_relative_error: worst.0,
        worst_index: worst.1,
        checked: params.len(),
    }
}

/// Checks the parameter gradients of `net` for a loss defined on its output.
/// `loss_fn` returns `(loss, dLoss/dOutput)`.
pub fn gradient_check(
    net: &DenseNet,
    loss_fn: impl Fn(&[f64]) -> (f64, Vec<f64>),
    input: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trace = net.forward_trace(input)?;
    let (_, upstream) = loss_fn(&trace.output);
    let (grads, _) = net.backward(&trace, &upstream)?;
    gradient_check_with(net, &grads.flatten(), loss_fn, input, tolerance)
}

/// As [`gradient_check`] but against caller-supplied analytic gradients.
pub fn gradient_check_with(
    net: &DenseNet,
    analytic: &[f64],
    loss_fn: impl Fn(&[f64]) -> (f64, Vec<f64>),
    input: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    net.check_input(input)?;
    Ok(check_gradients(
        &net.flatten(),
        analytic,
        |flat| {
            let mut probe = net.clone();
            probe.set_flat(flat).expect("flat length");
            loss_fn(&probe.forward(input).expect("input dim")).0
        },
        tolerance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize, act: Activation) -> Dense {
        let mut l = Dense::zeros(n, n, act);
        for i in 0..n {
            l.weights[i * n + i] = 1.0;
        }
        l
    }

    #[test]
    fn forward_identity_relu() {
        let net = DenseNet::from_layers(vec![identity_layer(2, Activation::Relu)]).unwrap();
        assert_eq!(net.forward(&[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut l = Dense::zeros(3, 2, Activation::Relu);
        l.bias = vec![0.5, -0.5];
        let net = DenseNet::from_layers(vec![l]).unwrap();
        assert_eq!(net.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![0.5, 0.0]);
    }

    /// Straightforward matrix-math oracle using nested index loops.
    fn oracle_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &net.layers {
            let mut next = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = l.bias[o];
                for i in 0..l.in_dim {
                    s += l.weights[o * l.in_dim + i] * cur[i];
                }
                next[o] = match l.activation {
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => s,
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn batch_path_matches_per_example_sum() {
        let net = DenseNet::new(&[5, 7, 6, 3], &[Activation::Relu, Activation::Relu, Activation::Identity], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ups: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let bt = net.forward_batch(&xs.concat(), 4).unwrap();
        let (bg, bin) = net.backward_batch(&bt, &ups.concat()).unwrap();
        let mut sum = NetGrads::zeros_like(&net);
        for (b, (x, up)) in xs.iter().zip(&ups).enumerate() {
            let t = net.forward_trace(x).unwrap();
            for (a, e) in bt.output(b).iter().zip(&t.output) {
                assert!((a - e).abs() < 1e-12);
            }
            let (g, gin) = net.backward(&t, up).unwrap();
            sum.add_assign(&g);
            for (a, e) in bin[b * 5..(b + 1) * 5].iter().zip(&gin) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        for (a, e) in bg.flatten().iter().zip(sum.flatten()) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(net.forward_batch(&[0.0; 4], 1).is_err());
        assert!(net.backward_batch(&bt, &[0.0; 3]).is_err());
    }

    #[test]
    fn forward_matches_oracle() {
        let net = DenseNet::new(
            &[5, 7, 6, 3],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            11,
        )
        .unwrap();
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        for (a, b) in net.forward(&x).unwrap().iter().zip(oracle_forward(&net, &x)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_backward_is_outer_product() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], 1).unwrap();
        let x = [1.0, 2.0, -3.0];
        let trace = net.forward_trace(&x).unwrap();
        let (g, _) = net.backward(&trace, &[1.0, 1.0]).unwrap();
        assert_eq!(g.layers[0].0, vec![1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
        assert_eq!(g.layers[0].1, vec![1.0, 1.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut l = Dense::zeros(1, 1, Activation::Relu);
        l.weights[0] = 1.0;
        l.bias[0] = -5.0;
        let net = DenseNet::from_layers(vec![l]).unwrap();
        let trace = net.forward_trace(&[1.0]).unwrap();
        let (g, gin) = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
        assert_eq!(gin, vec![0.0]);
    }

    #[test]
    fn softmax_cross_entropy_cases() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 5], 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[1000.0, 0.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(softmax_cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        assert!(softmax_cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = [0.4, -1.3, 2.2, 0.05, -0.6];
        let (_, grad) = softmax_cross_entropy(&logits, 3).unwrap();
        let report = check_gradients(
            &logits,
            &grad,
            |l| softmax_cross_entropy(l, 3).unwrap().0,
            1e-5,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut opt = OptimizerState::new(AdamConfig::default(), &[2]);
        opt.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut p = vec![0.0, 0.0];
        let mut opt = OptimizerState::new(AdamConfig::default(), &[2]);
        for _ in 0..50 {
            opt.step(&mut [p.as_mut_slice()], &[&[0.5, -2.0]]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut x = vec![5.0f64];
        let mut opt = OptimizerState::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &[1],
        );
        let mut steps = 0;
        while x[0].abs() >= 0.1 && steps < 500 {
            let g = [2.0 * x[0]];
            opt.step(&mut [x.as_mut_slice()], &[&g]).unwrap();
            steps += 1;
        }
        assert!(x[0].abs() < 0.1, "x = {} after {steps} steps", x[0]);
    }

    #[test]
    fn adam_rejects_non_finite_without_touching_params() {
        let mut p = vec![1.0];
        let mut opt = OptimizerState::new(AdamConfig::default(), &[1]);
        assert!(opt.step(&mut [p.as_mut_slice()], &[&[f64::INFINITY]]).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(opt.step, 0);
    }

    fn half_sq(out: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * out.iter().map(|v| v * v).sum::<f64>(), out.to_vec())
    }

    #[test]
    fn gradient_check_passes_and_catches_mutation() {
        let net = DenseNet::new(
            &[4, 6, 5, 3],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            3,
        )
        .unwrap();
        let x = [0.5, -0.4, 0.8, 0.2];
        let report = gradient_check(&net, half_sq, &x, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");

        let trace = net.forward_trace(&x).unwrap();
        let (_, up) = half_sq(&trace.output);
        let (grads, _) = net.backward(&trace, &up).unwrap();
        let mut flat = grads.flatten();
        let idx = flat.iter().position(|g| g.abs() > 1e-3).unwrap();
        flat[idx] *= 2.0;
        let bad = gradient_check_with(&net, &flat, half_sq, &x, 1e-4).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, idx);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::new(&[3, 4, 2], &[Activation::Relu, Activation::Identity], 5).unwrap();
        let ck = net.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(DenseNet::from_checkpoint(&back).unwrap(), net);
        assert!(json.contains("\"relu\""));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = DenseNet::new(&[8, 4], &[Activation::Relu], 9).unwrap();
        let b = DenseNet::new(&[8, 4], &[Activation::Relu], 9).unwrap();
        let c = DenseNet::new(&[8, 4], &[Activation::Relu], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
