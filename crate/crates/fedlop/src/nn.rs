//! Minimal deterministic dense-network engine.
//!
//! Everything here is double precision and allocation-happy by design: the
//! networks involved are tiny (a few thousand parameters) and strict
//! reproducibility matters more than throughput. Losses reduce by *sum* over
//! the batch, so gradients scale with batch size.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic RNG used everywhere in the crate.
pub type SeededRng = ChaCha8Rng;

/// Builds the crate's deterministic RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed
/// (splitmix64 finalizer per element). Used to derive independent,
/// reproducible streams for clients, rounds, and the server.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Hidden-layer activation. Only ReLU is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// What the last layer feeds. `Softmax` means the caller applies softmax in
/// the loss; the forward pass itself always emits raw affine outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputKind {
    Linear,
    Softmax,
}

/// Shape description of a dense network: units per layer, input first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output: OutputKind) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("layer_sizes must list at least input and output"));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("all layer sizes must be >= 1"));
        }
        Ok(MlpSpec { layer_sizes, activation: Activation::Relu, output })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total number of scalar parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One dense layer: row-major weights with shape `(out, in)` plus biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, `out_dim * in_dim` entries; row `o` holds output unit o.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// All parameters of one dense network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

/// Dense row-major matrix; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Single-row matrix borrowing semantics: clones the slice.
    pub fn from_row(row: &[f64]) -> Self {
        Matrix { rows: 1, cols: row.len(), data: row.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Horizontal concatenation of one row from each part.
    pub fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("hcat: row counts differ".into()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut ofs = 0;
            for m in parts {
                dst[ofs..ofs + m.cols].copy_from_slice(m.row(r));
                ofs += m.cols;
            }
        }
        Ok(out)
    }

    /// Copies columns `[start, start+width)` into a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "col_slice out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }
}

/// Per-layer intermediates of one forward pass, retained for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation `z = xW^T + b` per layer.
    pub pre: Vec<Matrix>,
    /// Post-activation per layer; the last entry equals the raw output.
    pub post: Vec<Matrix>,
}

/// Gradient of a scalar loss w.r.t. one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
}

/// Gradients for a whole network, shape-identical to its `MlpParams`,
/// plus (when produced by backprop) the gradient w.r.t. the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub d_input: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    d_weights: vec![0.0; l.weights.len()],
                    d_biases: vec![0.0; l.biases.len()],
                })
                .collect(),
            d_input: None,
        }
    }

    /// Adds `flat` (canonical flatten order) scaled by `scale` in place.
    pub fn add_flat(&mut self, flat: &[f64], scale: f64) -> Result<()> {
        let mut ofs = 0;
        for lg in &mut self.layers {
            for dw in &mut lg.d_weights {
                *dw += scale * flat[ofs];
                ofs += 1;
            }
            for db in &mut lg.d_biases {
                *db += scale * flat[ofs];
                ofs += 1;
            }
        }
        if ofs != flat.len() {
            return Err(Error::shape(format!(
                "flat gradient length {} != parameter count {}",
                flat.len(),
                ofs
            )));
        }
        Ok(())
    }
}

/// SGD-with-momentum state: velocity buffers shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Layer>,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, learning_rate: f64, momentum: f64) -> Self {
        let velocity = params
            .layers
            .iter()
            .map(|l| Layer {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weights: vec![0.0; l.weights.len()],
                biases: vec![0.0; l.biases.len()],
            })
            .collect();
        OptimizerState { learning_rate, momentum, velocity }
    }
}

/// Xavier-uniform initialization: weights from
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases zero.
pub fn mlp_init(spec: &MlpSpec, rng: &mut SeededRng) -> MlpParams {
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                in_dim: fan_in,
                out_dim: fan_out,
                weights,
                biases: vec![0.0; fan_out],
            }
        })
        .collect();
    MlpParams { layers }
}

/// Forward pass over a batch (rows = samples). Hidden layers apply ReLU;
/// the output layer is affine — softmax, if any, belongs to the loss.
pub fn mlp_forward(params: &MlpParams, batch: &Matrix) -> Result<(ForwardTrace, Matrix)> {
    let first = params
        .layers
        .first()
        .ok_or_else(|| Error::invalid("network has no layers"))?;
    if batch.cols() != first.in_dim {
        return Err(Error::shape(format!(
            "input has {} columns, network expects {}",
            batch.cols(),
            first.in_dim
        )));
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut current = batch.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = Matrix::zeros(current.rows(), layer.out_dim);
        for r in 0..current.rows() {
            let x = current.row(r);
            let zr = z.row_mut(r);
            for o in 0..layer.out_dim {
                let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.biases[o];
                for i in 0..layer.in_dim {
                    acc += wrow[i] * x[i];
                }
                zr[o] = acc;
            }
        }
        let activated = if li + 1 < n_layers {
            let mut a = z.clone();
            for v in &mut a.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            a
        } else {
            z.clone()
        };
        pre.push(z);
        current = activated.clone();
        post.push(activated);
    }
    let output = current;
    Ok((ForwardTrace { input: batch.clone(), pre, post }, output))
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Cross-entropy of softmax probabilities against a class index. Returns the
/// loss and the fused gradient w.r.t. the logits, `probs - one_hot(target)`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= probs.len() {
        return Err(Error::invalid(format!(
            "target class {} out of range for {} classes",
            target,
            probs.len()
        )));
    }
    let loss = -(probs[target].max(1e-12)).ln();
    let mut dlogits = probs.to_vec();
    dlogits[target] -= 1.0;
    Ok((loss, dlogits))
}

/// Exact reverse-mode gradients of a batch loss w.r.t. every parameter and
/// the network input. `dlogits` is the upstream gradient at the raw output;
/// the result sums over the batch.
pub fn mlp_backward(params: &MlpParams, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Gradients> {
    let n_layers = params.layers.len();
    if trace.pre.len() != n_layers || trace.post.len() != n_layers {
        return Err(Error::shape("trace layer count does not match params".into()));
    }
    let last = &params.layers[n_layers - 1];
    if dlogits.cols() != last.out_dim || dlogits.rows() != trace.input.rows() {
        return Err(Error::shape(format!(
            "dlogits is {}x{}, expected {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            trace.input.rows(),
            last.out_dim
        )));
    }

    let mut layer_grads: Vec<LayerGrad> = params
        .layers
        .iter()
        .map(|l| LayerGrad {
            d_weights: vec![0.0; l.weights.len()],
            d_biases: vec![0.0; l.biases.len()],
        })
        .collect();

    // delta = dLoss/d(pre-activation) of the current layer
    let mut delta = dlogits.clone();
    for li in (0..n_layers).rev() {
        let layer = &params.layers[li];
        let input: &Matrix = if li == 0 { &trace.input } else { &trace.post[li - 1] };
        let lg = &mut layer_grads[li];
        for r in 0..delta.rows() {
            let d = delta.row(r);
            let x = input.row(r);
            for o in 0..layer.out_dim {
                let g = d[o];
                lg.d_biases[o] += g;
                let wrow = &mut lg.d_weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    wrow[i] += g * x[i];
                }
            }
        }
        // gradient w.r.t. this layer's input
        let mut dprev = Matrix::zeros(delta.rows(), layer.in_dim);
        for r in 0..delta.rows() {
            let d = delta.row(r);
            let dp = dprev.row_mut(r);
            for o in 0..layer.out_dim {
                let g = d[o];
                let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    dp[i] += g * wrow[i];
                }
            }
        }
        if li == 0 {
            return Ok(Gradients { layers: layer_grads, d_input: Some(dprev) });
        }
        // chain through the previous layer's ReLU
        let pre_prev = &trace.pre[li - 1];
        for r in 0..dprev.rows() {
            let zp = pre_prev.row(r);
            let dp = dprev.row_mut(r);
            for i in 0..dp.len() {
                if zp[i] <= 0.0 {
                    dp[i] = 0.0;
                }
            }
        }
        delta = dprev;
    }
    unreachable!("loop always returns at layer 0")
}

/// Classic momentum update: `v' = momentum*v + g; w' = w - lr*v'`.
pub fn sgd_momentum_step(params: &mut MlpParams, grads: &Gradients, state: &mut OptimizerState) {
    for ((layer, grad), vel) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity)
    {
        for (w, (g, v)) in layer
            .weights
            .iter_mut()
            .zip(grad.d_weights.iter().zip(&mut vel.weights))
        {
            *v = state.momentum * *v + g;
            *w -= state.learning_rate * *v;
        }
        for (b, (g, v)) in layer
            .biases
            .iter_mut()
            .zip(grad.d_biases.iter().zip(&mut vel.biases))
        {
            *v = state.momentum * *v + g;
            *b -= state.learning_rate * *v;
        }
    }
}

/// Canonical flattening: layers first-to-last; within a layer the row-major
/// weight matrix, then the bias vector.
pub fn flatten_params(params: &MlpParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.param_count());
    for layer in &params.layers {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.biases);
    }
    out
}

/// Inverse of [`flatten_params`] given a shape template.
pub fn unflatten_params(template: &MlpParams, flat: &[f64]) -> Result<MlpParams> {
    if flat.len() != template.param_count() {
        return Err(Error::shape(format!(
            "flat vector has {} entries, network needs {}",
            flat.len(),
            template.param_count()
        )));
    }
    let mut layers = Vec::with_capacity(template.layers.len());
    let mut ofs = 0;
    for l in &template.layers {
        let nw = l.weights.len();
        let nb = l.biases.len();
        layers.push(Layer {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weights: flat[ofs..ofs + nw].to_vec(),
            biases: flat[ofs + nw..ofs + nw + nb].to_vec(),
        });
        ofs += nw + nb;
    }
    Ok(MlpParams { layers })
}

/// Overwrites `params` in place from a canonical flat vector.
pub fn assign_from_flat(params: &mut MlpParams, flat: &[f64]) -> Result<()> {
    *params = unflatten_params(params, flat)?;
    Ok(())
}

/// Central-difference gradient oracle: `(f(w+eps) - f(w-eps)) / (2 eps)`
/// per coordinate. Test utility; independent of the backprop path.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &MlpParams, eps: f64) -> Gradients
where
    F: Fn(&MlpParams) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut grads = Gradients::zeros_like(params);
    let mut probe = params.clone();
    for li in 0..params.layers.len() {
        for wi in 0..params.layers[li].weights.len() {
            let orig = probe.layers[li].weights[wi];
            probe.layers[li].weights[wi] = orig + eps;
            let up = loss_fn(&probe);
            probe.layers[li].weights[wi] = orig - eps;
            let down = loss_fn(&probe);
            probe.layers[li].weights[wi] = orig;
            grads.layers[li].d_weights[wi] = (up - down) / (2.0 * eps);
        }
        for bi in 0..params.layers[li].biases.len() {
            let orig = probe.layers[li].biases[bi];
            probe.layers[li].biases[bi] = orig + eps;
            let up = loss_fn(&probe);
            probe.layers[li].biases[bi] = orig - eps;
            let down = loss_fn(&probe);
            probe.layers[li].biases[bi] = orig;
            grads.layers[li].d_biases[bi] = (up - down) / (2.0 * eps);
        }
    }
    grads
}

/// Max relative error between two gradient sets, with an absolute floor so
/// near-zero coordinates don't blow the ratio up.
pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la
            .d_weights
            .iter()
            .chain(&la.d_biases)
            .zip(lb.d_weights.iter().chain(&lb.d_biases))
        {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
