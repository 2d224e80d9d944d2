//! Feed-forward networks: dense layers with sigmoid/tanh/relu/linear hidden
//! activations and either a temperature-scaled softmax head (cross-entropy
//! loss) or a linear head (mean-squared-error loss, used for the regression
//! models elsewhere in the crate).
//!
//! Everything that consumes randomness — weight init, epoch shuffling,
//! dropout masks — draws from an explicitly seeded stream, so training a
//! given configuration twice produces bit-identical weights.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::RngCore as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ensure, Error, Result};
use crate::numerics::{matmul_nn, matmul_nt, matmul_tn, Matrix};
use crate::rng::{rng_from_seed, uniform01};

/// Floor applied inside `ln` when computing cross-entropy, so the reported
/// loss stays finite even for a confidently wrong prediction. Gradients are
/// those of the unfloored loss.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// Identity. As the final layer it switches the loss to MSE; it is also
    /// legal as a hidden activation (a stacked regression head becomes one).
    Linear,
    /// Temperature-scaled softmax; only allowed on the final layer.
    SoftmaxOutput,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::SoftmaxOutput => "softmax_output",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "linear" => Activation::Linear,
            "softmax_output" => Activation::SoftmaxOutput,
            other => return Err(Error::Format(format!("unknown activation tag {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation }
    }
}

/// Convenience for the common pattern "dims d0-d1-...-dk, one hidden
/// activation, softmax head".
pub fn classifier_specs(dims: &[usize], hidden: Activation) -> Result<Vec<LayerSpec>> {
    ensure!(dims.len() >= 2, "classifier_specs: need at least input and output dims");
    ensure!(hidden != Activation::SoftmaxOutput, "hidden activation cannot be softmax_output");
    let mut specs = Vec::new();
    for w in dims.windows(2) {
        specs.push(LayerSpec::new(w[0], w[1], hidden));
    }
    specs.last_mut().unwrap().activation = Activation::SoftmaxOutput;
    Ok(specs)
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// out_dim × in_dim, row i holds the weights of output unit i.
    pub(crate) w: Matrix,
    pub(crate) b: Vec<f64>,
    pub(crate) activation: Activation,
}

impl Layer {
    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    layers: Vec<Layer>,
    temperature: f64,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        ensure!(t.is_finite() && t > 0.0, "temperature must be positive and finite, got {t}");
        self.temperature = t;
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| LayerSpec::new(l.w.cols(), l.w.rows(), l.activation)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    ensure!(!specs.is_empty(), "model needs at least one layer");
    for (i, s) in specs.iter().enumerate() {
        ensure!(s.in_dim >= 1 && s.out_dim >= 1, "layer {i}: zero-sized dimension");
        if s.activation == Activation::SoftmaxOutput {
            ensure!(i == specs.len() - 1, "softmax_output only allowed on the final layer");
        }
        if i + 1 < specs.len() {
            ensure!(
                s.out_dim == specs[i + 1].in_dim,
                "layer {i} emits {} values but layer {} expects {}",
                s.out_dim,
                i + 1,
                specs[i + 1].in_dim
            );
        }
    }
    Ok(())
}

/// Glorot-uniform weights (±sqrt(6 / (in + out))), zero biases, temperature 1.
pub fn init_model(specs: &[LayerSpec], seed: u64) -> Result<MlpModel> {
    validate_specs(specs)?;
    let mut rng = rng_from_seed(seed);
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
        let mut w = Matrix::zeros(s.out_dim, s.in_dim);
        for v in w.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        layers.push(Layer { w, b: vec![0.0; s.out_dim], activation: s.activation });
    }
    Ok(MlpModel { layers, temperature: 1.0 })
}

/// Concatenate `first`'s layers (which must not contain a softmax) with
/// `second`'s. The result predicts `second`'s classes directly from `first`'s
/// input space and keeps `second`'s temperature.
pub fn stack(first: &MlpModel, second: &MlpModel) -> Result<MlpModel> {
    ensure!(
        first.layers.iter().all(|l| l.activation != Activation::SoftmaxOutput),
        "stack: first model must not contain softmax_output"
    );
    ensure!(
        first.output_dim() == second.input_dim(),
        "stack: first emits {} values but second expects {}",
        first.output_dim(),
        second.input_dim()
    );
    let mut layers = first.layers.clone();
    layers.extend(second.layers.iter().cloned());
    let model = MlpModel { layers, temperature: second.temperature };
    validate_specs(&model.specs())?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

fn affine(x: &Matrix, layer: &Layer) -> Matrix {
    let mut z = matmul_nt(x, &layer.w); // B×in · (out×in)^T
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.b) {
            *v += b;
        }
    }
    z
}

fn apply_activation(z: &mut Matrix, activation: Activation, temperature: f64) {
    match activation {
        Activation::Sigmoid => {
            for v in z.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
        Activation::Tanh => {
            for v in z.data_mut() {
                *v = v.tanh();
            }
        }
        Activation::Relu => {
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
        }
        Activation::Linear => {}
        Activation::SoftmaxOutput => {
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for v in row.iter_mut() {
                    *v /= temperature;
                    max = max.max(*v);
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
}

/// d(activation)/dz expressed through the activation value `a`.
fn activation_derivative(a: f64, activation: Activation) -> f64 {
    match activation {
        Activation::Sigmoid => a * (1.0 - a),
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Linear => 1.0,
        Activation::SoftmaxOutput => unreachable!("softmax handled jointly with the loss"),
    }
}

/// Inference-mode forward pass (no dropout). Softmax rows sum to 1 exactly up
/// to rounding; a linear head returns raw affine outputs.
pub fn forward(model: &MlpModel, x: &Matrix) -> Result<Matrix> {
    ensure!(
        x.cols() == model.input_dim(),
        "forward: input has {} features, model expects {}",
        x.cols(),
        model.input_dim()
    );
    let mut h = x.clone();
    for layer in &model.layers {
        let mut z = affine(&h, layer);
        apply_activation(&mut z, layer.activation, model.temperature);
        h = z;
    }
    Ok(h)
}

/// Per-layer parameter gradients, shaped exactly like the parameters.
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

struct LayerTrace {
    /// Input that the layer saw (post-dropout output of the previous layer).
    input: Matrix,
    /// Post-activation values before dropout.
    activated: Matrix,
    /// Inverted-dropout mask (entries 0 or 1/keep); `None` when keep == 1 or
    /// on the final layer.
    mask: Option<Matrix>,
}

/// Mean loss over the batch, parameter gradients, and the gradient of the
/// mean loss with respect to the input rows.
///
/// Dropout (train-time only) zeroes each hidden activation with probability
/// `1 - dropout_keep` and scales survivors by 1/keep; the masks are a pure
/// function of `dropout_seed`, so repeated calls are bit-identical and the
/// loss stays differentiable for finite-difference checks with the seed held
/// fixed. `dropout_keep = 1.0` consumes no randomness at all.
pub fn loss_and_gradients(
    model: &MlpModel,
    x: &Matrix,
    targets: &Matrix,
    dropout_keep: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients, Matrix)> {
    ensure!(x.rows() >= 1, "loss_and_gradients: empty batch");
    ensure!(
        x.cols() == model.input_dim(),
        "loss_and_gradients: input has {} features, model expects {}",
        x.cols(),
        model.input_dim()
    );
    ensure!(
        targets.rows() == x.rows() && targets.cols() == model.output_dim(),
        "loss_and_gradients: target shape {}x{} does not match batch {}x{}",
        targets.rows(),
        targets.cols(),
        x.rows(),
        model.output_dim()
    );
    ensure!(
        dropout_keep > 0.0 && dropout_keep <= 1.0,
        "dropout_keep = {dropout_keep} outside (0, 1]"
    );
    let final_act = model.layers.last().unwrap().activation;
    ensure!(
        matches!(final_act, Activation::SoftmaxOutput | Activation::Linear),
        "loss requires a softmax_output or linear final layer"
    );

    let batch = x.rows() as f64;
    let mut rng = rng_from_seed(dropout_seed);

    // Forward, recording what backward needs.
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(model.layers.len());
    let mut h = x.clone();
    for (li, layer) in model.layers.iter().enumerate() {
        let input = h;
        let mut a = affine(&input, layer);
        apply_activation(&mut a, layer.activation, model.temperature);
        let is_hidden = li + 1 < model.layers.len();
        let mask = if is_hidden && dropout_keep < 1.0 {
            let mut m = Matrix::zeros(a.rows(), a.cols());
            for v in m.data_mut() {
                if uniform01(&mut rng) < dropout_keep {
                    *v = 1.0 / dropout_keep;
                }
            }
            Some(m)
        } else {
            None
        };
        h = match &mask {
            Some(m) => {
                let mut dropped = a.clone();
                for (v, &mv) in dropped.data_mut().iter_mut().zip(m.data()) {
                    *v *= mv;
                }
                dropped
            }
            None => a.clone(),
        };
        traces.push(LayerTrace { input, activated: a, mask });
    }
    let output = &traces.last().unwrap().activated;

    // Loss and the gradient at the final pre-activation.
    let mut delta = Matrix::zeros(output.rows(), output.cols());
    let loss = match final_act {
        Activation::SoftmaxOutput => {
            let mut total = 0.0;
            for i in 0..output.rows() {
                for (j, (&p, &y)) in output.row(i).iter().zip(targets.row(i)).enumerate() {
                    if y != 0.0 {
                        total -= y * p.max(CE_FLOOR).ln();
                    }
                    delta.set(i, j, (p - y) / (batch * model.temperature));
                }
            }
            total / batch
        }
        Activation::Linear => {
            let k = output.cols() as f64;
            let mut total = 0.0;
            for i in 0..output.rows() {
                for (j, (&z, &y)) in output.row(i).iter().zip(targets.row(i)).enumerate() {
                    let diff = z - y;
                    total += diff * diff;
                    delta.set(i, j, 2.0 * diff / (batch * k));
                }
            }
            total / (batch * k)
        }
        _ => unreachable!(),
    };

    // Backward.
    let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let trace = &traces[li];
        // delta currently holds dL/dz for this layer.
        let dw = matmul_tn(&delta, &trace.input);
        let mut db = vec![0.0; layer.w.rows()];
        for i in 0..delta.rows() {
            for (acc, &d) in db.iter_mut().zip(delta.row(i)) {
                *acc += d;
            }
        }
        grads.push((dw, db));

        if li > 0 {
            let mut dh = matmul_nn(&delta, &layer.w); // dL/d(input of this layer)
            let below = &traces[li - 1];
            if let Some(mask) = &below.mask {
                for (v, &mv) in dh.data_mut().iter_mut().zip(mask.data()) {
                    *v *= mv;
                }
            }
            let prev_act = model.layers[li - 1].activation;
            for (v, &a) in dh.data_mut().iter_mut().zip(below.activated.data()) {
                *v *= activation_derivative(a, prev_act);
            }
            delta = dh;
        } else {
            delta = matmul_nn(&delta, &layer.w); // dL/dx
        }
    }
    grads.reverse();
    Ok((loss, Gradients { layers: grads }, delta))
}

/// Per-sample losses, per-sample input gradients, and the forward outputs,
/// with no batch averaging anywhere: row i of the gradient matrix is exactly
/// ∂Lᵢ/∂xᵢ. Because every row is computed independently, results are
/// bit-identical no matter how callers split their samples into batches —
/// which is what attack crafting relies on for reproducibility. No dropout,
/// no parameter gradients (skipping them roughly halves the backward cost).
pub fn input_gradients(
    model: &MlpModel,
    x: &Matrix,
    targets: &Matrix,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    ensure!(x.rows() >= 1, "input_gradients: empty batch");
    ensure!(
        x.cols() == model.input_dim(),
        "input_gradients: input has {} features, model expects {}",
        x.cols(),
        model.input_dim()
    );
    ensure!(
        targets.rows() == x.rows() && targets.cols() == model.output_dim(),
        "input_gradients: target shape mismatch"
    );
    let final_act = model.layers.last().unwrap().activation;
    ensure!(
        matches!(final_act, Activation::SoftmaxOutput | Activation::Linear),
        "input_gradients requires a softmax_output or linear final layer"
    );

    let mut activations: Vec<Matrix> = Vec::with_capacity(model.layers.len());
    let mut h = x.clone();
    for layer in &model.layers {
        let mut z = affine(&h, layer);
        apply_activation(&mut z, layer.activation, model.temperature);
        activations.push(z.clone());
        h = z;
    }
    let output = activations.last().unwrap().clone();

    let mut losses = Vec::with_capacity(x.rows());
    let mut delta = Matrix::zeros(output.rows(), output.cols());
    match final_act {
        Activation::SoftmaxOutput => {
            for i in 0..output.rows() {
                let mut l = 0.0;
                for (j, (&p, &y)) in output.row(i).iter().zip(targets.row(i)).enumerate() {
                    if y != 0.0 {
                        l -= y * p.max(CE_FLOOR).ln();
                    }
                    delta.set(i, j, (p - y) / model.temperature);
                }
                losses.push(l);
            }
        }
        Activation::Linear => {
            let k = output.cols() as f64;
            for i in 0..output.rows() {
                let mut l = 0.0;
                for (j, (&z, &y)) in output.row(i).iter().zip(targets.row(i)).enumerate() {
                    let diff = z - y;
                    l += diff * diff;
                    delta.set(i, j, 2.0 * diff / k);
                }
                losses.push(l / k);
            }
        }
        _ => unreachable!(),
    }

    for (li, layer) in model.layers.iter().enumerate().rev() {
        let mut dh = matmul_nn(&delta, &layer.w);
        if li > 0 {
            let prev_act = model.layers[li - 1].activation;
            for (v, &a) in dh.data_mut().iter_mut().zip(activations[li - 1].data()) {
                *v *= activation_derivative(a, prev_act);
            }
        }
        delta = dh;
    }
    Ok((losses, delta, output))
}

/// Per-row losses under the model's head: cross-entropy (with the usual
/// floor) for a softmax head, per-row mean squared error for a linear head.
pub fn per_sample_losses(model: &MlpModel, x: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    let out = forward(model, x)?;
    ensure!(
        targets.rows() == x.rows() && targets.cols() == out.cols(),
        "per_sample_losses: target shape mismatch"
    );
    let final_act = model.layers.last().unwrap().activation;
    let mut losses = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut l = 0.0;
        match final_act {
            Activation::SoftmaxOutput => {
                for (&p, &y) in out.row(i).iter().zip(targets.row(i)) {
                    if y != 0.0 {
                        l -= y * p.max(CE_FLOOR).ln();
                    }
                }
            }
            _ => {
                for (&z, &y) in out.row(i).iter().zip(targets.row(i)) {
                    l += (z - y) * (z - y);
                }
                l /= out.cols() as f64;
            }
        }
        losses.push(l);
    }
    Ok(losses)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose predicted argmax matches the label argmax.
pub fn accuracy_on(model: &MlpModel, x: &Matrix, labels: &Matrix) -> Result<f64> {
    ensure!(x.rows() >= 1, "accuracy_on: empty evaluation set");
    ensure!(labels.rows() == x.rows(), "accuracy_on: label count mismatch");
    let out = forward(model, x)?;
    let mut correct = 0usize;
    for i in 0..x.rows() {
        if argmax_row(out.row(i)) == argmax_row(labels.row(i)) {
            correct += 1;
        }
    }
    Ok(correct as f64 / x.rows() as f64)
}

pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64> {
    accuracy_on(model, data.samples(), data.labels())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    /// Adam with the customary defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Optimizer::Sgd { lr } => ensure!(lr > 0.0 && lr.is_finite(), "sgd lr must be > 0"),
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                ensure!(lr > 0.0 && lr.is_finite(), "adam lr must be > 0");
                ensure!((0.0..1.0).contains(&beta1), "adam beta1 outside [0,1)");
                ensure!((0.0..1.0).contains(&beta2), "adam beta2 outside [0,1)");
                ensure!(eps > 0.0, "adam eps must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    /// Keep probability for inverted dropout on hidden layers; 1.0 disables.
    pub dropout_keep: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(
            self.dropout_keep > 0.0 && self.dropout_keep <= 1.0,
            "dropout_keep = {} outside (0, 1]",
            self.dropout_keep
        );
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean of the per-batch losses, one entry per epoch.
    pub epoch_mean_loss: Vec<f64>,
}

/// Optimizer state: step count plus Adam moment estimates shaped like the
/// model parameters. SGD keeps no state beyond the step count.
pub(crate) struct OptState {
    opt: Optimizer,
    t: u64,
    m: Vec<(Matrix, Vec<f64>)>,
    v: Vec<(Matrix, Vec<f64>)>,
}

impl OptState {
    pub(crate) fn new(model: &MlpModel, opt: Optimizer) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.w.rows(), l.w.cols()), vec![0.0; l.b.len()]))
                .collect::<Vec<_>>()
        };
        match opt {
            Optimizer::Sgd { .. } => OptState { opt, t: 0, m: Vec::new(), v: Vec::new() },
            Optimizer::Adam { .. } => OptState { opt, t: 0, m: zeros(), v: zeros() },
        }
    }

    pub(crate) fn apply(&mut self, model: &mut MlpModel, grads: &Gradients) {
        self.t += 1;
        match self.opt {
            Optimizer::Sgd { lr } => {
                for (layer, (dw, db)) in model.layers.iter_mut().zip(&grads.layers) {
                    for (w, &g) in layer.w.data_mut().iter_mut().zip(dw.data()) {
                        *w -= lr * g;
                    }
                    for (b, &g) in layer.b.iter_mut().zip(db) {
                        *b -= lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *theta -= lr * mhat / (vhat.sqrt() + eps);
                };
                for (li, (layer, (dw, db))) in
                    model.layers.iter_mut().zip(&grads.layers).enumerate()
                {
                    let (mw, mb) = &mut self.m[li];
                    let (vw, vb) = &mut self.v[li];
                    for (((w, &g), m), v) in layer
                        .w
                        .data_mut()
                        .iter_mut()
                        .zip(dw.data())
                        .zip(mw.data_mut())
                        .zip(vw.data_mut())
                    {
                        update(w, g, m, v);
                    }
                    for (((b, &g), m), v) in
                        layer.b.iter_mut().zip(db).zip(mb.iter_mut()).zip(vb.iter_mut())
                    {
                        update(b, g, m, v);
                    }
                }
            }
        }
    }
}

/// Copy the given rows of `x` into a fresh matrix.
pub(crate) fn gather_rows(x: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), x.cols());
    for (dst, &idx) in indices.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(x.row(idx));
    }
    out
}

/// Minibatch training against arbitrary target rows (one-hot labels, soft
/// label distributions, or regression targets — the model head decides the
/// loss). One seeded stream drives both the per-epoch shuffle and the
/// per-batch dropout seeds. Zero epochs returns the model unchanged.
pub fn train_on(
    model: MlpModel,
    x: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_on_scaled(model, x, targets, cfg, 1.0)
}

/// `train_on` with every batch loss (and its gradients) multiplied by a
/// constant. Distillation trains at temperature T, which divides logit
/// gradients by T; scaling the loss by T restores the temperature-1 step
/// size, and without the compensation a high-T network barely moves.
pub(crate) fn train_on_scaled(
    model: MlpModel,
    x: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
    loss_scale: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(x.rows() >= 1, "train_on: empty training set");
    ensure!(loss_scale > 0.0 && loss_scale.is_finite(), "loss scale must be > 0");
    let mut model = model;
    let mut opt = OptState::new(&model, cfg.optimizer);
    let mut rng = rng_from_seed(cfg.seed);
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let n = x.rows();
    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let xb = gather_rows(x, chunk);
            let yb = gather_rows(targets, chunk);
            let dropout_seed = rng.next_u64();
            let (loss, mut grads, _) =
                loss_and_gradients(&model, &xb, &yb, cfg.dropout_keep, dropout_seed)?;
            if loss_scale != 1.0 {
                for (dw, db) in &mut grads.layers {
                    for g in dw.data_mut() {
                        *g *= loss_scale;
                    }
                    for g in db {
                        *g *= loss_scale;
                    }
                }
            }
            opt.apply(&mut model, &grads);
            loss_sum += loss * loss_scale;
            batches += 1;
        }
        let mean = loss_sum / batches as f64;
        epoch_mean_loss.push(mean);
        log::info!("epoch {}/{}: mean batch loss {mean:.6}", epoch + 1, cfg.epochs);
    }
    Ok(TrainOutcome { model, epoch_mean_loss })
}

/// `train_on` against a dataset's samples and one-hot labels.
pub fn train(model: MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_on(model, data.samples(), data.labels(), cfg)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(rename = "in")]
    in_dim: usize,
    out: usize,
    activation: String,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    temperature: f64,
    layers: Vec<LayerDoc>,
}

pub fn model_to_json_value(model: &MlpModel) -> serde_json::Value {
    let doc = ModelDoc {
        format_version: 1,
        temperature: model.temperature,
        layers: model
            .layers
            .iter()
            .map(|l| LayerDoc {
                in_dim: l.w.cols(),
                out: l.w.rows(),
                activation: l.activation.tag().to_string(),
                w: l.w.data().to_vec(),
                b: l.b.clone(),
            })
            .collect(),
    };
    serde_json::to_value(doc).expect("model serialization cannot fail")
}

pub fn model_from_json_value(value: serde_json::Value) -> Result<MlpModel> {
    let doc: ModelDoc =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("model document: {e}")))?;
    if doc.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported model format_version {}",
            doc.format_version
        )));
    }
    if !(doc.temperature.is_finite() && doc.temperature > 0.0) {
        return Err(Error::Format(format!("invalid temperature {}", doc.temperature)));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        if l.w.len() != l.in_dim * l.out {
            return Err(Error::Format(format!(
                "layer {i}: weight vector has {} entries, expected {}x{}",
                l.w.len(),
                l.out,
                l.in_dim
            )));
        }
        if l.b.len() != l.out {
            return Err(Error::Format(format!(
                "layer {i}: bias vector has {} entries, expected {}",
                l.b.len(),
                l.out
            )));
        }
        let w = Matrix::new(l.out, l.in_dim, l.w)
            .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
        if l.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("layer {i}: non-finite bias")));
        }
        layers.push(Layer { w, b: l.b, activation: Activation::from_tag(&l.activation)? });
    }
    let model = MlpModel { layers, temperature: doc.temperature };
    validate_specs(&model.specs()).map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn model_to_json(model: &MlpModel) -> String {
    serde_json::to_string_pretty(&model_to_json_value(model)).expect("serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<MlpModel> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
    model_from_json_value(value)
}
