//! Online adaptation of a deployed network with backpropagation through time
//! (layer-sequential, transposed crossbar reads) or direct feedback alignment
//! (layer-parallel, fixed random feedback crossbars).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deployment::HardwareDeployment;
use crate::error::{Error, Result};
use crate::hwmodel::{self, CostReport, EventTally, Mode, Phase, Workload};
use crate::snn::{argmax, forward, surrogate_grad, Activity, DenseSynapses, ForwardPass, InputBatch, NetworkSpec, Synapses};
use crate::tensor::Matrix;

/// Fixed random matrices `B_l` (`classes × width_l`), one per hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMatrices {
    pub b: Vec<Matrix>,
}

impl FeedbackMatrices {
    /// Entries uniform on `[−1/√classes, +1/√classes]`.
    pub fn random(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = net.classes();
        let a = 1.0 / (classes as f64).sqrt();
        let b = (0..net.hidden_layers())
            .map(|l| Matrix::from_fn(classes, net.widths[l + 1], |_, _| rng.random_range(-a..=a)))
            .collect();
        Self { b }
    }

    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.b.len() != net.hidden_layers() {
            return Err(Error::dim(net.hidden_layers(), self.b.len(), "feedback matrices"));
        }
        for (l, b) in self.b.iter().enumerate() {
            if b.shape() != (net.classes(), net.widths[l + 1]) {
                return Err(Error::Dimension(format!(
                    "B_{l} is {}×{}, expected {}×{}",
                    b.rows(),
                    b.cols(),
                    net.classes(),
                    net.widths[l + 1]
                )));
            }
        }
        Ok(())
    }
}

/// Computes the DFA projection `e · B_l`.
pub trait FeedbackPath {
    fn project(&self, layer: usize, e: &[f64], tally: &mut EventTally) -> Result<Vec<f64>>;
}

/// Exact full-precision projection.
impl FeedbackPath for FeedbackMatrices {
    fn project(&self, layer: usize, e: &[f64], _tally: &mut EventTally) -> Result<Vec<f64>> {
        self.b
            .get(layer)
            .ok_or_else(|| Error::State(format!("no feedback matrix for layer {layer}")))?
            .vecmat(e)
    }
}

/// Projection through the programmed feedback crossbars.
impl FeedbackPath for HardwareDeployment {
    fn project(&self, layer: usize, e: &[f64], tally: &mut EventTally) -> Result<Vec<f64>> {
        self.project_feedback(layer, e, tally)
    }
}

/// When the DFA output error is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfaErrorTiming {
    /// One error from the time-averaged logits, projected once per sample.
    #[default]
    PerBatch,
    /// A fresh error from each timestep's logits, projected every timestep.
    PerTimestep,
}

/// Temporal credit assignment in BP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpTemporal {
    /// Full BPTT through the membrane leak.
    #[default]
    Full,
    /// Per-timestep spatial gradients only.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dfa_error: DfaErrorTiming,
    pub bp_temporal: BpTemporal,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dfa,
            learning_rate: 0.05,
            batch_size: 50,
            epochs: 25,
            seed: 0,
            dfa_error: DfaErrorTiming::PerBatch,
            bp_temporal: BpTemporal::Full,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be a non-negative number".into()));
        }
        Ok(())
    }
}

impl FromStr for DfaErrorTiming {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_batch" => Ok(Self::PerBatch),
            "per_timestep" => Ok(Self::PerTimestep),
            _ => Err(Error::Config(format!("unknown DFA error timing `{s}`"))),
        }
    }
}

impl fmt::Display for DfaErrorTiming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerBatch => "per_batch",
            Self::PerTimestep => "per_timestep",
        })
    }
}

/// Inputs with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub inputs: InputBatch,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: InputBatch, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::Schema(format!(
                "{} samples but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledData {
        LabeledData {
            inputs: self.inputs.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Weight gradients and per-layer error signals for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    /// `ΔW_l`, same shapes as the weights, already divided by the batch size.
    pub dw: Vec<Matrix>,
    /// Time-summed local error `Σ_t δ_l^t`, `[batch × width_l]` per hidden layer.
    pub deltas: Vec<Matrix>,
}

impl GradientBundle {
    fn zeros(net: &NetworkSpec, batch: usize) -> Self {
        Self {
            dw: (0..net.weight_layers())
                .map(|l| {
                    let (r, c) = net.layer_shape(l);
                    Matrix::zeros(r, c)
                })
                .collect(),
            deltas: (0..net.hidden_layers())
                .map(|l| Matrix::zeros(batch, net.widths[l + 1]))
                .collect(),
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / s).collect()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(rows, labels.len(), "labels"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `softmax(logits) − onehot(labels)`, one row per sample.
pub fn output_error(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let mut e = Matrix::zeros(logits.rows(), logits.cols());
    for (b, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(b));
        let row = e.row_mut(b);
        row.copy_from_slice(&p);
        row[y] -= 1.0;
    }
    Ok(e)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let z = logits.row(b);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    Ok(total / labels.len() as f64)
}

/// Output error fed to the DFA projections.
#[derive(Clone, Debug, PartialEq)]
pub enum ErrorSignal {
    /// From time-averaged logits.
    Averaged(Matrix),
    /// `e^t` per timestep, plus the averaged error used by the classifier.
    PerTimestep { steps: Vec<Matrix>, averaged: Matrix },
}

impl ErrorSignal {
    pub fn new(timing: DfaErrorTiming, fwd: &ForwardPass, labels: &[usize]) -> Result<Self> {
        let averaged = output_error(&fwd.logits_mean, labels)?;
        Ok(match timing {
            DfaErrorTiming::PerBatch => ErrorSignal::Averaged(averaged),
            DfaErrorTiming::PerTimestep => {
                let batch = fwd.logits_mean.rows();
                let steps = (0..fwd.timesteps)
                    .map(|t| {
                        let z = Matrix::from_fn(batch, fwd.classes, |b, c| fwd.logits_at(t, b)[c]);
                        output_error(&z, labels)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ErrorSignal::PerTimestep { steps, averaged }
            }
        })
    }

    pub fn averaged(&self) -> &Matrix {
        match self {
            ErrorSignal::Averaged(e) => e,
            ErrorSignal::PerTimestep { averaged, .. } => averaged,
        }
    }
}

fn check_trace(net: &NetworkSpec, inputs: &InputBatch, fwd: &ForwardPass, e: &Matrix) -> Result<()> {
    if fwd.traces.len() != net.hidden_layers() {
        return Err(Error::State(format!(
            "forward pass holds {} traces, network has {} hidden layers",
            fwd.traces.len(),
            net.hidden_layers()
        )));
    }
    if fwd.logits_mean.rows() != inputs.batch() || e.shape() != (inputs.batch(), net.classes()) {
        return Err(Error::State("error signal and forward pass do not match the batch".into()));
    }
    if fwd.timesteps != net.timesteps {
        return Err(Error::State("forward pass timesteps differ from the network".into()));
    }
    Ok(())
}

/// Time-averaged input of weight layer `l` for sample `b`.
fn mean_input(fwd: &ForwardPass, inputs: &InputBatch, l: usize, b: usize) -> Vec<f64> {
    let steps = fwd.timesteps;
    let mut m = fwd.layer_input(inputs, l, 0, b).to_vec();
    for t in 1..steps {
        for (a, x) in m.iter_mut().zip(fwd.layer_input(inputs, l, t, b)) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|v| *v /= steps as f64);
    m
}

/// Classifier gradient `(mean_t x_L)ᵀ e / batch`, shared by both rules.
fn classifier_gradient(
    net: &NetworkSpec,
    inputs: &InputBatch,
    fwd: &ForwardPass,
    e: &Matrix,
    synapses: &dyn Synapses,
    out: &mut GradientBundle,
    tally: &mut EventTally,
) {
    let last = net.weight_layers() - 1;
    let batch = inputs.batch();
    let inv = 1.0 / batch as f64;
    let (in_dim, out_dim) = net.layer_shape(last);
    for b in 0..batch {
        let xm = mean_input(fwd, inputs, last, b);
        out.dw[last].add_outer(&xm, e.row(b), inv);
    }
    synapses.account(
        Phase::Update,
        Activity::GradientMacs {
            layer: last,
            macs: (batch * (in_dim * out_dim + in_dim * net.timesteps)) as u64,
        },
        tally,
    );
}

/// Accumulates `Σ_t x^tᵀ δ^t / batch` for hidden layer `l`, sample `b`.
fn accumulate_hidden(
    fwd: &ForwardPass,
    inputs: &InputBatch,
    l: usize,
    b: usize,
    deltas: &[Vec<f64>],
    inv_batch: f64,
    out: &mut GradientBundle,
) {
    let sum_row = out.deltas[l].row_mut(b);
    for d in deltas {
        for (s, v) in sum_row.iter_mut().zip(d) {
            *s += v;
        }
    }
    for (t, d) in deltas.iter().enumerate() {
        out.dw[l].add_outer(fwd.layer_input(inputs, l, t, b), d, inv_batch);
    }
}

fn charge_hidden_update(net: &NetworkSpec, l: usize, batch: usize, synapses: &dyn Synapses, tally: &mut EventTally) {
    let (in_dim, out_dim) = net.layer_shape(l);
    let steps = net.timesteps as u64;
    let batch = batch as u64;
    synapses.account(
        Phase::Backward,
        Activity::Neuron {
            layer: l,
            ops: batch * steps * out_dim as u64,
        },
        tally,
    );
    synapses.account(
        Phase::Update,
        Activity::GradientMacs {
            layer: l,
            macs: batch * steps * (in_dim * out_dim) as u64,
        },
        tally,
    );
    synapses.account(
        Phase::Update,
        Activity::Transfer {
            layer: l,
            elements: batch * steps * out_dim as u64,
            bits: 8,
        },
        tally,
    );
    synapses.account(
        Phase::Update,
        Activity::Transfer {
            layer: l,
            elements: batch * steps * in_dim as u64,
            bits: if l == 0 { 8 } else { 1 },
        },
        tally,
    );
}

/// DFA gradients, hidden layers in natural order.
pub fn dfa_backward(
    net: &NetworkSpec,
    inputs: &InputBatch,
    fwd: &ForwardPass,
    error: &ErrorSignal,
    feedback: &dyn FeedbackPath,
    synapses: &dyn Synapses,
    tally: &mut EventTally,
) -> Result<GradientBundle> {
    let order: Vec<usize> = (0..net.hidden_layers()).collect();
    dfa_backward_ordered(net, inputs, fwd, error, feedback, synapses, &order, tally)
}

/// DFA gradients with hidden layers visited in `order`. Each layer depends only
/// on the output error and its own trace, so any permutation gives identical bits.
#[allow(clippy::too_many_arguments)]
pub fn dfa_backward_ordered(
    net: &NetworkSpec,
    inputs: &InputBatch,
    fwd: &ForwardPass,
    error: &ErrorSignal,
    feedback: &dyn FeedbackPath,
    synapses: &dyn Synapses,
    order: &[usize],
    tally: &mut EventTally,
) -> Result<GradientBundle> {
    let e = error.averaged();
    check_trace(net, inputs, fwd, e)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..net.hidden_layers()).collect::<Vec<_>>() {
        return Err(Error::Input("layer order must be a permutation of the hidden layers".into()));
    }
    let batch = inputs.batch();
    let steps = net.timesteps;
    let classes = net.classes();
    let inv = 1.0 / batch as f64;
    let mut out = GradientBundle::zeros(net, batch);

    for &l in order {
        let lif = &net.lif[l];
        let width = net.widths[l + 1];
        let trace = &fwd.traces[l];
        let projections_per_sample = match error {
            ErrorSignal::Averaged(_) => 1,
            ErrorSignal::PerTimestep { .. } => steps,
        };
        for b in 0..batch {
            let fixed = match error {
                ErrorSignal::Averaged(e) => Some(feedback.project(l, e.row(b), tally)?),
                ErrorSignal::PerTimestep { .. } => None,
            };
            let mut deltas = Vec::with_capacity(steps);
            for t in 0..steps {
                let p = match (&fixed, error) {
                    (Some(p), _) => p.clone(),
                    (None, ErrorSignal::PerTimestep { steps, .. }) => feedback.project(l, steps[t].row(b), tally)?,
                    (None, ErrorSignal::Averaged(_)) => unreachable!("averaged error always projects up front"),
                };
                if p.len() != width {
                    return Err(Error::dim(width, p.len(), "feedback projection"));
                }
                let v = trace.potentials(t, b);
                deltas.push(p.iter().zip(v).map(|(pi, &vi)| pi * surrogate_grad(vi, lif)).collect::<Vec<_>>());
            }
            accumulate_hidden(fwd, inputs, l, b, &deltas, inv, &mut out);
        }
        let n = (batch * projections_per_sample) as u64;
        synapses.account(
            Phase::Backward,
            Activity::Transfer {
                layer: l,
                elements: n * classes as u64,
                bits: 8,
            },
            tally,
        );
        synapses.account(
            Phase::Backward,
            Activity::Transfer {
                layer: l,
                elements: n * width as u64,
                bits: 8,
            },
            tally,
        );
        charge_hidden_update(net, l, batch, synapses, tally);
    }
    classifier_gradient(net, inputs, fwd, e, synapses, &mut out, tally);
    Ok(out)
}

/// BPTT gradients, classifier first, errors moving down through transposed reads.
///
/// Per hidden layer: `dv^t = g^t ⊙ σ'(v^t) + λ(1 − o^t)·dv^{t+1}`, where the reset
/// is excluded from the gradient and `g^t` is the error arriving at the layer's
/// spikes. With [`BpTemporal::Spatial`] the leak term is dropped.
pub fn bp_backward(
    net: &NetworkSpec,
    inputs: &InputBatch,
    fwd: &ForwardPass,
    e: &Matrix,
    synapses: &dyn Synapses,
    temporal: BpTemporal,
    tally: &mut EventTally,
) -> Result<GradientBundle> {
    check_trace(net, inputs, fwd, e)?;
    let batch = inputs.batch();
    let steps = net.timesteps;
    let inv = 1.0 / batch as f64;
    let last = net.weight_layers() - 1;
    let mut out = GradientBundle::zeros(net, batch);

    for b in 0..batch {
        if last == 0 {
            break;
        }
        // Error at the top hidden layer's spikes: the classifier averages over T.
        let top = synapses.propagate_back(last, e.row(b), tally)?;
        let top: Vec<f64> = top.iter().map(|v| v / steps as f64).collect();
        let mut g: Vec<Vec<f64>> = vec![top; steps];
        for l in (0..last).rev() {
            let lif = &net.lif[l];
            let trace = &fwd.traces[l];
            let width = net.widths[l + 1];
            let mut dv = vec![vec![0.0; width]; steps];
            for t in (0..steps).rev() {
                let v = trace.potentials(t, b);
                let o = trace.spikes(t, b);
                for i in 0..width {
                    let mut d = g[t][i] * surrogate_grad(v[i], lif);
                    if temporal == BpTemporal::Full && t + 1 < steps {
                        d += lif.leak * (1.0 - o[i]) * dv[t + 1][i];
                    }
                    dv[t][i] = d;
                }
            }
            if l > 0 {
                g = dv
                    .iter()
                    .map(|d| synapses.propagate_back(l, d, tally))
                    .collect::<Result<Vec<_>>>()?;
            }
            accumulate_hidden(fwd, inputs, l, b, &dv, inv, &mut out);
        }
    }

    let classes = net.classes() as u64;
    if last > 0 {
        let top_width = net.widths[last] as u64;
        synapses.account(
            Phase::Backward,
            Activity::Transfer {
                layer: last,
                elements: batch as u64 * (classes + top_width),
                bits: 8,
            },
            tally,
        );
    }
    for l in (0..last).rev() {
        let (in_dim, out_dim) = net.layer_shape(l);
        let per_step = if l > 0 { in_dim + out_dim } else { 0 } as u64;
        synapses.account(
            Phase::Backward,
            Activity::Transfer {
                layer: l,
                elements: (batch * steps) as u64 * per_step,
                bits: 8,
            },
            tally,
        );
        charge_hidden_update(net, l, batch, synapses, tally);
    }
    classifier_gradient(net, inputs, fwd, e, synapses, &mut out, tally);
    Ok(out)
}

/// Plain SGD on the full-precision shadow weights. Nothing is modified unless
/// every gradient is finite and correctly shaped.
pub fn apply_update(weights: &mut [Matrix], grads: &GradientBundle, lr: f64) -> Result<()> {
    if weights.len() != grads.dw.len() {
        return Err(Error::dim(weights.len(), grads.dw.len(), "gradient layers"));
    }
    for (l, (w, g)) in weights.iter().zip(&grads.dw).enumerate() {
        if w.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient {l} shape differs from weights")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in layer {l}")));
        }
    }
    for (w, g) in weights.iter_mut().zip(&grads.dw) {
        for (a, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a -= lr * d;
        }
    }
    Ok(())
}

/// Classification accuracy in percent; inference cost is not charged.
pub fn evaluate(net: &NetworkSpec, synapses: &dyn Synapses, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    const CHUNK: usize = 128;
    let mut correct = 0usize;
    let mut scratch = EventTally::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let part = data.select(chunk);
        let fwd = forward(net, synapses, &part.inputs, &mut scratch)?;
        correct += (0..part.len())
            .filter(|&b| argmax(fwd.logits_mean.row(b)) == part.labels[b])
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Mean loss and accuracy (percent) of a dataset.
pub fn loss_and_accuracy(net: &NetworkSpec, synapses: &dyn Synapses, data: &LabeledData) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut scratch = EventTally::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let part = data.select(chunk);
        let fwd = forward(net, synapses, &part.inputs, &mut scratch)?;
        loss += cross_entropy(&fwd.logits_mean, &part.labels)? * part.len() as f64;
        correct += fwd
            .predictions()
            .iter()
            .zip(&part.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// One epoch's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// On-chip energy, DRAM constant excluded.
    pub energy_mj: f64,
    pub latency_ms: f64,
    pub cells_written: usize,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub history: Vec<EpochRecord>,
    /// Mean per-epoch cost; energy and latency are zero when no epoch ran.
    pub report: CostReport,
    pub epoch_reports: Vec<CostReport>,
}

fn workload(net: &NetworkSpec, cfg: &AdaptConfig, samples: usize) -> Workload {
    Workload {
        architecture: net.architecture(),
        timesteps: net.timesteps,
        batch_size: cfg.batch_size,
        batches_per_epoch: samples.div_ceil(cfg.batch_size),
    }
}

/// Runs one training step on `batch` and returns the mean loss.
pub fn train_step(
    deployment: &mut HardwareDeployment,
    weights: &mut [Matrix],
    batch: &LabeledData,
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
    tally: &mut EventTally,
) -> Result<(f64, usize)> {
    let net = deployment.net().clone();
    let fwd = forward(&net, &*deployment, &batch.inputs, tally)?;
    let loss = cross_entropy(&fwd.logits_mean, &batch.labels)?;
    deployment.account(
        Phase::Backward,
        Activity::OutputError {
            elements: (batch.len() * net.classes()) as u64,
        },
        tally,
    );
    let grads = match cfg.mode {
        Mode::Dfa => {
            let err = ErrorSignal::new(cfg.dfa_error, &fwd, &batch.labels)?;
            dfa_backward(&net, &batch.inputs, &fwd, &err, &*deployment, &*deployment, tally)?
        }
        Mode::Bp => {
            let e = output_error(&fwd.logits_mean, &batch.labels)?;
            bp_backward(&net, &batch.inputs, &fwd, &e, &*deployment, cfg.bp_temporal, tally)?
        }
    };
    apply_update(weights, &grads, cfg.learning_rate)?;
    let written = deployment.reprogram(weights, rng, tally)?;
    Ok((loss, written))
}

/// Adapts a programmed deployment online. `weights` are the full-precision
/// shadow copies and are updated in place; `rng` drives device programming.
pub fn adapt(
    deployment: &mut HardwareDeployment,
    weights: &mut [Matrix],
    train: &LabeledData,
    test: &LabeledData,
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if deployment.mode() != cfg.mode {
        return Err(Error::Mode {
            mode: deployment.mode().to_string(),
            what: format!("cannot run {} adaptation", cfg.mode),
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("adaptation needs non-empty train and test sets".into()));
    }
    let net = deployment.net().clone();
    let work = workload(&net, cfg, train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0d_a7a5_0001);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut epoch_reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut tally = EventTally::new();
        let mut loss_sum = 0.0;
        let mut written = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let (loss, w) = train_step(deployment, weights, &batch, cfg, rng, &mut tally)
                .map_err(|e| e.context(format!("epoch {epoch}")))?;
            loss_sum += loss * chunk.len() as f64;
            written += w;
        }
        let accuracy = evaluate(&net, &*deployment, test)?;
        let report = hwmodel::estimate(&tally, deployment.plan(), deployment.hardware(), work.clone())?;
        log::info!(
            "{} epoch {epoch}: loss {:.4}, test accuracy {accuracy:.2}%",
            cfg.mode,
            loss_sum / train.len() as f64
        );
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy: accuracy,
            energy_mj: report.energy.on_chip(),
            latency_ms: report.latency_ms(),
            cells_written: written,
        });
        epoch_reports.push(report);
    }

    let report = if epoch_reports.is_empty() {
        CostReport {
            mode: cfg.mode,
            workload: work,
            energy: Default::default(),
            latency: Default::default(),
            area: hwmodel::estimate_area(deployment.plan(), deployment.hardware(), cfg.mode),
            accuracy: None,
        }
    } else {
        CostReport::mean(&epoch_reports)?
    };
    Ok(AdaptOutcome {
        history,
        report,
        epoch_reports,
    })
}

/// Settings of the full-precision software trainer that produces checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Initial weights are uniform on `±init_gain/√fan_in`.
    pub init_gain: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            init_gain: 2.0,
        }
    }
}

pub fn init_weights(net: &NetworkSpec, gain: f64, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..net.weight_layers())
        .map(|l| {
            let (r, c) = net.layer_shape(l);
            let a = gain / (r as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.random_range(-a..=a))
        })
        .collect()
}

/// Noise-free BPTT training in software with SGD and momentum. Returns the
/// weights and the mean training loss of each epoch.
pub fn pretrain(net: &NetworkSpec, train: &LabeledData, cfg: &PretrainConfig) -> Result<(Vec<Matrix>, Vec<f64>)> {
    net.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut weights = init_weights(net, cfg.init_gain, cfg.seed);
    let mut velocity: Vec<Matrix> = weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut scratch = EventTally::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let syn = DenseSynapses(&weights);
            let fwd = forward(net, &syn, &batch.inputs, &mut scratch)?;
            total += cross_entropy(&fwd.logits_mean, &batch.labels)? * chunk.len() as f64;
            let e = output_error(&fwd.logits_mean, &batch.labels)?;
            let g = bp_backward(net, &batch.inputs, &fwd, &e, &syn, BpTemporal::Full, &mut scratch)?;
            for ((w, v), d) in weights.iter_mut().zip(&mut velocity).zip(&g.dw) {
                if !d.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in pretraining epoch {epoch}")));
                }
                for ((wi, vi), di) in w.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(d.as_slice()) {
                    *vi = cfg.momentum * *vi + di;
                    *wi -= cfg.learning_rate * *vi;
                }
            }
            scratch = EventTally::new();
        }
        let mean = total / train.len() as f64;
        log::debug!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok((weights, losses))
}

const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointLayer {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    architecture: String,
    timesteps: usize,
    lif: Vec<crate::snn::LifParams>,
    /// Software test accuracy measured when the checkpoint was written.
    software_accuracy: Option<f64>,
    layers: Vec<CheckpointLayer>,
}

/// Pre-trained weights with the network they belong to.
///
/// JSON layout: `format_version`, `architecture` (e.g. `"6-64-6"`),
/// `timesteps`, `lif` (one `{leak, threshold, surrogate_width}` per hidden
/// layer), `software_accuracy`, and `layers`: `{name: "fc{l}", rows, cols,
/// data}` with `data` row-major, `rows = fan-in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkSpec,
    pub weights: Vec<Matrix>,
    pub software_accuracy: Option<f64>,
}

impl Checkpoint {
    pub fn new(net: NetworkSpec, weights: Vec<Matrix>, software_accuracy: Option<f64>) -> Result<Self> {
        net.validate()?;
        net.check_weights(&weights)?;
        Ok(Self {
            net,
            weights,
            software_accuracy,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT,
            architecture: self.net.architecture(),
            timesteps: self.net.timesteps,
            lif: self.net.lif.clone(),
            software_accuracy: self.software_accuracy,
            layers: self
                .weights
                .iter()
                .enumerate()
                .map(|(l, w)| CheckpointLayer {
                    name: format!("fc{l}"),
                    rows: w.rows(),
                    cols: w.cols(),
                    data: w.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(format!("checkpoint serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: json_offset(text, e.line(), e.column()),
            detail: format!("checkpoint: {e}"),
        })?;
        if file.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                file.format_version
            )));
        }
        let widths = crate::snn::parse_architecture(&file.architecture)?;
        let net = NetworkSpec {
            widths,
            timesteps: file.timesteps,
            lif: file.lif,
        };
        let weights = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(l, layer)| {
                if layer.name != format!("fc{l}") {
                    return Err(Error::Schema(format!("layer {l} is named `{}`, expected `fc{l}`", layer.name)));
                }
                Matrix::from_vec(layer.rows, layer.cols, layer.data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(net, weights, file.software_accuracy)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
pub(crate) fn json_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}
