//! Leaky integrate-and-fire MLPs evaluated over `T` timesteps.
//!
//! Hidden layers integrate `v = λ·u + x·W`, fire when `v > θ` and hard-reset
//! to zero. The last weight layer is a non-spiking readout whose outputs are
//! averaged over the timesteps. How `x·W` is computed is delegated to a
//! [`Synapses`] backend: exact dense products for software training, or the
//! crossbar model for hardware-in-the-loop simulation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::tally::{EventTally, Phase};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane leak λ in `[0, 1]`.
    pub leak: f64,
    /// Firing threshold θ.
    pub threshold: f64,
    /// Half-width γ of the triangular surrogate derivative.
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            leak: 0.9,
            threshold: 1.0,
            surrogate_width: 1.0,
        }
    }
}

impl LifParams {
    /// Surrogate width defaults to the threshold.
    pub fn new(leak: f64, threshold: f64) -> Result<Self> {
        Self::with_width(leak, threshold, threshold)
    }

    pub fn with_width(leak: f64, threshold: f64, surrogate_width: f64) -> Result<Self> {
        let p = Self {
            leak,
            threshold,
            surrogate_width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::Config(format!("leak must lie in [0, 1], got {}", self.leak)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.surrogate_width > 0.0 && self.surrogate_width.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Result of one LIF update.
#[derive(Clone, Debug, PartialEq)]
pub struct LifStep {
    /// Pre-reset potential `v = λ·u_prev + input`.
    pub potential: Vec<f64>,
    /// Post-reset potential carried into the next timestep.
    pub next: Vec<f64>,
    /// Binary spikes (0.0 or 1.0).
    pub spikes: Vec<f64>,
}

pub fn lif_step(u_prev: &[f64], weighted_input: &[f64], params: &LifParams) -> Result<LifStep> {
    if u_prev.len() != weighted_input.len() {
        return Err(Error::dim(u_prev.len(), weighted_input.len(), "LIF input length"));
    }
    let mut step = LifStep {
        potential: Vec::with_capacity(u_prev.len()),
        next: Vec::with_capacity(u_prev.len()),
        spikes: Vec::with_capacity(u_prev.len()),
    };
    for (&u, &x) in u_prev.iter().zip(weighted_input) {
        let v = params.leak * u + x;
        let fired = v > params.threshold;
        step.potential.push(v);
        step.spikes.push(if fired { 1.0 } else { 0.0 });
        step.next.push(if fired { 0.0 } else { v });
    }
    Ok(step)
}

/// Triangular surrogate for the spike derivative: `max(0, 1 − |v − θ|/γ) / γ`.
#[inline]
pub fn surrogate_grad(v: f64, params: &LifParams) -> f64 {
    let g = params.surrogate_width;
    (1.0 - (v - params.threshold).abs() / g).max(0.0) / g
}

/// Widths from a dash-separated architecture string such as `"6-256-128-64-6"`.
pub fn parse_architecture(arch: &str) -> Result<Vec<usize>> {
    arch.split('-')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer width `{w}` in `{arch}`")))
        })
        .collect()
}

/// Layer widths, timesteps and per-hidden-layer neuron parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub timesteps: usize,
    /// One entry per hidden layer.
    pub lif: Vec<LifParams>,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, timesteps: usize, lif: LifParams) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        let spec = Self {
            widths,
            timesteps,
            lif: vec![lif; hidden],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses an architecture string such as `6-256-128-64-6`.
    pub fn from_architecture(arch: &str, timesteps: usize, lif: LifParams) -> Result<Self> {
        Self::new(parse_architecture(arch)?, timesteps, lif)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("a network needs at least input and output layers".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.timesteps < 1 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.lif.len() != self.hidden_layers() {
            return Err(Error::Config(format!(
                "{} hidden layers but {} LIF parameter sets",
                self.hidden_layers(),
                self.lif.len()
            )));
        }
        self.lif.iter().try_for_each(LifParams::validate)
    }

    pub fn architecture(&self) -> String {
        self.widths
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Number of weight matrices.
    pub fn weight_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    pub fn inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// `(in, out)` of weight layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l], self.widths[l + 1])
    }

    pub fn check_weights(&self, weights: &[Matrix]) -> Result<()> {
        if weights.len() != self.weight_layers() {
            return Err(Error::dim(self.weight_layers(), weights.len(), "weight matrices"));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != self.layer_shape(l) {
                let (r, c) = self.layer_shape(l);
                return Err(Error::Dimension(format!(
                    "layer {l} weights are {}×{}, expected {r}×{c}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (T={})", self.architecture(), self.timesteps)
    }
}

/// How a sample is presented across timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// The same real-valued vector at every timestep.
    Direct,
    /// One feature vector per timestep (windowed sensor streams).
    Sequence,
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Encoding::Direct),
            "sequence" => Ok(Encoding::Sequence),
            _ => Err(Error::Config(format!("unknown encoding `{s}`"))),
        }
    }
}

/// A batch of first-layer inputs laid out per sample and timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch {
    encoding: Encoding,
    batch: usize,
    timesteps: usize,
    features: usize,
    data: Vec<f64>,
}

impl InputBatch {
    pub fn sequence(batch: usize, timesteps: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * timesteps * features {
            return Err(Error::dim(
                batch * timesteps * features,
                data.len(),
                "sequence batch length",
            ));
        }
        if timesteps < 1 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        Ok(Self {
            encoding: Encoding::Sequence,
            batch,
            timesteps,
            features,
            data,
        })
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// First-layer input of sample `b` at timestep `t`.
    #[inline]
    pub fn frame(&self, t: usize, b: usize) -> &[f64] {
        let f = self.features;
        match self.encoding {
            Encoding::Direct => &self.data[b * f..(b + 1) * f],
            Encoding::Sequence => {
                let i = (b * self.timesteps + t) * f;
                &self.data[i..i + f]
            }
        }
    }

    /// Sub-batch of the listed samples.
    pub fn select(&self, samples: &[usize]) -> InputBatch {
        let per = match self.encoding {
            Encoding::Direct => self.features,
            Encoding::Sequence => self.features * self.timesteps,
        };
        let mut data = Vec::with_capacity(samples.len() * per);
        for &s in samples {
            data.extend_from_slice(&self.data[s * per..(s + 1) * per]);
        }
        InputBatch {
            data,
            batch: samples.len(),
            ..*self
        }
    }
}

/// Direct encoding: every timestep presents the same input rows.
pub fn direct_encode(x: &Matrix, timesteps: usize) -> Result<InputBatch> {
    if timesteps < 1 {
        return Err(Error::Config("direct encoding needs T ≥ 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::Input("input contains non-finite values".into()));
    }
    Ok(InputBatch {
        encoding: Encoding::Direct,
        batch: x.rows(),
        timesteps,
        features: x.cols(),
        data: x.as_slice().to_vec(),
    })
}

/// Per-layer record of spikes and pre-reset potentials, indexed `[t][b][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrace {
    timesteps: usize,
    batch: usize,
    neurons: usize,
    spikes: Vec<f64>,
    potentials: Vec<f64>,
}

impl SpikeTrace {
    pub fn new(timesteps: usize, batch: usize, neurons: usize) -> Self {
        let n = timesteps * batch * neurons;
        Self {
            timesteps,
            batch,
            neurons,
            spikes: vec![0.0; n],
            potentials: vec![0.0; n],
        }
    }

    #[inline]
    fn offset(&self, t: usize, b: usize) -> usize {
        (t * self.batch + b) * self.neurons
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn spikes(&self, t: usize, b: usize) -> &[f64] {
        let o = self.offset(t, b);
        &self.spikes[o..o + self.neurons]
    }

    #[inline]
    pub fn potentials(&self, t: usize, b: usize) -> &[f64] {
        let o = self.offset(t, b);
        &self.potentials[o..o + self.neurons]
    }

    fn store(&mut self, t: usize, b: usize, step: &LifStep) {
        let o = self.offset(t, b);
        let n = self.neurons;
        self.spikes[o..o + n].copy_from_slice(&step.spikes);
        self.potentials[o..o + n].copy_from_slice(&step.potential);
    }

    pub fn spike_count(&self) -> usize {
        self.spikes.iter().filter(|&&s| s == 1.0).count()
    }
}

/// How the first-layer input reaches the arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    /// Binary spikes from a hidden layer.
    Spikes,
    /// Real-valued inputs (first layer).
    Analog,
}

/// Digital work reported to the hardware model alongside synaptic reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activity {
    /// LIF integrate/fire updates (forward) or surrogate modulations (backward).
    Neuron { layer: usize, ops: u64 },
    /// Outer-product multiply-accumulates in the weight-gradient unit.
    GradientMacs { layer: usize, macs: u64 },
    /// A vector of `elements` values at `bits` each moved to or from layer hardware.
    Transfer { layer: usize, elements: u64, bits: u32 },
    /// Softmax and error computation on `elements` classifier outputs.
    OutputError { elements: u64 },
}

/// Computes synaptic products for each weight layer.
pub trait Synapses {
    fn layer_count(&self) -> usize;

    /// `x · W_l` for one input vector.
    fn propagate(&self, layer: usize, x: &[f64], signal: Signal, tally: &mut EventTally) -> Result<Vec<f64>>;

    /// `W_l · e` (error projected back to layer `l`'s inputs).
    fn propagate_back(&self, layer: usize, e: &[f64], tally: &mut EventTally) -> Result<Vec<f64>>;

    /// Charges digital activity to the hardware model; no-op in software.
    fn account(&self, _phase: Phase, _activity: Activity, _tally: &mut EventTally) {}
}

/// Exact full-precision products against dense weights.
pub struct DenseSynapses<'a>(pub &'a [Matrix]);

impl Synapses for DenseSynapses<'_> {
    fn layer_count(&self) -> usize {
        self.0.len()
    }

    fn propagate(&self, layer: usize, x: &[f64], _signal: Signal, _tally: &mut EventTally) -> Result<Vec<f64>> {
        self.0[layer].vecmat(x)
    }

    fn propagate_back(&self, layer: usize, e: &[f64], _tally: &mut EventTally) -> Result<Vec<f64>> {
        self.0[layer].matvec(e)
    }
}

/// Output of a full multi-timestep forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Time-averaged classifier outputs `[batch × classes]`.
    pub logits_mean: Matrix,
    /// Classifier outputs per timestep, `[t][b][class]` flattened.
    pub logits_steps: Vec<f64>,
    /// One trace per hidden layer.
    pub traces: Vec<SpikeTrace>,
    pub timesteps: usize,
    pub classes: usize,
}

impl ForwardPass {
    pub fn logits_at(&self, t: usize, b: usize) -> &[f64] {
        let o = (t * self.logits_mean.rows() + b) * self.classes;
        &self.logits_steps[o..o + self.classes]
    }

    /// Input seen by weight layer `l` of sample `b` at timestep `t`.
    pub fn layer_input<'a>(&'a self, inputs: &'a InputBatch, l: usize, t: usize, b: usize) -> &'a [f64] {
        if l == 0 {
            inputs.frame(t, b)
        } else {
            self.traces[l - 1].spikes(t, b)
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits_mean.rows())
            .map(|b| argmax(self.logits_mean.row(b)))
            .collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the network over `T` timesteps for every sample in the batch.
pub fn forward(
    net: &NetworkSpec,
    synapses: &dyn Synapses,
    inputs: &InputBatch,
    tally: &mut EventTally,
) -> Result<ForwardPass> {
    net.validate()?;
    if synapses.layer_count() != net.weight_layers() {
        return Err(Error::dim(net.weight_layers(), synapses.layer_count(), "synapse layers"));
    }
    if inputs.features() != net.inputs() {
        return Err(Error::dim(net.inputs(), inputs.features(), "input features"));
    }
    let steps = net.timesteps;
    if inputs.encoding() == Encoding::Sequence && inputs.timesteps() != steps {
        return Err(Error::dim(steps, inputs.timesteps(), "sequence timesteps"));
    }
    let batch = inputs.batch();
    let classes = net.classes();
    let hidden = net.hidden_layers();
    let last = net.weight_layers() - 1;

    let mut traces: Vec<SpikeTrace> = (0..hidden)
        .map(|l| SpikeTrace::new(steps, batch, net.widths[l + 1]))
        .collect();
    let mut logits_mean = Matrix::zeros(batch, classes);
    let mut logits_steps = vec![0.0; steps * batch * classes];

    for b in 0..batch {
        let mut membranes: Vec<Vec<f64>> = (0..hidden).map(|l| vec![0.0; net.widths[l + 1]]).collect();
        for t in 0..steps {
            let mut x: Vec<f64> = inputs.frame(t, b).to_vec();
            let mut signal = Signal::Analog;
            for l in 0..hidden {
                synapses.account(
                    Phase::Forward,
                    Activity::Transfer {
                        layer: l,
                        elements: x.len() as u64,
                        bits: if signal == Signal::Spikes { 1 } else { 8 },
                    },
                    tally,
                );
                let current = synapses.propagate(l, &x, signal, tally)?;
                let step = lif_step(&membranes[l], &current, &net.lif[l])?;
                synapses.account(
                    Phase::Forward,
                    Activity::Neuron {
                        layer: l,
                        ops: current.len() as u64,
                    },
                    tally,
                );
                traces[l].store(t, b, &step);
                membranes[l] = step.next;
                x = step.spikes;
                signal = Signal::Spikes;
            }
            synapses.account(
                Phase::Forward,
                Activity::Transfer {
                    layer: last,
                    elements: x.len() as u64,
                    bits: if signal == Signal::Spikes { 1 } else { 8 },
                },
                tally,
            );
            let out = synapses.propagate(last, &x, signal, tally)?;
            let o = (t * batch + b) * classes;
            logits_steps[o..o + classes].copy_from_slice(&out);
            for (m, v) in logits_mean.row_mut(b).iter_mut().zip(&out) {
                *m += v;
            }
        }
        logits_mean.row_mut(b).iter_mut().for_each(|m| *m /= steps as f64);
    }

    Ok(ForwardPass {
        logits_mean,
        logits_steps,
        traces,
        timesteps: steps,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quiescent_neuron_stays_silent() {
        let p = LifParams::with_width(0.9, 1.0, 1.0).unwrap();
        let s = lif_step(&[0.0], &[0.0], &p).unwrap();
        assert_eq!((s.next, s.spikes), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn crossing_threshold_fires_and_resets() {
        let p = LifParams::new(1.0, 1.0).unwrap();
        let s = lif_step(&[0.8], &[0.5], &p).unwrap();
        assert!((s.potential[0] - 1.3).abs() < 1e-12);
        assert_eq!((s.spikes[0], s.next[0]), (1.0, 0.0));
    }

    #[test]
    fn leak_keeps_subthreshold_potential() {
        let p = LifParams::new(0.5, 1.0).unwrap();
        let s = lif_step(&[0.8], &[0.1], &p).unwrap();
        assert_eq!(s.spikes, vec![0.0]);
        assert!((s.next[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exactly_at_threshold_does_not_fire() {
        let p = LifParams::new(1.0, 1.0).unwrap();
        assert_eq!(lif_step(&[0.0], &[1.0], &p).unwrap().spikes, vec![0.0]);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let err = lif_step(&[0.0, 0.0], &[1.0], &LifParams::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LifParams::new(1.5, 1.0).is_err());
        assert!(LifParams::new(0.5, 0.0).is_err());
        assert!(LifParams::with_width(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn surrogate_shape() {
        let p = LifParams::with_width(0.9, 1.0, 1.0).unwrap();
        assert_eq!(surrogate_grad(1.0, &p), 1.0);
        assert_eq!(surrogate_grad(2.0, &p), 0.0);
        assert_eq!(surrogate_grad(-5.0, &p), 0.0);
        let narrow = LifParams::with_width(0.9, 1.0, 0.5).unwrap();
        assert!((surrogate_grad(1.25, &narrow) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn direct_encoding_repeats_input() {
        let x = Matrix::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let enc = direct_encode(&x, 3).unwrap();
        for t in 0..3 {
            assert_eq!(enc.frame(t, 0), &[0.3, 0.7]);
        }
        let z = direct_encode(&Matrix::zeros(1, 1), 5).unwrap();
        assert!((0..5).all(|t| z.frame(t, 0) == [0.0]));
        assert!(direct_encode(&x, 0).is_err());
    }

    #[test]
    fn direct_encoding_preserves_batch_shape() {
        let x = Matrix::from_fn(50, 9, |r, c| (r * 9 + c) as f64 / 450.0);
        let enc = direct_encode(&x, 128).unwrap();
        assert_eq!((enc.batch(), enc.timesteps(), enc.features()), (50, 128, 9));
        assert_eq!(enc.frame(127, 49), x.row(49));
    }

    #[test]
    fn zero_weights_give_zero_logits_and_no_spikes() {
        let net = NetworkSpec::from_architecture("3-4-2", 4, LifParams::default()).unwrap();
        let w = vec![Matrix::zeros(3, 4), Matrix::zeros(4, 2)];
        let x = direct_encode(&Matrix::filled(2, 3, 1.0), 4).unwrap();
        let out = forward(&net, &DenseSynapses(&w), &x, &mut EventTally::new()).unwrap();
        assert!(out.logits_mean.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(out.traces[0].spike_count(), 0);
    }

    #[test]
    fn single_neuron_fires_every_step() {
        let lif = LifParams::new(1.0, 0.5).unwrap();
        let net = NetworkSpec::new(vec![1, 1, 1], 2, lif).unwrap();
        let w = vec![Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, 1.0)];
        let x = direct_encode(&Matrix::filled(1, 1, 1.0), 2).unwrap();
        let out = forward(&net, &DenseSynapses(&w), &x, &mut EventTally::new()).unwrap();
        assert_eq!(out.traces[0].spikes(0, 0), &[1.0]);
        assert_eq!(out.traces[0].spikes(1, 0), &[1.0]);
        assert_eq!(out.logits_mean.get(0, 0), 1.0);
    }

    #[test]
    fn fashion_scale_mlp_has_ten_logits() {
        let net = NetworkSpec::from_architecture("784-512-256-128-64-10", 5, LifParams::default()).unwrap();
        let w: Vec<Matrix> = (0..net.weight_layers())
            .map(|l| {
                let (r, c) = net.layer_shape(l);
                Matrix::from_fn(r, c, |i, j| (((i * 31 + j * 17) % 13) as f64 - 6.0) * 0.01)
            })
            .collect();
        let x = direct_encode(&Matrix::filled(2, 784, 0.5), 5).unwrap();
        let out = forward(&net, &DenseSynapses(&w), &x, &mut EventTally::new()).unwrap();
        assert_eq!(out.logits_mean.shape(), (2, 10));
    }

    #[test]
    fn weight_shape_mismatch_is_dimension_error() {
        let net = NetworkSpec::from_architecture("3-4-2", 2, LifParams::default()).unwrap();
        let w = vec![Matrix::zeros(3, 5), Matrix::zeros(5, 2)];
        assert!(matches!(net.check_weights(&w), Err(Error::Dimension(_))));
        let x = direct_encode(&Matrix::zeros(1, 3), 2).unwrap();
        assert!(forward(&net, &DenseSynapses(&w), &x, &mut EventTally::new()).is_err());
    }

    #[test]
    fn architecture_round_trips() {
        let net = NetworkSpec::from_architecture("9-128-64-32-6", 128, LifParams::default()).unwrap();
        assert_eq!(net.architecture(), "9-128-64-32-6");
        assert_eq!(net.hidden_layers(), 3);
        assert!(NetworkSpec::from_architecture("9", 1, LifParams::default()).is_err());
        assert!(NetworkSpec::from_architecture("9-x-2", 1, LifParams::default()).is_err());
    }
}
