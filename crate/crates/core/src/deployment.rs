//! A network programmed onto crossbar hardware: weight layers, the feedback
//! tile (DFA) and the mapping that turns digital activity into hardware events.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossbar::{
    ArrayGeometry, ConductanceNoise, ConductanceRange, CrossbarLayer, Drive, NoiseDraw, NoiseInjection, ReadConfig,
};
use crate::error::{Error, Result};
use crate::hwmodel::{EventKind, EventTally, HardwareConfig, LayerMapping, MappingPlan, Mode, Phase, Site, Unit};
use crate::learner::FeedbackMatrices;
use crate::snn::{Activity, NetworkSpec, Signal, Synapses};
use crate::tensor::Matrix;

pub type SharedNoise = Arc<dyn ConductanceNoise + Send + Sync>;

/// Device and read-out settings of a deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSettings {
    pub range: ConductanceRange,
    pub read: ReadConfig,
    pub injection: NoiseInjection,
    /// Rewrite every cell after each update instead of only changed levels.
    pub reprogram_all: bool,
}

impl Default for DeviceSettings {
    fn default() -> Self {
        Self {
            range: ConductanceRange::default(),
            read: ReadConfig::default(),
            injection: NoiseInjection::Sample,
            reprogram_all: false,
        }
    }
}

#[derive(Clone)]
pub struct HardwareDeployment {
    net: NetworkSpec,
    mode: Mode,
    hw: HardwareConfig,
    plan: MappingPlan,
    settings: DeviceSettings,
    layers: Vec<CrossbarLayer>,
    feedback: Vec<CrossbarLayer>,
    noise: Option<SharedNoise>,
}

impl std::fmt::Debug for HardwareDeployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HardwareDeployment")
            .field("net", &self.net.architecture())
            .field("mode", &self.mode)
            .field("tiles", &self.plan.tiles_used)
            .field("noisy", &self.noise.is_some())
            .finish()
    }
}

impl HardwareDeployment {
    /// Maps and quantizes `weights` (and `feedback` in DFA mode). Devices start at
    /// their ideal levels; call [`program`](Self::program) to apply device noise.
    pub fn new(
        net: &NetworkSpec,
        weights: &[Matrix],
        feedback: Option<&FeedbackMatrices>,
        mode: Mode,
        hw: &HardwareConfig,
        settings: &DeviceSettings,
    ) -> Result<Self> {
        net.check_weights(weights)?;
        settings.range.validate()?;
        let plan = crate::hwmodel::map_network(net, hw, mode)?;
        let geometry = ArrayGeometry {
            rows: hw.crossbar_rows,
            cols: hw.crossbar_cols,
        };
        let layers = weights
            .iter()
            .map(|w| CrossbarLayer::deploy(w, settings.range, settings.read.clone(), geometry, mode == Mode::Bp))
            .collect::<Result<Vec<_>>>()?;
        let feedback = match (mode, feedback) {
            (Mode::Bp, _) => Vec::new(),
            (Mode::Dfa, None) => {
                return Err(Error::Config("DFA deployment needs feedback matrices".into()));
            }
            (Mode::Dfa, Some(fb)) => {
                fb.check(net)?;
                fb.b.iter()
                    .map(|b| CrossbarLayer::deploy(b, settings.range, settings.read.clone(), geometry, false))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self {
            net: net.clone(),
            mode,
            hw: hw.clone(),
            plan,
            settings: settings.clone(),
            layers,
            feedback,
            noise: None,
        })
    }

    pub fn net(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn plan(&self) -> &MappingPlan {
        &self.plan
    }

    pub fn hardware(&self) -> &HardwareConfig {
        &self.hw
    }

    pub fn settings(&self) -> &DeviceSettings {
        &self.settings
    }

    pub fn layer(&self, l: usize) -> &CrossbarLayer {
        &self.layers[l]
    }

    pub fn feedback_layer(&self, l: usize) -> Option<&CrossbarLayer> {
        self.feedback.get(l)
    }

    /// Noise model used by subsequent programming; `None` programs ideally.
    pub fn set_noise(&mut self, noise: Option<SharedNoise>) {
        self.noise = noise;
    }

    pub fn is_noisy(&self) -> bool {
        self.noise.is_some()
    }

    /// Programs every weight and feedback device.
    pub fn program(&mut self, rng: &mut ChaCha8Rng, tally: &mut EventTally) {
        let noise = self.noise.clone();
        let mut draw = noise
            .as_deref()
            .map(|n| NoiseDraw::new(n as &dyn ConductanceNoise, self.settings.injection));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.program(draw.as_mut(), rng, tally, Site::layer(Phase::Update, l));
        }
        for (l, b) in self.feedback.iter_mut().enumerate() {
            b.program(draw.as_mut(), rng, tally, Site::layer(Phase::Update, l));
        }
    }

    /// Writes updated shadow weights back; returns the number of cells written.
    pub fn reprogram(&mut self, weights: &[Matrix], rng: &mut ChaCha8Rng, tally: &mut EventTally) -> Result<usize> {
        self.net.check_weights(weights)?;
        let noise = self.noise.clone();
        let mut draw = noise
            .as_deref()
            .map(|n| NoiseDraw::new(n as &dyn ConductanceNoise, self.settings.injection));
        let mut written = 0;
        for (l, (layer, w)) in self.layers.iter_mut().zip(weights).enumerate() {
            written += layer.reprogram(
                w,
                self.settings.reprogram_all,
                draw.as_mut(),
                rng,
                tally,
                Site::layer(Phase::Update, l),
            )?;
        }
        Ok(written)
    }

    /// Effective weights of the programmed devices.
    pub fn programmed_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(CrossbarLayer::programmed_weights).collect()
    }

    /// `e · B_l` read from the feedback tile.
    pub fn project_feedback(&self, l: usize, e: &[f64], tally: &mut EventTally) -> Result<Vec<f64>> {
        let b = self.feedback.get(l).ok_or_else(|| Error::Mode {
            mode: self.mode.to_string(),
            what: format!("no feedback crossbar for hidden layer {l}"),
        })?;
        b.dot_product(
            Drive::BitSerial {
                values: e,
                bits: self.settings.read.stream_bits,
            },
            tally,
            Site::layer(Phase::Backward, l),
        )
    }

    /// Order-sensitive digest of every programmed feedback conductance.
    pub fn feedback_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &self.feedback {
            for a in b.arrays() {
                for g in a.g_programmed().as_slice() {
                    for byte in g.to_bits().to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    fn mapping_for(&self, phase: Phase, layer: usize) -> Option<&LayerMapping> {
        if phase == Phase::Backward && self.mode == Mode::Dfa {
            if let Some(m) = self.plan.feedback.as_ref().and_then(|f| f.layers.get(layer)) {
                return Some(m);
            }
        }
        self.plan.layers.get(layer)
    }
}

impl Synapses for HardwareDeployment {
    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn propagate(&self, layer: usize, x: &[f64], signal: Signal, tally: &mut EventTally) -> Result<Vec<f64>> {
        let drive = match signal {
            Signal::Spikes => Drive::Spikes(x),
            Signal::Analog => Drive::BitSerial {
                values: x,
                bits: self.settings.read.stream_bits,
            },
        };
        let out = self.layers[layer].dot_product(drive, tally, Site::layer(Phase::Forward, layer))?;
        self.account(
            Phase::Forward,
            Activity::Transfer {
                layer,
                elements: out.len() as u64,
                bits: self.hw.error_bits,
            },
            tally,
        );
        Ok(out)
    }

    fn propagate_back(&self, layer: usize, e: &[f64], tally: &mut EventTally) -> Result<Vec<f64>> {
        self.layers[layer].transposed_dot_product(
            e,
            self.settings.read.stream_bits,
            tally,
            Site::layer(Phase::Backward, layer),
        )
    }

    fn account(&self, phase: Phase, activity: Activity, tally: &mut EventTally) {
        match activity {
            Activity::Neuron { layer, ops } => {
                tally.record(EventKind::GradlifOp, ops, Site::layer(phase, layer));
            }
            Activity::GradientMacs { layer, macs } => {
                tally.record(EventKind::WguMac, macs, Site::layer(Phase::Update, layer));
            }
            Activity::OutputError { elements } => {
                tally.record(EventKind::GradlifOp, elements, Site::new(phase, Unit::Global));
            }
            Activity::Transfer { layer, elements, bits } => {
                let bytes = (elements * bits as u64).div_ceil(8);
                let (tiles, pes, crossbars) = self
                    .mapping_for(phase, layer)
                    .map_or((1, 1, 1), |m| (m.tiles().len() as u64, m.pes() as u64, m.crossbars() as u64));
                let site = Site::layer(phase, layer);
                tally.record(EventKind::HtreeGlobalByte, bytes * tiles, site);
                tally.record(EventKind::HtreeTileByte, bytes * pes, site);
                tally.record(EventKind::HtreePeByte, bytes * crossbars, site);
                tally.record(EventKind::BufferByte, 2 * bytes * tiles, site);
            }
        }
    }
}
