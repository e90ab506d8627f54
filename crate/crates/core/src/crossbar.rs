//! RRAM crossbar model: weight-to-conductance quantization, noisy programming,
//! and analog dot-products read out through column (or row) ADCs.
//!
//! A signed logical weight occupies a differential pair of physical columns,
//! `G⁺` at column `2j` and `G⁻` at column `2j + 1`; the weight is proportional
//! to `G⁺ − G⁻`. Layers larger than one array are split into blocks of
//! `rows × cols/2` logical weights and their partial sums are accumulated
//! digitally after the ADCs.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::tally::{EventKind, EventTally, Site};
use crate::tensor::Matrix;

/// Programmable conductance window of one RRAM device, in µS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConductanceRange {
    pub g_min: f64,
    pub g_max: f64,
    pub bits: u32,
}

impl Default for ConductanceRange {
    fn default() -> Self {
        Self {
            g_min: 1.0,
            g_max: 10.0,
            bits: 4,
        }
    }
}

impl ConductanceRange {
    pub fn new(g_min: f64, g_max: f64, bits: u32) -> Result<Self> {
        let r = Self { g_min, g_max, bits };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_min > 0.0 && self.g_min < self.g_max && self.g_max.is_finite()) {
            return Err(Error::Config(format!(
                "conductance range requires 0 < g_min < g_max, got [{}, {}]",
                self.g_min, self.g_max
            )));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Config(format!(
                "device precision must be 1..=16 bits, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    #[inline]
    pub fn span(&self) -> f64 {
        self.g_max - self.g_min
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.span() / (self.levels() - 1) as f64
    }

    #[inline]
    pub fn level(&self, index: usize) -> f64 {
        self.g_min + index as f64 * self.step()
    }

    pub fn nearest_level_index(&self, g: f64) -> usize {
        let top = (self.levels() - 1) as f64;
        ((g - self.g_min) / self.step()).round().clamp(0.0, top) as usize
    }

    pub fn is_on_level(&self, g: f64) -> bool {
        (self.level(self.nearest_level_index(g)) - g).abs() <= 1e-9 * self.g_max
    }
}

/// Column-pair assignment of a signed logical column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignedMapping;

impl SignedMapping {
    #[inline]
    pub fn positive_column(logical: usize) -> usize {
        2 * logical
    }

    #[inline]
    pub fn negative_column(logical: usize) -> usize {
        2 * logical + 1
    }
}

/// Differential conductance pair for a weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub g_pos: Matrix,
    pub g_neg: Matrix,
    /// Weight magnitude that maps onto the full `g_max − g_min` swing.
    pub scale: f64,
}

/// Signed level index of `w` under a fixed scale, saturating at the top level.
pub fn weight_level(w: f64, scale: f64, range: &ConductanceRange) -> i64 {
    let top = (range.levels() - 1) as f64;
    let mag = ((w.abs() / scale) * top).round().min(top) as i64;
    if w < 0.0 {
        -mag
    } else {
        mag
    }
}

fn level_pair(level: i64, range: &ConductanceRange) -> (f64, f64) {
    let g = range.level(level.unsigned_abs() as usize);
    if level >= 0 {
        (g, range.g_min)
    } else {
        (range.g_min, g)
    }
}

/// Maps weights onto differential conductance pairs with `scale = max|W|`.
///
/// An all-zero matrix uses the sentinel scale 1 and parks every device at `g_min`.
pub fn quantize_weights(w: &Matrix, range: &ConductanceRange) -> Result<QuantizedWeights> {
    range.validate()?;
    if !w.is_finite() {
        return Err(Error::Numeric("weight matrix contains non-finite values".into()));
    }
    let max = w.max_abs();
    let scale = if max == 0.0 { 1.0 } else { max };
    Ok(quantize_with_scale(w, range, scale))
}

pub fn quantize_with_scale(w: &Matrix, range: &ConductanceRange, scale: f64) -> QuantizedWeights {
    let (rows, cols) = w.shape();
    let mut g_pos = Matrix::zeros(rows, cols);
    let mut g_neg = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let (p, n) = level_pair(weight_level(w.get(r, c), scale, range), range);
            g_pos.set(r, c, p);
            g_neg.set(r, c, n);
        }
    }
    QuantizedWeights {
        g_pos,
        g_neg,
        scale,
    }
}

pub fn dequantize(q: &QuantizedWeights, range: &ConductanceRange) -> Matrix {
    let k = q.scale / range.span();
    Matrix::from_fn(q.g_pos.rows(), q.g_pos.cols(), |r, c| {
        (q.g_pos.get(r, c) - q.g_neg.get(r, c)) * k
    })
}

/// Source of programming deviations `ΔG = G_programmed − G_ideal`.
pub trait ConductanceNoise {
    /// Mean and variance (µS, µS²) of ΔG for a device programmed to `g_ideal`.
    fn delta_moments(&self, g_ideal: f64) -> (f64, f64);
}

/// ΔG with a fixed mean and standard deviation, independent of conductance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantNoise {
    pub mean: f64,
    pub std: f64,
}

impl ConductanceNoise for ConstantNoise {
    fn delta_moments(&self, _g: f64) -> (f64, f64) {
        (self.mean, self.std * self.std)
    }
}

/// How the noise distribution is turned into a device deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInjection {
    /// Draw from the full predictive distribution.
    #[default]
    Sample,
    /// Apply only the predicted mean deviation.
    MeanOnly,
}

/// Caches noise moments per distinct ideal conductance; ideal values sit on a
/// handful of levels, so this avoids re-evaluating the noise model per cell.
pub struct NoiseDraw<'a> {
    model: &'a dyn ConductanceNoise,
    injection: NoiseInjection,
    cache: HashMap<u64, (f64, f64)>,
}

impl<'a> NoiseDraw<'a> {
    pub fn new(model: &'a dyn ConductanceNoise, injection: NoiseInjection) -> Self {
        Self {
            model,
            injection,
            cache: HashMap::new(),
        }
    }

    /// Mean and standard deviation of ΔG at `g`.
    pub fn moments(&mut self, g: f64) -> (f64, f64) {
        let model = self.model;
        *self.cache.entry(g.to_bits()).or_insert_with(|| {
            let (m, v) = model.delta_moments(g);
            (m, v.max(0.0).sqrt())
        })
    }

    pub fn draw(&mut self, g: f64, rng: &mut impl Rng) -> f64 {
        let (mean, std) = self.moments(g);
        match self.injection {
            NoiseInjection::MeanOnly => mean,
            NoiseInjection::Sample if std == 0.0 => mean,
            NoiseInjection::Sample => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
        }
    }
}

/// Converter and drive settings shared by every array of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadConfig {
    /// ADC resolution; `None` senses currents exactly.
    pub adc_bits: Option<u32>,
    /// Rows assumed simultaneously active when sizing the ADC clip range.
    pub adc_active_rows: usize,
    /// Read voltage in volts.
    pub v_read: f64,
    /// Bit-serial precision for multi-bit drives (first-layer inputs, errors).
    pub stream_bits: u32,
    /// Resample device deviations on every read instead of once per program.
    pub per_read_noise: bool,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self {
            adc_bits: Some(4),
            adc_active_rows: 64,
            v_read: 0.1,
            stream_bits: 8,
            per_read_noise: false,
        }
    }
}

impl ReadConfig {
    pub fn ideal() -> Self {
        Self {
            adc_bits: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.adc_bits {
            if !(1..=16).contains(&b) {
                return Err(Error::Config(format!("ADC bits must be 1..=16, got {b}")));
            }
        }
        if self.adc_active_rows == 0 {
            return Err(Error::Config("adc_active_rows must be positive".into()));
        }
        if !(self.v_read > 0.0) {
            return Err(Error::Config("v_read must be positive".into()));
        }
        if !(1..=16).contains(&self.stream_bits) {
            return Err(Error::Config("stream_bits must be 1..=16".into()));
        }
        Ok(())
    }
}

/// Physical array dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
        }
    }
}

impl ArrayGeometry {
    /// Signed weight columns per array after differential pairing.
    pub fn logical_cols(&self) -> usize {
        self.cols / 2
    }

    /// Row-major block grid `(row_slices, col_slices)` for an `in_dim × out_dim` matrix.
    pub fn slices(&self, in_dim: usize, out_dim: usize) -> (usize, usize) {
        (
            in_dim.div_ceil(self.rows),
            out_dim.div_ceil(self.logical_cols()),
        )
    }
}

struct ReadNoiseState {
    moments: Vec<(f64, f64)>,
    rng: Mutex<ChaCha8Rng>,
}

impl Clone for ReadNoiseState {
    fn clone(&self) -> Self {
        let rng = self.rng.lock().expect("read-noise rng poisoned").clone();
        Self {
            moments: self.moments.clone(),
            rng: Mutex::new(rng),
        }
    }
}

impl std::fmt::Debug for ReadNoiseState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReadNoiseState").finish_non_exhaustive()
    }
}

/// One physical RRAM array.
#[derive(Clone, Debug)]
pub struct CrossbarArray {
    rows: usize,
    cols: usize,
    g_ideal: Matrix,
    g_programmed: Matrix,
    range: ConductanceRange,
    read: ReadConfig,
    read_noise: Option<ReadNoiseState>,
}

impl CrossbarArray {
    /// An array with every device at `g_min`, programmed ideally.
    pub fn new(rows: usize, cols: usize, range: ConductanceRange, read: ReadConfig) -> Result<Self> {
        range.validate()?;
        read.validate()?;
        if rows == 0 || cols == 0 || rows > 256 || cols > 256 {
            return Err(Error::Config(format!(
                "crossbar must be between 1×1 and 256×256, got {rows}×{cols}"
            )));
        }
        let g = Matrix::filled(rows, cols, range.g_min);
        Ok(Self {
            rows,
            cols,
            g_ideal: g.clone(),
            g_programmed: g,
            range,
            read,
            read_noise: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn range(&self) -> &ConductanceRange {
        &self.range
    }

    pub fn read_config(&self) -> &ReadConfig {
        &self.read
    }

    pub fn g_ideal(&self) -> &Matrix {
        &self.g_ideal
    }

    pub fn g_programmed(&self) -> &Matrix {
        &self.g_programmed
    }

    /// Sets a target level; takes effect on the next program of that cell.
    pub fn set_ideal(&mut self, r: usize, c: usize, g: f64) -> Result<()> {
        if !self.range.is_on_level(g) {
            return Err(Error::Input(format!(
                "{g} µS is not a {}-bit level in [{}, {}]",
                self.range.bits, self.range.g_min, self.range.g_max
            )));
        }
        self.g_ideal.set(r, c, g);
        Ok(())
    }

    /// Programs every cell: `G_programmed = max(0, G_ideal + ΔG)`.
    pub fn program(
        &mut self,
        noise: Option<&mut NoiseDraw<'_>>,
        rng: &mut ChaCha8Rng,
        tally: &mut EventTally,
        site: Site,
    ) {
        let cells: Vec<(usize, usize)> = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .collect();
        self.program_cells(&cells, noise, rng, tally, site);
    }

    /// Programs only the listed cells, leaving the rest untouched.
    pub fn program_cells(
        &mut self,
        cells: &[(usize, usize)],
        mut noise: Option<&mut NoiseDraw<'_>>,
        rng: &mut ChaCha8Rng,
        tally: &mut EventTally,
        site: Site,
    ) {
        for &(r, c) in cells {
            let g = self.g_ideal.get(r, c);
            let dg = match noise.as_deref_mut() {
                Some(n) => n.draw(g, rng),
                None => 0.0,
            };
            self.g_programmed.set(r, c, (g + dg).max(0.0));
        }
        tally.record(EventKind::CrossbarWrite, cells.len() as u64, site);
        if self.read.per_read_noise {
            if let Some(n) = noise {
                let moments = self
                    .g_ideal
                    .as_slice()
                    .iter()
                    .map(|&g| n.moments(g))
                    .collect();
                self.read_noise = Some(ReadNoiseState {
                    moments,
                    rng: Mutex::new(ChaCha8Rng::seed_from_u64(rng.random())),
                });
            }
        }
    }

    #[inline]
    fn conductance(&self, r: usize, c: usize, noise: Option<&mut ChaCha8Rng>) -> f64 {
        match (noise, &self.read_noise) {
            (Some(rng), Some(state)) => {
                let (m, s) = state.moments[r * self.cols + c];
                let z: f64 = rng.sample(StandardNormal);
                (self.g_ideal.get(r, c) + m + s * z).max(0.0)
            }
            _ => self.g_programmed.get(r, c),
        }
    }

    /// Full-scale current of one ADC when at most `lines` inputs drive it.
    pub fn clip_current(&self, lines: usize) -> f64 {
        lines.min(self.read.adc_active_rows) as f64 * self.range.g_max * self.read.v_read
    }

    /// Output code of the ADC for current `i` (µS·V).
    pub fn adc_code(&self, i: f64, clip: f64) -> Option<u32> {
        self.read.adc_bits.map(|bits| {
            let top = ((1u32 << bits) - 1) as f64;
            (i / clip * top).round().clamp(0.0, top) as u32
        })
    }

    fn convert(&self, i: f64, clip: f64) -> f64 {
        match self.read.adc_bits {
            None => i,
            Some(bits) => {
                let top = ((1u32 << bits) - 1) as f64;
                self.adc_code(i, clip).unwrap_or(0) as f64 * clip / top
            }
        }
    }

    /// Column currents (µS·V) after the ADC for rows driven with `amplitudes`.
    /// `drive` lists `(row, amplitude)` pairs with amplitude in `[0, 1]`.
    pub fn sense_columns(
        &self,
        drive: &[(usize, f64)],
        tally: &mut EventTally,
        site: Site,
    ) -> Vec<f64> {
        let v = self.read.v_read;
        let mut currents = vec![0.0; self.cols];
        let mut rng_guard = self
            .read_noise
            .as_ref()
            .map(|s| s.rng.lock().expect("read-noise rng poisoned"));
        for &(r, a) in drive {
            for (c, i) in currents.iter_mut().enumerate() {
                *i += a * v * self.conductance(r, c, rng_guard.as_deref_mut());
            }
        }
        let clip = self.clip_current(self.rows);
        for i in currents.iter_mut() {
            *i = self.convert(*i, clip);
        }
        tally.record(EventKind::CrossbarRead, 1, site);
        tally.record(EventKind::DacToggle, drive.len() as u64, site);
        tally.record(EventKind::AdcConversion, self.cols as u64, site);
        currents
    }

    /// Row currents (µS·V) after the row-side ADCs for columns driven with `amplitudes`.
    pub fn sense_rows(
        &self,
        drive: &[(usize, f64)],
        active_lines: usize,
        tally: &mut EventTally,
        site: Site,
    ) -> Vec<f64> {
        let v = self.read.v_read;
        let mut currents = vec![0.0; self.rows];
        let mut rng_guard = self
            .read_noise
            .as_ref()
            .map(|s| s.rng.lock().expect("read-noise rng poisoned"));
        for &(c, a) in drive {
            for (r, i) in currents.iter_mut().enumerate() {
                *i += a * v * self.conductance(r, c, rng_guard.as_deref_mut());
            }
        }
        let clip = self.clip_current(active_lines);
        for i in currents.iter_mut() {
            *i = self.convert(*i, clip);
        }
        tally.record(EventKind::CrossbarRead, 1, site);
        tally.record(EventKind::DacToggle, drive.len() as u64, site);
        tally.record(EventKind::AdcConversion, self.rows as u64, site);
        currents
    }
}

/// How an input vector is applied to the array rows.
#[derive(Clone, Copy, Debug)]
pub enum Drive<'a> {
    /// Binary spikes, one bit-plane (1-bit decoders).
    Spikes(&'a [f64]),
    /// Real values streamed as sign-magnitude bit-planes with shift-add recombination.
    BitSerial { values: &'a [f64], bits: u32 },
    /// Ideal full-precision DAC, positive and negative entries in separate reads.
    Analog(&'a [f64]),
}

impl Drive<'_> {
    fn values(&self) -> &[f64] {
        match self {
            Drive::Spikes(v) | Drive::Analog(v) => v,
            Drive::BitSerial { values, .. } => values,
        }
    }
}

/// One bit-plane (or polarity phase): driven lines and the digital weight of its result.
struct Plane {
    weight: f64,
    lines: Vec<(usize, f64)>,
}

fn planes(drive: Drive<'_>) -> Result<Vec<Plane>> {
    match drive {
        Drive::Spikes(v) => {
            let mut lines = Vec::new();
            for (i, &s) in v.iter().enumerate() {
                if s == 1.0 {
                    lines.push((i, 1.0));
                } else if s != 0.0 {
                    return Err(Error::Input(format!(
                        "spike input {i} is {s}; bit-plane entries must be 0 or 1"
                    )));
                }
            }
            Ok(vec![Plane { weight: 1.0, lines }])
        }
        Drive::Analog(v) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input("non-finite analog input".into()));
            }
            let pick = |positive: bool| Plane {
                weight: if positive { 1.0 } else { -1.0 },
                lines: v
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| if positive { x > 0.0 } else { x < 0.0 })
                    .map(|(i, &x)| (i, x.abs()))
                    .collect(),
            };
            Ok(vec![pick(true), pick(false)])
        }
        Drive::BitSerial { values, bits } => {
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input("non-finite bit-serial input".into()));
            }
            let full = ((1u64 << bits) - 1) as f64;
            let scale = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let codes: Vec<u64> = values
                .iter()
                .map(|x| {
                    if scale == 0.0 {
                        0
                    } else {
                        (x.abs() / scale * full).round() as u64
                    }
                })
                .collect();
            let lsb = if scale == 0.0 { 0.0 } else { scale / full };
            let mut out = Vec::with_capacity(2 * bits as usize);
            for sign in [1.0, -1.0] {
                for b in 0..bits {
                    let lines = codes
                        .iter()
                        .zip(values)
                        .enumerate()
                        .filter(|(_, (&q, &x))| (q >> b) & 1 == 1 && x * sign > 0.0)
                        .map(|(i, _)| (i, 1.0))
                        .collect();
                    out.push(Plane {
                        weight: sign * (1u64 << b) as f64 * lsb,
                        lines,
                    });
                }
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    row0: usize,
    col0: usize,
    /// Logical columns held by this block.
    width: usize,
    array: CrossbarArray,
}

/// A logical `in_dim × out_dim` weight matrix deployed over a grid of arrays.
#[derive(Clone, Debug)]
pub struct CrossbarLayer {
    in_dim: usize,
    out_dim: usize,
    scale: f64,
    range: ConductanceRange,
    read: ReadConfig,
    geometry: ArrayGeometry,
    transposable: bool,
    blocks: Vec<Block>,
}

impl CrossbarLayer {
    /// Quantizes `w` (rows = inputs, cols = outputs) onto arrays; cells start
    /// programmed ideally. The scale `max|W|` is fixed for the layer's lifetime.
    pub fn deploy(
        w: &Matrix,
        range: ConductanceRange,
        read: ReadConfig,
        geometry: ArrayGeometry,
        transposable: bool,
    ) -> Result<Self> {
        read.validate()?;
        if geometry.rows == 0 || geometry.cols < 2 {
            return Err(Error::Config("array geometry too small".into()));
        }
        let q = quantize_weights(w, &range)?;
        let (in_dim, out_dim) = w.shape();
        let (row_slices, col_slices) = geometry.slices(in_dim, out_dim);
        let lc = geometry.logical_cols();
        let mut blocks = Vec::with_capacity(row_slices * col_slices);
        for rs in 0..row_slices {
            for cs in 0..col_slices {
                let row0 = rs * geometry.rows;
                let col0 = cs * lc;
                let rows = geometry.rows.min(in_dim - row0);
                let width = lc.min(out_dim - col0);
                let mut array = CrossbarArray::new(rows, 2 * width, range, read.clone())?;
                for r in 0..rows {
                    for c in 0..width {
                        array.g_ideal.set(
                            r,
                            SignedMapping::positive_column(c),
                            q.g_pos.get(row0 + r, col0 + c),
                        );
                        array.g_ideal.set(
                            r,
                            SignedMapping::negative_column(c),
                            q.g_neg.get(row0 + r, col0 + c),
                        );
                    }
                }
                array.g_programmed = array.g_ideal.clone();
                blocks.push(Block {
                    row0,
                    col0,
                    width,
                    array,
                });
            }
        }
        Ok(Self {
            in_dim,
            out_dim,
            scale: q.scale,
            range,
            read,
            geometry,
            transposable,
            blocks,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn range(&self) -> &ConductanceRange {
        &self.range
    }

    pub fn read_config(&self) -> &ReadConfig {
        &self.read
    }

    pub fn is_transposable(&self) -> bool {
        self.transposable
    }

    pub fn array_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn arrays(&self) -> impl Iterator<Item = &CrossbarArray> {
        self.blocks.iter().map(|b| &b.array)
    }

    /// `(row offset, logical column offset, array)` for every block in row-major order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &CrossbarArray)> {
        self.blocks.iter().map(|b| (b.row0, b.col0, &b.array))
    }

    pub fn geometry(&self) -> ArrayGeometry {
        self.geometry
    }

    fn gather(&self, pick: impl Fn(&CrossbarArray) -> &Matrix) -> Matrix {
        let k = self.scale / self.range.span();
        let mut w = Matrix::zeros(self.in_dim, self.out_dim);
        for b in &self.blocks {
            let g = pick(&b.array);
            for r in 0..b.array.rows {
                for c in 0..b.width {
                    let d = g.get(r, SignedMapping::positive_column(c))
                        - g.get(r, SignedMapping::negative_column(c));
                    w.set(b.row0 + r, b.col0 + c, d * k);
                }
            }
        }
        w
    }

    /// Weights implied by the quantized target levels.
    pub fn ideal_weights(&self) -> Matrix {
        self.gather(|a| &a.g_ideal)
    }

    /// Weights implied by the programmed (noisy) conductances.
    pub fn programmed_weights(&self) -> Matrix {
        self.gather(|a| &a.g_programmed)
    }

    /// Programs every device of the layer.
    pub fn program(
        &mut self,
        noise: Option<&mut NoiseDraw<'_>>,
        rng: &mut ChaCha8Rng,
        tally: &mut EventTally,
        site: Site,
    ) {
        let mut noise = noise;
        for b in &mut self.blocks {
            b.array.program(noise.as_deref_mut(), rng, tally, site);
        }
    }

    /// Requantizes `w` under the layer's fixed scale and reprograms the cells whose
    /// target level changed (`all = true` reprograms every cell). Returns cells written.
    pub fn reprogram(
        &mut self,
        w: &Matrix,
        all: bool,
        noise: Option<&mut NoiseDraw<'_>>,
        rng: &mut ChaCha8Rng,
        tally: &mut EventTally,
        site: Site,
    ) -> Result<usize> {
        if w.shape() != (self.in_dim, self.out_dim) {
            return Err(Error::Dimension(format!(
                "reprogram expects {}×{}, got {}×{}",
                self.in_dim,
                self.out_dim,
                w.rows(),
                w.cols()
            )));
        }
        if !w.is_finite() {
            return Err(Error::Numeric("non-finite weights on reprogram".into()));
        }
        let mut noise = noise;
        let mut written = 0;
        for b in &mut self.blocks {
            let mut cells = Vec::new();
            for r in 0..b.array.rows {
                for c in 0..b.width {
                    let level = weight_level(w.get(b.row0 + r, b.col0 + c), self.scale, &self.range);
                    let (gp, gn) = level_pair(level, &self.range);
                    for (col, g) in [
                        (SignedMapping::positive_column(c), gp),
                        (SignedMapping::negative_column(c), gn),
                    ] {
                        if all || b.array.g_ideal.get(r, col) != g {
                            b.array.g_ideal.set(r, col, g);
                            cells.push((r, col));
                        }
                    }
                }
            }
            written += cells.len();
            if !cells.is_empty() {
                b.array
                    .program_cells(&cells, noise.as_deref_mut(), rng, tally, site);
            }
        }
        Ok(written)
    }

    #[inline]
    fn to_weight_units(&self) -> f64 {
        self.scale / self.range.span() / self.read.v_read
    }

    /// `x · W` through the analog arrays.
    pub fn dot_product(&self, drive: Drive<'_>, tally: &mut EventTally, site: Site) -> Result<Vec<f64>> {
        let x = drive.values();
        if x.len() != self.in_dim {
            return Err(Error::dim(self.in_dim, x.len(), "crossbar input length"));
        }
        let planes = planes(drive)?;
        let k = self.to_weight_units();
        let mut out = vec![0.0; self.out_dim];
        let mut local = Vec::new();
        for b in &self.blocks {
            let rows = b.row0..b.row0 + b.array.rows;
            for plane in &planes {
                local.clear();
                local.extend(
                    plane
                        .lines
                        .iter()
                        .filter(|(i, _)| rows.contains(i))
                        .map(|&(i, a)| (i - b.row0, a)),
                );
                let cur = if local.is_empty() {
                    // Nothing driven: the read still happens, but the result is zero.
                    tally.record(EventKind::CrossbarRead, 1, site);
                    tally.record(EventKind::AdcConversion, b.array.cols as u64, site);
                    None
                } else {
                    Some(b.array.sense_columns(&local, tally, site))
                };
                tally.record(EventKind::ShiftAdd, b.width as u64, site);
                if let Some(cur) = cur {
                    for c in 0..b.width {
                        let d = cur[SignedMapping::positive_column(c)]
                            - cur[SignedMapping::negative_column(c)];
                        out[b.col0 + c] += plane.weight * d * k;
                    }
                }
            }
            tally.record(EventKind::AccumulatorOp, b.width as u64, site);
        }
        Ok(out)
    }

    /// `W · e` (i.e. `e · Wᵀ`) by driving the columns and sensing the rows.
    /// Only transposable layers (BP hardware) have the row-side peripherals.
    pub fn transposed_dot_product(
        &self,
        e: &[f64],
        bits: u32,
        tally: &mut EventTally,
        site: Site,
    ) -> Result<Vec<f64>> {
        if !self.transposable {
            return Err(Error::Mode {
                mode: "DFA".into(),
                what: "transposed read needs row-side peripherals".into(),
            });
        }
        self.transposed_read(Drive::BitSerial { values: e, bits }, tally, site)
    }

    /// Transposed read with an explicit drive; used for ideal-path checks.
    pub fn transposed_read(&self, drive: Drive<'_>, tally: &mut EventTally, site: Site) -> Result<Vec<f64>> {
        if !self.transposable {
            return Err(Error::Mode {
                mode: "DFA".into(),
                what: "transposed read needs row-side peripherals".into(),
            });
        }
        let e = drive.values();
        if e.len() != self.out_dim {
            return Err(Error::dim(self.out_dim, e.len(), "transposed input length"));
        }
        let planes = planes(drive)?;
        let k = self.to_weight_units();
        let mut out = vec![0.0; self.in_dim];
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for b in &self.blocks {
            let cols = b.col0..b.col0 + b.width;
            for plane in &planes {
                pos.clear();
                neg.clear();
                for &(j, a) in plane.lines.iter().filter(|(j, _)| cols.contains(j)) {
                    pos.push((SignedMapping::positive_column(j - b.col0), a));
                    neg.push((SignedMapping::negative_column(j - b.col0), a));
                }
                tally.record(EventKind::ShiftAdd, b.array.rows as u64, site);
                if pos.is_empty() {
                    tally.record(EventKind::CrossbarRead, 2, site);
                    tally.record(EventKind::AdcConversion, 2 * b.array.rows as u64, site);
                    continue;
                }
                let ip = b.array.sense_rows(&pos, b.width, tally, site);
                let ineg = b.array.sense_rows(&neg, b.width, tally, site);
                for r in 0..b.array.rows {
                    out[b.row0 + r] += plane.weight * (ip[r] - ineg[r]) * k;
                }
            }
            tally.record(EventKind::AccumulatorOp, b.array.rows as u64, site);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwmodel::tally::{Phase, Unit};

    fn site() -> Site {
        Site::new(Phase::Forward, Unit::Layer(0))
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_weight_parks_both_devices_at_g_min() {
        let q = quantize_weights(&Matrix::zeros(1, 1), &ConductanceRange::default()).unwrap();
        assert_eq!(q.g_pos.get(0, 0), 1.0);
        assert_eq!(q.g_neg.get(0, 0), 1.0);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn max_weight_reaches_g_max() {
        let w = Matrix::from_rows(&[vec![2.5, -1.0]]).unwrap();
        let q = quantize_weights(&w, &ConductanceRange::default()).unwrap();
        assert_eq!(q.g_pos.get(0, 0), 10.0);
        assert_eq!(q.g_neg.get(0, 0), 1.0);
        assert_eq!(q.scale, 2.5);
    }

    #[test]
    fn half_scale_weight_lands_on_level_eight() {
        // Levels are 1 + 0.6·k µS; the two nearest to 5.5 µS are 5.2 (k=7) and 5.8 (k=8).
        let range = ConductanceRange::default();
        let levels: Vec<f64> = (0..16).map(|k| 1.0 + 0.6 * k as f64).collect();
        assert!((range.level(8) - levels[8]).abs() < 1e-12);
        let w = Matrix::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let q = quantize_weights(&w, &range).unwrap();
        assert!((q.g_pos.get(0, 0) - 5.8).abs() < 1e-12);
        assert_eq!(weight_level(0.5, 1.0, &range), 8);
    }

    #[test]
    fn negative_weights_use_the_negative_column() {
        let w = Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let q = quantize_weights(&w, &ConductanceRange::default()).unwrap();
        assert_eq!((q.g_pos.get(0, 0), q.g_neg.get(0, 0)), (1.0, 10.0));
        let back = dequantize(&q, &ConductanceRange::default());
        assert_eq!(back.row(0), &[-1.0, 1.0]);
    }

    #[test]
    fn non_finite_weights_rejected() {
        let w = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(quantize_weights(&w, &ConductanceRange::default()).is_err());
    }

    #[test]
    fn program_without_noise_is_ideal() {
        let w = Matrix::from_fn(5, 3, |r, c| (r as f64 - 2.0) * 0.3 + c as f64 * 0.1);
        let mut layer =
            CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), false)
                .unwrap();
        let mut t = EventTally::new();
        layer.program(None, &mut rng(), &mut t, site());
        for a in layer.arrays() {
            assert_eq!(a.g_ideal(), a.g_programmed());
        }
        assert_eq!(t.total(EventKind::CrossbarWrite), 5 * 6);
    }

    #[test]
    fn deterministic_offset_noise_shifts_every_cell() {
        let w = Matrix::from_fn(4, 4, |r, c| r as f64 - c as f64);
        let mut layer =
            CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), false)
                .unwrap();
        let model = ConstantNoise { mean: 0.2, std: 0.0 };
        let mut draw = NoiseDraw::new(&model, NoiseInjection::Sample);
        layer.program(Some(&mut draw), &mut rng(), &mut EventTally::new(), site());
        for a in layer.arrays() {
            for (p, i) in a.g_programmed().as_slice().iter().zip(a.g_ideal().as_slice()) {
                assert!((p - i - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = Matrix::from_fn(8, 4, |r, c| (r * 4 + c) as f64 - 10.0);
        let layer =
            CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::default(), ArrayGeometry::default(), true)
                .unwrap();
        let mut t = EventTally::new();
        let y = layer.dot_product(Drive::Spikes(&[0.0; 8]), &mut t, site()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let z = layer.transposed_dot_product(&[0.0; 4], 8, &mut t, site()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_follows_ohm_and_kirchhoff() {
        let layer = CrossbarLayer::deploy(
            &Matrix::from_rows(&[vec![1.0]]).unwrap(),
            ConductanceRange::default(),
            ReadConfig::ideal(),
            ArrayGeometry::default(),
            false,
        )
        .unwrap();
        let a = layer.arrays().next().unwrap();
        let cur = a.sense_columns(&[(0, 1.0)], &mut EventTally::new(), site());
        // (10 µS − 1 µS) · 0.1 V
        assert!((cur[0] - cur[1] - 0.9).abs() < 1e-12);
        let y = layer.dot_product(Drive::Spikes(&[1.0]), &mut EventTally::new(), site()).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_array_at_g_max_saturates_adc() {
        for active in [64, 256] {
            let read = ReadConfig {
                adc_active_rows: active,
                ..ReadConfig::default()
            };
            let mut a = CrossbarArray::new(256, 2, ConductanceRange::default(), read).unwrap();
            for r in 0..256 {
                a.set_ideal(r, 0, 10.0).unwrap();
            }
            a.program(None, &mut rng(), &mut EventTally::new(), site());
            let drive: Vec<(usize, f64)> = (0..256).map(|r| (r, 1.0)).collect();
            let raw: f64 = 256.0 * 10.0 * 0.1;
            let clip = a.clip_current(256);
            assert!(raw >= clip);
            assert_eq!(a.adc_code(raw, clip), Some(15));
            let cur = a.sense_columns(&drive, &mut EventTally::new(), site());
            assert!((cur[0] - clip).abs() < 1e-9);
        }
    }

    #[test]
    fn non_binary_spikes_rejected() {
        let layer = CrossbarLayer::deploy(
            &Matrix::filled(2, 2, 1.0),
            ConductanceRange::default(),
            ReadConfig::default(),
            ArrayGeometry::default(),
            false,
        )
        .unwrap();
        let err = layer
            .dot_product(Drive::Spikes(&[0.5, 1.0]), &mut EventTally::new(), site())
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn transposed_read_needs_transposable_layer() {
        let layer = CrossbarLayer::deploy(
            &Matrix::filled(2, 2, 1.0),
            ConductanceRange::default(),
            ReadConfig::default(),
            ArrayGeometry::default(),
            false,
        )
        .unwrap();
        let err = layer
            .transposed_dot_product(&[1.0, 0.0], 8, &mut EventTally::new(), site())
            .unwrap_err();
        assert!(matches!(err, Error::Mode { .. }));
    }

    #[test]
    fn one_by_one_transposed_matches_forward() {
        for w in [0.7, -0.3] {
            let layer = CrossbarLayer::deploy(
                &Matrix::from_rows(&[vec![w]]).unwrap(),
                ConductanceRange::default(),
                ReadConfig::default(),
                ArrayGeometry::default(),
                true,
            )
            .unwrap();
            for x in [0.37, -1.2, 0.0] {
                let f = layer
                    .dot_product(Drive::BitSerial { values: &[x], bits: 8 }, &mut EventTally::new(), site())
                    .unwrap();
                let t = layer
                    .transposed_dot_product(&[x], 8, &mut EventTally::new(), site())
                    .unwrap();
                assert_eq!(f, t);
            }
        }
    }

    #[test]
    fn layers_larger_than_one_array_are_blocked() {
        let w = Matrix::from_fn(300, 130, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let layer =
            CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), true)
                .unwrap();
        assert_eq!(layer.array_count(), 4);
        let x: Vec<f64> = (0..300).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let y = layer.dot_product(Drive::Spikes(&x), &mut EventTally::new(), site()).unwrap();
        let want = layer.ideal_weights().vecmat(&x).unwrap();
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn reprogram_writes_only_changed_levels() {
        let w = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.25, 0.0]]).unwrap();
        let mut layer =
            CrossbarLayer::deploy(&w, ConductanceRange::default(), ReadConfig::ideal(), ArrayGeometry::default(), false)
                .unwrap();
        let mut t = EventTally::new();
        let n = layer
            .reprogram(&w, false, None, &mut rng(), &mut t, site())
            .unwrap();
        assert_eq!(n, 0);
        // 0.5 sits at 7.5 levels and rounds to 8; the next boundary is 8.5/15.
        let mut w2 = w.clone();
        w2.set(0, 1, 0.56);
        assert_eq!(layer.reprogram(&w2, false, None, &mut rng(), &mut t, site()).unwrap(), 0);
        w2.set(0, 1, 0.58);
        assert_eq!(layer.reprogram(&w2, false, None, &mut rng(), &mut t, site()).unwrap(), 1);
    }

    #[test]
    fn per_read_noise_varies_between_reads() {
        let read = ReadConfig {
            per_read_noise: true,
            adc_bits: None,
            ..ReadConfig::default()
        };
        let mut layer = CrossbarLayer::deploy(
            &Matrix::filled(4, 2, 1.0),
            ConductanceRange::default(),
            read,
            ArrayGeometry::default(),
            false,
        )
        .unwrap();
        let model = ConstantNoise { mean: 0.0, std: 0.5 };
        let mut draw = NoiseDraw::new(&model, NoiseInjection::Sample);
        layer.program(Some(&mut draw), &mut rng(), &mut EventTally::new(), site());
        let x = [1.0; 4];
        let a = layer.dot_product(Drive::Spikes(&x), &mut EventTally::new(), site()).unwrap();
        let b = layer.dot_product(Drive::Spikes(&x), &mut EventTally::new(), site()).unwrap();
        assert_ne!(a, b);
    }
}
