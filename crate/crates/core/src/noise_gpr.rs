//! Exact 1-D Gaussian-process regression of conductance deviation ΔG against
//! the ideal conductance, with an RBF kernel and a constant mean.
//!
//! Repeated inputs are collapsed into sufficient statistics (group mean,
//! count, within-group sum of squares). For a noise-only likelihood this is
//! exact: a group of `n` observations at one input behaves like a single
//! observation of its mean with noise variance `σ_n²/n`, plus an independent
//! within-group term. Device data lives on a few programming levels, so this
//! keeps exact inference cheap even for thousands of samples.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crossbar::{ConductanceNoise, ConductanceRange};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    #[default]
    All,
    Train,
    Test,
}

/// `(G_ideal, ΔG)` pairs in µS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseDataset {
    pub pairs: Vec<(f64, f64)>,
    pub split: SplitTag,
}

impl NoiseDataset {
    pub fn new(pairs: Vec<(f64, f64)>) -> Self {
        Self {
            pairs,
            split: SplitTag::All,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps only samples whose ideal conductance lies inside the device window.
    pub fn clean(&self, range: &ConductanceRange) -> NoiseDataset {
        NoiseDataset {
            pairs: self
                .pairs
                .iter()
                .copied()
                .filter(|(g, dg)| {
                    g.is_finite() && dg.is_finite() && *g >= range.g_min && *g <= range.g_max
                })
                .collect(),
            split: self.split,
        }
    }

    /// Random split; the train side gets `round(n · train_fraction)` samples.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(NoiseDataset, NoiseDataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.pairs.len() as f64 * train_fraction).round() as usize;
        let pick = |ids: &[usize], split| NoiseDataset {
            pairs: ids.iter().map(|&i| self.pairs[i]).collect(),
            split,
        };
        Ok((
            pick(&idx[..n_train], SplitTag::Train),
            pick(&idx[n_train..], SplitTag::Test),
        ))
    }

    /// Reads `g_uS,dg_uS` CSV.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        if headers.len() != 2 || &headers[0] != "g_uS" || &headers[1] != "dg_uS" {
            return Err(Error::Schema(format!(
                "noise dataset header must be `g_uS,dg_uS`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse {
                        offset,
                        detail: "missing field".into(),
                    })?
                    .parse()
                    .map_err(|e| Error::Parse {
                        offset,
                        detail: format!("{e}"),
                    })
            };
            pairs.push((field(0)?, field(1)?));
        }
        Ok(Self::new(pairs))
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["g_uS", "dg_uS"]).map_err(csv_error)?;
        for (g, dg) in &self.pairs {
            w.write_record([g.to_string(), dg.to_string()]).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f)).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Parse {
        offset,
        detail: e.to_string(),
    }
}

/// Shape of the synthetic device-noise generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Linear trend of ΔG around the window midpoint.
    pub slope: f64,
    /// Noise standard deviation at 0 µS.
    pub sigma0: f64,
    /// Growth of the noise standard deviation per µS.
    pub sigma1: f64,
    pub range: ConductanceRange,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            slope: -0.05,
            sigma0: 0.25,
            sigma1: 0.1,
            range: ConductanceRange::default(),
        }
    }
}

impl SynthParams {
    pub fn std_at(&self, g: f64) -> f64 {
        self.sigma0 + self.sigma1 * g
    }

    /// Root-mean-square noise over uniformly drawn levels: the best achievable RMSE.
    pub fn noise_floor(&self) -> f64 {
        let levels = self.range.levels();
        let ms: f64 = (0..levels)
            .map(|k| self.std_at(self.range.level(k)).powi(2))
            .sum::<f64>()
            / levels as f64;
        ms.sqrt()
    }
}

/// Synthetic stand-in for chip measurements: ideal conductances uniform over the
/// device levels, ΔG with a linear trend and conductance-dependent spread.
pub fn synth_neurram_like(n: usize, params: &SynthParams, seed: u64) -> Result<NoiseDataset> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples, got {n}")));
    }
    params.range.validate()?;
    if params.sigma0 < 0.0 || params.sigma1 < 0.0 {
        return Err(Error::Config("noise spreads must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = 0.5 * (params.range.g_min + params.range.g_max);
    let pairs = (0..n)
        .map(|_| {
            let g = params.range.level(rng.random_range(0..params.range.levels()));
            let z: f64 = rng.sample(StandardNormal);
            (g, params.slope * (g - centre) + params.std_at(g) * z)
        })
        .collect();
    Ok(NoiseDataset::new(pairs))
}

/// RBF-kernel hyperparameters plus the constant mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfHyper {
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
    pub mean: f64,
}

impl RbfHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.signal_var) && ok(self.lengthscale) && ok(self.noise_var) && self.mean.is_finite()) {
            return Err(Error::Config(format!("invalid GP hyperparameters {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.signal_var * (-d * d / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    fn to_log(self) -> [f64; 4] {
        [
            self.signal_var.ln(),
            self.lengthscale.ln(),
            self.noise_var.ln(),
            self.mean,
        ]
    }

    fn from_log(p: [f64; 4]) -> Self {
        Self {
            signal_var: p[0].exp(),
            lengthscale: p[1].exp(),
            noise_var: p[2].exp(),
            mean: p[3],
        }
    }
}

/// Training data collapsed over identical inputs.
#[derive(Clone, Debug)]
struct Grouped {
    x: Vec<f64>,
    counts: Vec<f64>,
    ybar: Vec<f64>,
    within_ss: f64,
    n: usize,
}

impl Grouped {
    fn new(data: &NoiseDataset) -> Result<Self> {
        if data.pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Input("non-finite training pair".into()));
        }
        let mut pairs = data.pairs.clone();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut g = Grouped {
            x: Vec::new(),
            counts: Vec::new(),
            ybar: Vec::new(),
            within_ss: 0.0,
            n: pairs.len(),
        };
        let mut i = 0;
        while i < pairs.len() {
            let x = pairs[i].0;
            let mut j = i;
            while j < pairs.len() && pairs[j].0 == x {
                j += 1;
            }
            let ys = &pairs[i..j];
            let mean = ys.iter().map(|p| p.1).sum::<f64>() / ys.len() as f64;
            g.within_ss += ys.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>();
            g.x.push(x);
            g.counts.push(ys.len() as f64);
            g.ybar.push(mean);
            i = j;
        }
        Ok(g)
    }

    fn m(&self) -> usize {
        self.x.len()
    }
}

/// Factorised `K_u + σ_n² D⁻¹` for one hyperparameter setting.
struct Factor {
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

fn factorize(g: &Grouped, h: &RbfHyper, jitter: Option<f64>) -> Result<Factor> {
    let m = g.m();
    let build = |extra: f64| {
        DMatrix::from_fn(m, m, |i, j| {
            let mut k = h.kernel(g.x[i], g.x[j]);
            if i == j {
                k += h.noise_var / g.counts[i] + extra;
            }
            k
        })
    };
    let attempts: Vec<f64> = match jitter {
        Some(j) => vec![j],
        None => vec![0.0, 1e-6 * h.signal_var],
    };
    for extra in attempts {
        if let Some(chol) = nalgebra::Cholesky::new(build(extra)) {
            let r = DVector::from_iterator(m, g.ybar.iter().map(|y| y - h.mean));
            let alpha = chol.solve(&r);
            return Ok(Factor {
                l: chol.l(),
                alpha,
                jitter: extra,
            });
        }
    }
    Err(Error::Conditioning(format!(
        "kernel matrix not positive definite at {h:?} even with jitter"
    )))
}

fn lml_from_factor(g: &Grouped, h: &RbfHyper, f: &Factor) -> f64 {
    let m = g.m() as f64;
    let n = g.n as f64;
    let r: f64 = g
        .ybar
        .iter()
        .zip(f.alpha.iter())
        .map(|(y, a)| (y - h.mean) * a)
        .sum();
    let log_det: f64 = (0..g.m()).map(|i| f.l[(i, i)].ln()).sum::<f64>();
    let within = -0.5 * g.within_ss / h.noise_var - 0.5 * (n - m) * (LN_2PI + h.noise_var.ln());
    let counts: f64 = -0.5 * g.counts.iter().map(|c| c.ln()).sum::<f64>();
    within + counts - 0.5 * r - log_det - 0.5 * m * LN_2PI
}

/// Gradient with respect to `(ln σ_f², ln ℓ, ln σ_n², m₀)`.
fn lml_gradient(g: &Grouped, h: &RbfHyper, f: &Factor) -> [f64; 4] {
    let m = g.m();
    // A = K_eff⁻¹ from the Cholesky factor.
    let mut inv = DMatrix::identity(m, m);
    f.l.solve_lower_triangular_mut(&mut inv);
    let a_inv = inv.transpose() * &inv;
    let a = &f.alpha;
    let l2 = h.lengthscale * h.lengthscale;
    let (mut d_sf, mut d_len, mut d_noise) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            let w = a[i] * a[j] - a_inv[(i, j)];
            let k = h.kernel(g.x[i], g.x[j]);
            let d = g.x[i] - g.x[j];
            d_sf += w * k;
            d_len += w * k * d * d / l2;
        }
        d_noise += (a[i] * a[i] - a_inv[(i, i)]) * h.noise_var / g.counts[i];
    }
    let n = g.n as f64;
    d_noise = 0.5 * d_noise + 0.5 * g.within_ss / h.noise_var - 0.5 * (n - m as f64);
    [0.5 * d_sf, 0.5 * d_len, d_noise, a.iter().sum()]
}

/// Exact log marginal likelihood of `data` under `hyper`.
pub fn log_marginal_likelihood(data: &NoiseDataset, hyper: &RbfHyper) -> Result<f64> {
    hyper.validate()?;
    let g = Grouped::new(data)?;
    let f = factorize(&g, hyper, Some(0.0))?;
    Ok(lml_from_factor(&g, hyper, &f))
}

/// Analytic gradient of the log marginal likelihood with respect to
/// `(ln σ_f², ln ℓ, ln σ_n², m₀)`.
pub fn log_marginal_likelihood_gradient(data: &NoiseDataset, hyper: &RbfHyper) -> Result<[f64; 4]> {
    hyper.validate()?;
    let g = Grouped::new(data)?;
    let f = factorize(&g, hyper, Some(0.0))?;
    Ok(lml_gradient(&g, hyper, &f))
}

/// Posterior at one query conductance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    /// Latent-function variance σ*².
    pub variance: f64,
    /// Observation noise σ_n².
    pub noise_var: f64,
}

impl Prediction {
    /// Variance of a new noisy observation.
    pub fn predictive_var(&self) -> f64 {
        self.variance + self.noise_var
    }
}

/// Optimisation record of a fit.
#[derive(Clone, Debug, Default)]
pub struct FitTrace {
    /// Log marginal likelihood after each accepted (or final) iteration.
    pub lml: Vec<f64>,
}

#[derive(Debug)]
pub struct GprNoiseModel {
    hyper: RbfHyper,
    inputs: Vec<f64>,
    counts: Vec<f64>,
    alpha: Vec<f64>,
    l: DMatrix<f64>,
    jitter: f64,
    clamped: AtomicU64,
}

impl Clone for GprNoiseModel {
    fn clone(&self) -> Self {
        Self {
            hyper: self.hyper,
            inputs: self.inputs.clone(),
            counts: self.counts.clone(),
            alpha: self.alpha.clone(),
            l: self.l.clone(),
            jitter: self.jitter,
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kernel: String,
    mean: f64,
    signal_var: f64,
    lengthscale: f64,
    noise_var: f64,
    jitter: f64,
    inputs: Vec<f64>,
    counts: Vec<f64>,
    alpha: Vec<f64>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

impl GprNoiseModel {
    /// Conditions the GP on `train` at fixed hyperparameters.
    pub fn with_hyperparameters(train: &NoiseDataset, hyper: RbfHyper) -> Result<Self> {
        hyper.validate()?;
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let g = Grouped::new(train)?;
        let f = factorize(&g, &hyper, None)?;
        Ok(Self::from_parts(&g, hyper, f))
    }

    fn from_parts(g: &Grouped, hyper: RbfHyper, f: Factor) -> Self {
        Self {
            hyper,
            inputs: g.x.clone(),
            counts: g.counts.clone(),
            alpha: f.alpha.iter().copied().collect(),
            l: f.l,
            jitter: f.jitter,
            clamped: AtomicU64::new(0),
        }
    }

    /// Initial hyperparameters: `σ_f² = var(y)`, `ℓ = range(x)/4`, `σ_n² = 0.1·var(y)`, `m₀ = mean(y)`.
    pub fn initial_hyperparameters(train: &NoiseDataset) -> RbfHyper {
        let n = train.len() as f64;
        let mean = train.pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let var = (train.pairs.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).max(1e-12);
        let (lo, hi) = train
            .pairs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let span = hi - lo;
        RbfHyper {
            signal_var: var,
            lengthscale: if span > 0.0 { span / 4.0 } else { 1.0 },
            noise_var: 0.1 * var,
            mean,
        }
    }

    /// Maximises the log marginal likelihood by gradient ascent with a
    /// backtracking line search for `iterations` steps.
    pub fn fit(train: &NoiseDataset, iterations: usize) -> Result<Self> {
        Self::fit_traced(train, iterations).map(|(m, _)| m)
    }

    pub fn fit_traced(train: &NoiseDataset, iterations: usize) -> Result<(Self, FitTrace)> {
        if train.len() < 2 {
            return Err(Error::Input(format!(
                "GP fit needs at least 2 training points, got {}",
                train.len()
            )));
        }
        let g = Grouped::new(train)?;
        let mut hyper = Self::initial_hyperparameters(train);
        let mut factor = factorize(&g, &hyper, None)?;
        let mut lml = lml_from_factor(&g, &hyper, &factor);
        let mut trace = FitTrace { lml: vec![lml] };
        let mut step = 1.0;

        for _ in 0..iterations {
            let grad = lml_gradient(&g, &hyper, &factor);
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < 1e-10 {
                break;
            }
            let scale = 1.0 / norm.max(1.0);
            let dir: Vec<f64> = grad.iter().map(|v| v * scale).collect();
            let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let base = hyper.to_log();
            let mut accepted = None;
            let mut eta = step;
            for _ in 0..40 {
                let mut p = base;
                for k in 0..4 {
                    p[k] += eta * dir[k];
                }
                for v in &mut p[..3] {
                    *v = v.clamp(-30.0, 30.0);
                }
                let trial = RbfHyper::from_log(p);
                if let Ok(f) = factorize(&g, &trial, Some(0.0)) {
                    let val = lml_from_factor(&g, &trial, &f);
                    if val.is_finite() && val >= lml + 1e-4 * eta * slope {
                        accepted = Some((trial, f, val));
                        break;
                    }
                }
                eta *= 0.5;
            }
            match accepted {
                Some((h, f, val)) => {
                    hyper = h;
                    factor = f;
                    lml = val;
                    trace.lml.push(lml);
                    step = (eta * 2.0).min(1.0);
                }
                None => break,
            }
        }
        Ok((Self::from_parts(&g, hyper, factor), trace))
    }

    pub fn hyperparameters(&self) -> RbfHyper {
        self.hyper
    }

    /// Distinct training inputs retained by the model.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Number of predictions whose latent variance had to be clamped at zero.
    pub fn clamped_variances(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn predict(&self, g: f64) -> Result<Prediction> {
        if self.inputs.is_empty() {
            return Err(Error::State("GP model has no training data".into()));
        }
        let h = &self.hyper;
        let kstar: Vec<f64> = self.inputs.iter().map(|&x| h.kernel(g, x)).collect();
        let mean = h.mean + kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum::<f64>();
        // v = L⁻¹ k*, σ*² = k(g,g) − vᵀv
        let m = self.inputs.len();
        let mut v = kstar;
        for i in 0..m {
            let mut s = v[i];
            for j in 0..i {
                s -= self.l[(i, j)] * v[j];
            }
            v[i] = s / self.l[(i, i)];
        }
        let mut variance = h.signal_var - v.iter().map(|x| x * x).sum::<f64>();
        if variance < 0.0 {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            variance = 0.0;
        }
        Ok(Prediction {
            mean,
            variance,
            noise_var: h.noise_var,
        })
    }

    /// Draws `ΔG ~ N(μ*(g), σ*²(g) + σ_n²)`.
    pub fn sample(&self, g: f64, rng: &mut impl Rng) -> Result<f64> {
        let p = self.predict(g)?;
        let sd = p.predictive_var().sqrt();
        if sd == 0.0 {
            return Ok(p.mean);
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(p.mean + sd * z)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kernel: "rbf".into(),
            mean: self.hyper.mean,
            signal_var: self.hyper.signal_var,
            lengthscale: self.hyper.lengthscale,
            noise_var: self.hyper.noise_var,
            jitter: self.jitter,
            inputs: self.inputs.clone(),
            counts: self.counts.clone(),
            alpha: self.alpha.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            detail: e.to_string(),
        })?;
        if file.format_version != MODEL_FORMAT_VERSION || file.kernel != "rbf" {
            return Err(Error::Schema(format!(
                "unsupported GP model format {} / kernel `{}`",
                file.format_version, file.kernel
            )));
        }
        let m = file.inputs.len();
        if file.counts.len() != m || file.alpha.len() != m {
            return Err(Error::Schema("inputs, counts and alpha lengths differ".into()));
        }
        let hyper = RbfHyper {
            signal_var: file.signal_var,
            lengthscale: file.lengthscale,
            noise_var: file.noise_var,
            mean: file.mean,
        };
        hyper.validate()?;
        let g = Grouped {
            x: file.inputs,
            counts: file.counts,
            ybar: vec![hyper.mean; m],
            within_ss: 0.0,
            n: 0,
        };
        let f = factorize(&g, &hyper, Some(file.jitter))?;
        Ok(Self {
            hyper,
            inputs: g.x,
            counts: g.counts,
            alpha: file.alpha,
            l: f.l,
            jitter: file.jitter,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

impl ConductanceNoise for GprNoiseModel {
    fn delta_moments(&self, g_ideal: f64) -> (f64, f64) {
        self.predict(g_ideal)
            .map(|p| (p.mean, p.predictive_var()))
            .unwrap_or((0.0, 0.0))
    }
}

/// Root-mean-square error of the posterior mean on `test`.
pub fn evaluate_rmse(model: &GprNoiseModel, test: &NoiseDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut se = 0.0;
    for &(g, dg) in &test.pairs {
        se += (model.predict(g)?.mean - dg).powi(2);
    }
    Ok((se / test.len() as f64).sqrt())
}

/// RMSE of arbitrary predictions against targets.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Input("RMSE needs equal, non-empty vectors".into()));
    }
    let se: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> RbfHyper {
        RbfHyper {
            signal_var: 1.0,
            lengthscale: 1.5,
            noise_var: 1e-9,
            mean: 0.0,
        }
    }

    #[test]
    fn zero_targets_predict_zero() {
        let data = NoiseDataset::new((0..10).map(|i| (1.0 + i as f64, 0.0)).collect());
        let model = GprNoiseModel::fit(&data, 100).unwrap();
        for k in 0..90 {
            let g = 1.0 + 0.1 * k as f64;
            assert!(model.predict(g).unwrap().mean.abs() < 1e-6);
        }
    }

    #[test]
    fn interpolates_training_targets() {
        let data = NoiseDataset::new(vec![(1.0, 0.3), (2.5, -0.4), (4.0, 0.1), (7.0, 0.5)]);
        let model = GprNoiseModel::with_hyperparameters(&data, hyper()).unwrap();
        for &(g, y) in &data.pairs {
            assert!((model.predict(g).unwrap().mean - y).abs() < 1e-4);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let data = NoiseDataset::new(vec![(1.0, 0.3), (5.0, -0.2), (10.0, 0.4)]);
        let h = RbfHyper {
            mean: 0.05,
            noise_var: 0.01,
            ..hyper()
        };
        let model = GprNoiseModel::with_hyperparameters(&data, h).unwrap();
        let p = model.predict(100.0).unwrap();
        assert!((p.mean - 0.05).abs() < 1e-12);
        assert!((p.predictive_var() - 1.01).abs() < 1e-12);
    }

    #[test]
    fn rmse_of_perfect_and_known_errors() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn empty_test_set_is_input_error() {
        let data = NoiseDataset::new(vec![(1.0, 0.3), (5.0, -0.2)]);
        let model = GprNoiseModel::with_hyperparameters(&data, hyper()).unwrap();
        assert!(matches!(
            evaluate_rmse(&model, &NoiseDataset::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn too_few_points_rejected() {
        let data = NoiseDataset::new(vec![(1.0, 0.3)]);
        assert!(GprNoiseModel::fit(&data, 10).is_err());
    }

    #[test]
    fn synthetic_split_sizes() {
        let data = synth_neurram_like(8650, &SynthParams::default(), 1).unwrap();
        let (train, test) = data.split(0.8, 2).unwrap();
        assert_eq!((train.len(), test.len()), (6920, 1730));
        assert_eq!(train.split, SplitTag::Train);
    }

    #[test]
    fn noiseless_generator_is_all_zero() {
        let p = SynthParams {
            slope: 0.0,
            sigma0: 0.0,
            sigma1: 0.0,
            ..SynthParams::default()
        };
        let data = synth_neurram_like(100, &p, 3).unwrap();
        assert!(data.pairs.iter().all(|&(_, dg)| dg == 0.0));
        assert!(data.pairs.iter().all(|&(g, _)| p.range.is_on_level(g)));
        assert!(synth_neurram_like(9, &p, 3).is_err());
    }

    #[test]
    fn generator_spread_grows_with_conductance() {
        let p = SynthParams::default();
        let data = synth_neurram_like(20_000, &p, 4).unwrap();
        let spread = |g0: f64| {
            let v: Vec<f64> = data
                .pairs
                .iter()
                .filter(|(g, _)| (g - g0).abs() < 1e-9)
                .map(|p| p.1)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(spread(10.0) > spread(1.0));
    }

    #[test]
    fn cleaning_drops_out_of_window_samples() {
        let d = NoiseDataset::new(vec![(0.5, 0.1), (1.0, 0.2), (10.0, 0.3), (10.5, 0.0)]);
        let c = d.clean(&ConductanceRange::default());
        assert_eq!(c.pairs, vec![(1.0, 0.2), (10.0, 0.3)]);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let d = NoiseDataset::new(vec![(1.0, 0.25), (5.8, -0.125)]);
        let mut buf = Vec::new();
        d.to_writer(&mut buf).unwrap();
        assert!(buf.starts_with(b"g_uS,dg_uS\n"));
        assert_eq!(NoiseDataset::from_reader(&buf[..]).unwrap(), d);
        assert!(matches!(
            NoiseDataset::from_reader(&b"g,dg\n1,2\n"[..]),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            NoiseDataset::from_reader(&b"g_uS,dg_uS\n1,abc\n"[..]),
            Err(Error::Parse { .. })
        ));
    }
}
