//! Dataset ingestion: Fashion-MNIST (IDX), windowed HAR CSV, synthetic blobs.

use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::LabeledData;
use crate::noise_gpr::csv_error;
use crate::snn::{Encoding, InputBatch};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    FashionMnist,
    UciHar,
    Hhar,
    Synthetic,
}

impl DatasetId {
    /// Default timesteps for the dataset's input layout.
    pub fn timesteps(self) -> Option<usize> {
        match self {
            DatasetId::FashionMnist => Some(5),
            DatasetId::UciHar => Some(128),
            DatasetId::Hhar => Some(100),
            DatasetId::Synthetic => None,
        }
    }

    pub fn channels(self) -> Option<usize> {
        match self {
            DatasetId::FashionMnist => Some(784),
            DatasetId::UciHar => Some(9),
            DatasetId::Hhar => Some(6),
            DatasetId::Synthetic => None,
        }
    }

    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetId::FashionMnist => Some(10),
            DatasetId::UciHar | DatasetId::Hhar => Some(6),
            DatasetId::Synthetic => None,
        }
    }

    /// Row order of the results table.
    pub fn table_rank(self) -> usize {
        match self {
            DatasetId::FashionMnist => 0,
            DatasetId::UciHar => 1,
            DatasetId::Hhar => 2,
            DatasetId::Synthetic => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::FashionMnist => "fashion_mnist",
            DatasetId::UciHar => "uci_har",
            DatasetId::Hhar => "hhar",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fashion_mnist" => Ok(DatasetId::FashionMnist),
            "uci_har" => Ok(DatasetId::UciHar),
            "hhar" => Ok(DatasetId::Hhar),
            "synthetic" => Ok(DatasetId::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (fashion_mnist, uci_har, hhar, synthetic)"
            ))),
        }
    }
}

/// Per-channel affine normalisation fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub id: DatasetId,
    pub train: LabeledData,
    pub test: LabeledData,
    /// Values presented per timestep.
    pub features: usize,
    pub classes: usize,
    pub timesteps: usize,
    pub norm: NormStats,
}

/// Raw per-sample values before encoding: `samples × frame_len`.
struct RawSplit {
    values: Vec<f64>,
    labels: Vec<usize>,
}

/// Mean and standard deviation per channel, where `channel_of(i)` maps a
/// position within a sample onto its channel.
fn fit_norm(values: &[f64], per_sample: usize, channels: usize, channel_of: impl Fn(usize) -> usize) -> NormStats {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut n = vec![0usize; channels];
    for (i, &v) in values.iter().enumerate() {
        let c = channel_of(i % per_sample);
        sum[c] += v;
        n[c] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&n).map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 }).collect();
    for (i, &v) in values.iter().enumerate() {
        let c = channel_of(i % per_sample);
        sq[c] += (v - mean[c]).powi(2);
    }
    let std = sq
        .iter()
        .zip(&n)
        .map(|(s, &k)| {
            let sd = if k > 0 { (s / k as f64).sqrt() } else { 0.0 };
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    NormStats { mean, std }
}

fn apply_norm(values: &mut [f64], per_sample: usize, stats: &NormStats, channel_of: impl Fn(usize) -> usize) {
    for (i, v) in values.iter_mut().enumerate() {
        let c = channel_of(i % per_sample);
        *v = (*v - stats.mean[c]) / stats.std[c];
    }
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Schema(format!("{what}: label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Direct-encoded bundle; every feature is its own channel unless `single_channel`.
fn direct_bundle(
    id: DatasetId,
    mut train: RawSplit,
    mut test: RawSplit,
    features: usize,
    classes: usize,
    timesteps: usize,
    single_channel: bool,
) -> Result<DatasetBundle> {
    check_labels(&train.labels, classes, "train")?;
    check_labels(&test.labels, classes, "test")?;
    let (channels, map): (usize, Box<dyn Fn(usize) -> usize>) = if single_channel {
        (1, Box::new(|_| 0))
    } else {
        (features, Box::new(|i| i))
    };
    let norm = fit_norm(&train.values, features, channels, &map);
    apply_norm(&mut train.values, features, &norm, &map);
    apply_norm(&mut test.values, features, &norm, &map);
    let encode = |split: RawSplit| -> Result<LabeledData> {
        let n = split.labels.len();
        let x = Matrix::from_vec(n, features, split.values)?;
        LabeledData::new(crate::snn::direct_encode(&x, timesteps)?, split.labels)
    };
    Ok(DatasetBundle {
        id,
        train: encode(train)?,
        test: encode(test)?,
        features,
        classes,
        timesteps,
        norm,
    })
}

/// Sequence-encoded bundle: each sample is `timesteps × channels`, time-major.
fn sequence_bundle(
    id: DatasetId,
    mut train: RawSplit,
    mut test: RawSplit,
    channels: usize,
    classes: usize,
    timesteps: usize,
) -> Result<DatasetBundle> {
    check_labels(&train.labels, classes, "train")?;
    check_labels(&test.labels, classes, "test")?;
    let per = channels * timesteps;
    let map = |i: usize| i % channels;
    let norm = fit_norm(&train.values, per, channels, map);
    apply_norm(&mut train.values, per, &norm, map);
    apply_norm(&mut test.values, per, &norm, map);
    let encode = |split: RawSplit| -> Result<LabeledData> {
        let n = split.labels.len();
        LabeledData::new(InputBatch::sequence(n, timesteps, channels, split.values)?, split.labels)
    };
    Ok(DatasetBundle {
        id,
        train: encode(train)?,
        test: encode(test)?,
        features: channels,
        classes,
        timesteps,
        norm,
    })
}

// ---------------------------------------------------------------- IDX

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset: *offset,
        detail: format!("{what}: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Parses an unsigned-byte IDX stream; returns the dimensions and the payload.
pub fn parse_idx(mut r: impl Read) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "IDX magic")?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::Parse {
            offset: 0,
            detail: "IDX magic must start with two zero bytes".into(),
        });
    }
    if magic[2] != 0x08 {
        return Err(Error::Parse {
            offset: 2,
            detail: format!("unsupported IDX element type 0x{:02x}; only unsigned bytes", magic[2]),
        });
    }
    let ndim = magic[3] as usize;
    if ndim == 0 {
        return Err(Error::Parse {
            offset: 3,
            detail: "IDX file has zero dimensions".into(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        read_exact_at(&mut r, &mut d, &mut offset, "IDX dimension")?;
        dims.push(u32::from_be_bytes(d) as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = vec![0u8; len];
    read_exact_at(&mut r, &mut data, &mut offset, "IDX payload")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io("<idx>", e))? != 0 {
        return Err(Error::Parse {
            offset,
            detail: "trailing bytes after IDX payload".into(),
        });
    }
    Ok((dims, data))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn idx_split(dir: &Path, images: &str, labels: &str) -> Result<RawSplit> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let (idims, ibytes) = parse_idx(open(&ip)?).map_err(|e| e.context(ip.display().to_string()))?;
    let (ldims, lbytes) = parse_idx(open(&lp)?).map_err(|e| e.context(lp.display().to_string()))?;
    if idims.len() != 3 || idims[1] * idims[2] != 784 {
        return Err(Error::Schema(format!("{}: expected N×28×28 images, got {idims:?}", ip.display())));
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(Error::Schema(format!(
            "{} images but {} labels",
            idims[0],
            ldims.first().copied().unwrap_or(0)
        )));
    }
    Ok(RawSplit {
        values: ibytes.iter().map(|&b| b as f64 / 255.0).collect(),
        labels: lbytes.iter().map(|&b| b as usize).collect(),
    })
}

/// Fashion-MNIST from the four uncompressed IDX files of the public distribution.
pub fn load_fashion_mnist(dir: &Path, timesteps: usize) -> Result<DatasetBundle> {
    let train = idx_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = idx_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    direct_bundle(DatasetId::FashionMnist, train, test, 784, 10, timesteps, true)
}

// ---------------------------------------------------------------- HAR CSV

/// Header of a windowed HAR CSV: `label` then `c{ch}_t{t}` for every timestep, channel.
pub fn har_header(channels: usize, timesteps: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(1 + channels * timesteps);
    h.push("label".to_string());
    for t in 0..timesteps {
        for c in 0..channels {
            h.push(format!("c{c}_t{t}"));
        }
    }
    h
}

/// Reads a windowed HAR CSV (0-based labels, time-major channel values).
pub fn read_har_csv(r: impl Read, channels: usize, timesteps: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let want = har_header(channels, timesteps);
    if header.len() != want.len() || header.iter().zip(&want).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!(
            "HAR CSV header must be `label,c0_t0,...,c{}_t{}` ({} columns), got {} columns",
            channels - 1,
            timesteps - 1,
            want.len(),
            header.len()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let parse_err = |detail: String| Error::Parse { offset, detail };
        labels.push(
            rec[0]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("label `{}`: {e}", &rec[0])))?,
        );
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|e| parse_err(format!("value `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
    }
    Ok((values, labels))
}

pub fn write_har_csv(
    w: impl std::io::Write,
    channels: usize,
    timesteps: usize,
    values: &[f64],
    labels: &[usize],
) -> Result<()> {
    let per = channels * timesteps;
    if values.len() != per * labels.len() {
        return Err(Error::dim(per * labels.len(), values.len(), "HAR values"));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(har_header(channels, timesteps)).map_err(csv_error)?;
    for (i, y) in labels.iter().enumerate() {
        let mut row = Vec::with_capacity(per + 1);
        row.push(y.to_string());
        row.extend(values[i * per..(i + 1) * per].iter().map(|v| v.to_string()));
        wr.write_record(&row).map_err(csv_error)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

/// UCI-HAR or HHAR from `train.csv` and `test.csv` in `dir`.
pub fn load_har(id: DatasetId, dir: &Path) -> Result<DatasetBundle> {
    let (channels, timesteps, classes) = match id {
        DatasetId::UciHar | DatasetId::Hhar => (
            id.channels().expect("HAR"),
            id.timesteps().expect("HAR"),
            id.classes().expect("HAR"),
        ),
        _ => return Err(Error::Config(format!("{id} is not a HAR dataset"))),
    };
    let read = |name: &str| -> Result<RawSplit> {
        let p = dir.join(name);
        let (values, labels) = read_har_csv(open(&p)?, channels, timesteps).map_err(|e| e.context(p.display().to_string()))?;
        Ok(RawSplit { values, labels })
    };
    sequence_bundle(id, read("train.csv")?, read("test.csv")?, channels, classes, timesteps)
}

// ---------------------------------------------------------------- synthetic

/// Gaussian-blob classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub features: usize,
    pub classes: usize,
    pub samples: usize,
    /// Distance from each class mean to the nearest pairwise bisector, in units of
    /// the within-class standard deviation.
    pub margin: f64,
    pub test_fraction: f64,
    pub timesteps: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            features: 6,
            classes: 6,
            samples: 2000,
            margin: 2.5,
            test_fraction: 0.2,
            timesteps: 4,
        }
    }
}

fn orthonormal_directions(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < d {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            dirs.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    dirs
}

/// Class means spaced at least `2·margin` apart; orthogonal when `classes ≤ features`.
pub fn blob_means(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = orthonormal_directions(spec.classes, spec.features, &mut rng);
    let min_dist = dirs
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            dirs[i + 1..]
                .iter()
                .map(move |b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        })
        .fold(f64::INFINITY, f64::min);
    let scale = if min_dist.is_finite() && min_dist > 0.0 {
        2.0 * spec.margin / min_dist
    } else {
        spec.margin
    };
    dirs.into_iter()
        .map(|d| d.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Raw (unnormalised) blob samples with balanced labels.
pub fn synthetic_samples(spec: &SyntheticSpec, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let means = blob_means(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut values = Vec::with_capacity(spec.samples * spec.features);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % spec.classes;
        for &m in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            values.push(m + z);
        }
        labels.push(y);
    }
    // Deterministic interleaving keeps classes balanced in both splits.
    (values, labels)
}

pub fn gen_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<DatasetBundle> {
    if spec.features == 0 || spec.classes < 2 || spec.samples < spec.classes || spec.timesteps == 0 {
        return Err(Error::Config(format!("invalid synthetic task {spec:?}")));
    }
    if !(spec.margin >= 0.0) || !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Config("margin must be ≥ 0 and test fraction in [0, 1)".into()));
    }
    let (values, labels) = synthetic_samples(spec, seed);
    let n_test = ((spec.samples as f64) * spec.test_fraction).round() as usize;
    let n_train = spec.samples - n_test;
    let f = spec.features;
    let train = RawSplit {
        values: values[..n_train * f].to_vec(),
        labels: labels[..n_train].to_vec(),
    };
    let test = RawSplit {
        values: values[n_train * f..].to_vec(),
        labels: labels[n_train..].to_vec(),
    };
    direct_bundle(DatasetId::Synthetic, train, test, f, spec.classes, spec.timesteps, false)
}

/// Loads a dataset by id. `dir` is ignored for the synthetic task.
pub fn load_dataset(
    id: DatasetId,
    dir: Option<&Path>,
    synthetic: &SyntheticSpec,
    seed: u64,
) -> Result<DatasetBundle> {
    let need_dir = || dir.ok_or_else(|| Error::Config(format!("dataset {id} needs a data directory")));
    match id {
        DatasetId::Synthetic => gen_synthetic_task(synthetic, seed),
        DatasetId::FashionMnist => load_fashion_mnist(need_dir()?, 5),
        DatasetId::UciHar | DatasetId::Hhar => load_har(id, need_dir()?),
    }
}

impl DatasetBundle {
    pub fn encoding(&self) -> Encoding {
        self.train.inputs.encoding()
    }
}

// ---------------------------------------------------------------- converters

const UCI_SIGNALS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

fn read_whitespace_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let row = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        offset,
                        detail: format!("{}: `{s}`: {e}", path.display()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        offset += len;
    }
    Ok(rows)
}

/// Converts the public UCI-HAR distribution (`UCI HAR Dataset/`) into
/// `train.csv`/`test.csv`: the nine inertial signals in their published
/// 128-sample windows, labels shifted from 1..6 to 0..5.
pub fn convert_uci_har(src: &Path, dst: &Path) -> Result<(usize, usize)> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut counts = [0usize; 2];
    for (k, split) in ["train", "test"].into_iter().enumerate() {
        let signals = UCI_SIGNALS
            .iter()
            .map(|s| read_whitespace_rows(&src.join(split).join("Inertial Signals").join(format!("{s}_{split}.txt"))))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = read_whitespace_rows(&src.join(split).join(format!("y_{split}.txt")))?
            .into_iter()
            .map(|r| match r.as_slice() {
                [y] if *y >= 1.0 && *y <= 6.0 && y.fract() == 0.0 => Ok(*y as usize - 1),
                _ => Err(Error::Schema(format!("bad UCI-HAR label row {r:?}"))),
            })
            .collect::<Result<_>>()?;
        let n = labels.len();
        let mut values = Vec::with_capacity(n * 9 * 128);
        for i in 0..n {
            for t in 0..128 {
                for s in &signals {
                    let row = s
                        .get(i)
                        .filter(|r| r.len() == 128)
                        .ok_or_else(|| Error::Schema(format!("{split}: window {i} is not 128 samples")))?;
                    values.push(row[t]);
                }
            }
        }
        let out = dst.join(format!("{split}.csv"));
        let f = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
        write_har_csv(std::io::BufWriter::new(f), 9, 128, &values, &labels)?;
        counts[k] = n;
    }
    Ok((counts[0], counts[1]))
}

const HHAR_ACTIVITIES: [&str; 6] = ["stand", "sit", "walk", "stairsup", "stairsdown", "bike"];

#[derive(Default)]
struct HharStream {
    acc: Vec<([f64; 3], usize)>,
    gyro: Vec<[f64; 3]>,
}

fn read_hhar_sensor(path: &Path) -> Result<std::collections::BTreeMap<(String, String), Vec<(i64, [f64; 3], Option<usize>)>>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(open(path)?);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", path.display())))
    };
    let (ct, x, y, z, user, device, gt) = (
        col("Creation_Time")?,
        col("x")?,
        col("y")?,
        col("z")?,
        col("User")?,
        col("Device")?,
        col("gt")?,
    );
    let mut out: std::collections::BTreeMap<(String, String), Vec<_>> = Default::default();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|e| Error::Parse {
                offset,
                detail: format!("`{}`: {e}", &rec[i]),
            })
        };
        let t = rec[ct].parse::<i64>().map_err(|e| Error::Parse {
            offset,
            detail: format!("Creation_Time `{}`: {e}", &rec[ct]),
        })?;
        let label = HHAR_ACTIVITIES.iter().position(|a| *a == &rec[gt]);
        out.entry((rec[user].to_string(), rec[device].to_string()))
            .or_default()
            .push((t, [num(x)?, num(y)?, num(z)?], label));
    }
    for v in out.values_mut() {
        v.sort_by_key(|s| s.0);
    }
    Ok(out)
}

/// Converts the public HHAR phone recordings into 6-channel, 100-sample windows.
///
/// Policy: `Phones_accelerometer.csv` and `Phones_gyroscope.csv` are grouped per
/// (user, device) and sorted by creation time; the two streams are paired by
/// sample index without resampling; windows are 100 samples with 50% overlap
/// and take the majority activity, skipping windows with unlabelled samples.
/// Users are sorted by name and the last `test_users` form the test split.
pub fn convert_hhar(src: &Path, dst: &Path, test_users: usize) -> Result<(usize, usize)> {
    let acc = read_hhar_sensor(&src.join("Phones_accelerometer.csv"))?;
    let gyro = read_hhar_sensor(&src.join("Phones_gyroscope.csv"))?;
    let mut users: Vec<String> = acc.keys().map(|(u, _)| u.clone()).collect();
    users.sort();
    users.dedup();
    let split_at = users.len().saturating_sub(test_users);
    let test_set: Vec<String> = users[split_at..].to_vec();

    let mut splits = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (key, a) in &acc {
        let Some(g) = gyro.get(key) else { continue };
        let mut s = HharStream::default();
        for (i, (_, av, al)) in a.iter().enumerate() {
            let (Some(label), Some((_, gv, _))) = (al, g.get(i)) else { continue };
            s.acc.push((*av, *label));
            s.gyro.push(*gv);
        }
        let which = usize::from(test_set.contains(&key.0));
        let (values, labels) = &mut splits[which];
        let mut start = 0;
        while start + 100 <= s.acc.len() {
            let mut votes = [0usize; 6];
            for (_, l) in &s.acc[start..start + 100] {
                votes[*l] += 1;
            }
            let label = (0..6).max_by_key(|&k| (votes[k], usize::MAX - k)).expect("six classes");
            for t in start..start + 100 {
                values.extend_from_slice(&s.acc[t].0);
                values.extend_from_slice(&s.gyro[t]);
            }
            labels.push(label);
            start += 50;
        }
    }
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut counts = [0usize; 2];
    for (k, name) in ["train", "test"].into_iter().enumerate() {
        let (values, labels) = &splits[k];
        let out: PathBuf = dst.join(format!("{name}.csv"));
        let f = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
        write_har_csv(std::io::BufWriter::new(f), 6, 100, values, labels)?;
        counts[k] = labels.len();
    }
    Ok((counts[0], counts[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 0x08, dims.len() as u8];
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_round_trip() {
        let (dims, data) = parse_idx(&idx_bytes(&[2, 3], &[1, 2, 3, 4, 5, 6])[..]).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn truncated_idx_reports_offset() {
        let bytes = idx_bytes(&[2, 3], &[1, 2, 3]);
        match parse_idx(&bytes[..]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_idx(&[1u8, 0, 8, 1][..]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(
            parse_idx(&idx_bytes(&[1], &[7, 8])[..]),
            Err(Error::Parse { offset: 9, .. })
        ));
    }

    #[test]
    fn har_csv_round_trip_and_schema_errors() {
        let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let mut buf = Vec::new();
        write_har_csv(&mut buf, 3, 2, &values, &[1, 0]).unwrap();
        let (v, l) = read_har_csv(&buf[..], 3, 2).unwrap();
        assert_eq!((v, l), (values, vec![1, 0]));
        assert!(matches!(read_har_csv(&buf[..], 2, 3), Err(Error::Schema(_))));
        let bad = b"label,c0_t0\n0,zz\n";
        assert!(matches!(read_har_csv(&bad[..], 1, 1), Err(Error::Parse { .. })));
    }

    #[test]
    fn synthetic_task_is_deterministic_and_normalised() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic_task(&spec, 5).unwrap();
        let b = gen_synthetic_task(&spec, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!((a.train.len(), a.test.len()), (1600, 400));
        assert_eq!((a.features, a.classes, a.timesteps), (6, 6, 4));
        for c in 0..6 {
            let col: Vec<f64> = (0..a.train.len()).map(|i| a.train.inputs.frame(0, i)[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blob_means_respect_margin() {
        for (classes, features) in [(6, 6), (10, 4)] {
            let spec = SyntheticSpec {
                classes,
                features,
                margin: 2.5,
                ..SyntheticSpec::default()
            };
            let m = blob_means(&spec, 1);
            for i in 0..classes {
                for j in i + 1..classes {
                    let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= 5.0 - 1e-9, "{classes}x{features}: {d}");
                }
            }
        }
    }

    #[test]
    fn normalisation_uses_train_statistics_only() {
        let train = RawSplit {
            values: vec![0.0, 2.0],
            labels: vec![0, 1],
        };
        let test = RawSplit {
            values: vec![100.0],
            labels: vec![0],
        };
        let b = direct_bundle(DatasetId::Synthetic, train, test, 1, 2, 1, false).unwrap();
        assert_eq!(b.norm.mean, vec![1.0]);
        assert_eq!(b.test.inputs.frame(0, 0), &[99.0]);
    }
}
