//! Result files and the cross-run comparison report.
//!
//! Every CSV starts with one `#` line naming the file kind and its schema
//! version, followed by a header row. Readers skip `#` lines after checking
//! the first one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::data::DatasetId;
use super::run::is_complete;
use crate::error::{Error, Result};
use crate::hwmodel::{
    compare_modes, AreaBreakdown, CostReport, EnergyBreakdown, LatencyBreakdown, Mode, Workload,
};
use crate::learner::EpochRecord;
use crate::noise_gpr::csv_error;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

fn schema_line(kind: &str, extra: &str) -> String {
    format!("# imc-snn {kind} schema_version={RESULTS_SCHEMA_VERSION}{extra}\n")
}

fn to_csv<T: Serialize>(kind: &str, extra: &str, rows: &[T]) -> Result<String> {
    let mut out = schema_line(kind, extra).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    String::from_utf8(out).map_err(|e| Error::Internal(e.to_string()))
}

fn from_csv<T: DeserializeOwned>(kind: &str, text: &str) -> Result<Vec<T>> {
    let want = schema_line(kind, "");
    let first = text.lines().next().unwrap_or("");
    if !first.starts_with(want.trim_end()) {
        return Err(Error::Schema(format!(
            "expected first line `{}`, found `{first}`",
            want.trim_end()
        )));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: DatasetId,
    pub architecture: String,
    pub timesteps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    /// Full-precision software accuracy of the checkpoint.
    pub pretrained_acc: f64,
    /// Programmed without device noise: quantization and read-out effects only.
    pub quantized_acc: f64,
    pub pre_adapt_acc: f64,
    pub post_adapt_acc: f64,
    /// Per-epoch on-chip energy; the DRAM constant is only in `breakdown_energy.csv`.
    pub energy_mj: f64,
    pub latency_ms: f64,
    pub area_mm2: f64,
    pub noise_rmse_us: Option<f64>,
}

impl RunSummary {
    pub fn to_csv(&self) -> Result<String> {
        to_csv("summary", "", std::slice::from_ref(self))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Self> = from_csv("summary", text)?;
        match rows.len() {
            1 => Ok(rows.remove(0)),
            n => Err(Error::Schema(format!("summary.csv must hold one row, found {n}"))),
        }
    }

    pub fn workload(&self) -> Workload {
        Workload {
            architecture: self.architecture.clone(),
            timesteps: self.timesteps,
            batch_size: self.batch_size,
            batches_per_epoch: self.batches_per_epoch,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    noisy_test_acc: f64,
    energy_mj: f64,
    latency_ms: f64,
    cells_written: usize,
}

pub fn write_epochs(history: &[EpochRecord]) -> Result<String> {
    let rows: Vec<EpochRow> = history
        .iter()
        .map(|h| EpochRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            noisy_test_acc: h.test_accuracy,
            energy_mj: h.energy_mj,
            latency_ms: h.latency_ms,
            cells_written: h.cells_written,
        })
        .collect();
    to_csv("epochs", "", &rows)
}

pub fn read_epochs(text: &str) -> Result<Vec<EpochRecord>> {
    let rows: Vec<EpochRow> = from_csv("epochs", text)?;
    Ok(rows
        .into_iter()
        .map(|r| EpochRecord {
            epoch: r.epoch,
            train_loss: r.train_loss,
            test_accuracy: r.noisy_test_acc,
            energy_mj: r.energy_mj,
            latency_ms: r.latency_ms,
            cells_written: r.cells_written,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BreakdownRow {
    mode: Mode,
    component: String,
    value: f64,
}

const TOTAL: &str = "total";

fn breakdown_csv(kind: &str, unit: &str, mode: Mode, labels: &[&str], values: &[f64], total: f64) -> Result<String> {
    let mut rows: Vec<BreakdownRow> = labels
        .iter()
        .zip(values)
        .map(|(l, v)| BreakdownRow {
            mode,
            component: l.to_string(),
            value: *v,
        })
        .collect();
    rows.push(BreakdownRow {
        mode,
        component: TOTAL.into(),
        value: total,
    });
    to_csv(kind, &format!(" unit={unit}"), &rows)
}

fn parse_breakdown<const N: usize>(kind: &str, text: &str, labels: &[&str; N]) -> Result<(Mode, [f64; N])> {
    let rows: Vec<BreakdownRow> = from_csv(kind, text)?;
    if rows.len() != N + 1 {
        return Err(Error::Schema(format!("{kind}: expected {} rows, found {}", N + 1, rows.len())));
    }
    let mode = rows[0].mode;
    let mut values = [0.0; N];
    for (i, (row, label)) in rows.iter().zip(labels).enumerate() {
        if row.component != *label || row.mode != mode {
            return Err(Error::Schema(format!(
                "{kind}: row {i} is `{}`/{}, expected `{label}`/{mode}",
                row.component, row.mode
            )));
        }
        values[i] = row.value;
    }
    let total = &rows[N];
    let sum: f64 = values.iter().sum();
    if total.component != TOTAL || (total.value - sum).abs() > 1e-9 * sum.abs().max(1e-300) {
        return Err(Error::Schema(format!(
            "{kind}: total {} does not equal component sum {sum}",
            total.value
        )));
    }
    Ok((mode, values))
}

/// Writes `breakdown_energy.csv`, `breakdown_area.csv` and `breakdown_latency.csv`.
pub fn write_breakdowns(dir: &Path, report: &CostReport) -> Result<()> {
    let files = [
        (
            "breakdown_energy",
            breakdown_csv(
                "breakdown_energy",
                "mJ",
                report.mode,
                &EnergyBreakdown::LABELS,
                &report.energy.values(),
                report.energy.total(),
            )?,
        ),
        (
            "breakdown_area",
            breakdown_csv(
                "breakdown_area",
                "mm2",
                report.mode,
                &AreaBreakdown::LABELS,
                &report.area.values(),
                report.area.total(),
            )?,
        ),
        (
            "breakdown_latency",
            breakdown_csv(
                "breakdown_latency",
                "ms",
                report.mode,
                &LatencyBreakdown::LABELS,
                &report.latency.values(),
                report.latency.total(),
            )?,
        ),
    ];
    for (name, text) in files {
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Rebuilds the cost report of a finished run from its CSV files.
pub fn read_run(dir: &Path) -> Result<(RunSummary, CostReport)> {
    let ctx = |e: Error| e.context(dir.display().to_string());
    let summary = RunSummary::from_csv(&read(&dir.join("summary.csv"))?).map_err(ctx)?;
    let (m1, e) =
        parse_breakdown("breakdown_energy", &read(&dir.join("breakdown_energy.csv"))?, &EnergyBreakdown::LABELS)
            .map_err(ctx)?;
    let (m2, a) =
        parse_breakdown("breakdown_area", &read(&dir.join("breakdown_area.csv"))?, &AreaBreakdown::LABELS)
            .map_err(ctx)?;
    let (m3, l) = parse_breakdown(
        "breakdown_latency",
        &read(&dir.join("breakdown_latency.csv"))?,
        &LatencyBreakdown::LABELS,
    )
    .map_err(ctx)?;
    if [m1, m2, m3].iter().any(|&m| m != summary.mode) {
        return Err(ctx(Error::Schema("breakdown files disagree with summary mode".into())));
    }
    let report = CostReport {
        mode: summary.mode,
        workload: summary.workload(),
        energy: EnergyBreakdown {
            tile_compute: e[0],
            htree: e[1],
            wgu: e[2],
            global_units: e[3],
            buffers: e[4],
            dram: e[5],
        },
        latency: LatencyBreakdown {
            forward: l[0],
            backward: l[1],
            wgu_update: l[2],
            communication: l[3],
        },
        area: AreaBreakdown {
            crossbars: a[0],
            peripherals: a[1],
            transposable_duplicates: a[2],
            b_tile: a[3],
            wgu: a[4],
            buffers: a[5],
            htree: a[6],
            global_units: a[7],
        },
        accuracy: Some(summary.post_adapt_acc),
    };
    Ok((summary, report))
}

/// One line of the comparison table; fields of a missing mode are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub architecture: String,
    pub timesteps: usize,
    pub bp_runs: usize,
    pub dfa_runs: usize,
    pub pretrained_acc: f64,
    pub bp_pre_adapt_acc: Option<f64>,
    pub bp_post_adapt_acc: Option<f64>,
    pub dfa_pre_adapt_acc: Option<f64>,
    pub dfa_post_adapt_acc: Option<f64>,
    pub bp_energy_mj: Option<f64>,
    pub dfa_energy_mj: Option<f64>,
    pub bp_latency_ms: Option<f64>,
    pub dfa_latency_ms: Option<f64>,
    pub bp_area_mm2: Option<f64>,
    pub dfa_area_mm2: Option<f64>,
    pub energy_saving_pct: Option<f64>,
    pub area_saving_pct: Option<f64>,
    pub latency_speedup: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub warning: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ComparisonRow>,
    /// Directories skipped because they hold no finished run.
    pub skipped: Vec<PathBuf>,
}

type GroupKey = (usize, String, String, usize, usize, usize);

struct ModeRuns {
    summaries: Vec<RunSummary>,
    reports: Vec<CostReport>,
}

impl ModeRuns {
    fn mean(&self, f: impl Fn(&RunSummary) -> f64) -> f64 {
        self.summaries.iter().map(f).sum::<f64>() / self.summaries.len() as f64
    }
}

/// Expands each path: a finished run directory is used directly, any other
/// directory contributes its finished immediate subdirectories.
pub fn discover_runs(paths: &[PathBuf]) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        if p.join("summary.csv").exists() || p.join(super::run::STATUS_FILE).exists() {
            if is_complete(p) {
                runs.push(p.clone());
            } else {
                skipped.push(p.clone());
            }
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|d| d.is_dir())
            .collect();
        children.sort();
        for c in children {
            if is_complete(&c) {
                runs.push(c);
            } else if c.join(super::run::STATUS_FILE).exists() {
                skipped.push(c);
            }
        }
    }
    Ok((runs, skipped))
}

/// Joins BP/DFA runs on matching workloads (averaging repeated seeds) and
/// writes `comparison.csv` plus `plot_energy.csv`, `plot_area.csv`,
/// `plot_latency.csv` into `out_dir`. Rows follow the dataset order of the
/// results table.
pub fn emit_report(run_paths: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let (runs, skipped) = discover_runs(run_paths)?;
    if runs.is_empty() {
        return Err(Error::Input("no completed run found".into()));
    }
    let mut groups: BTreeMap<GroupKey, BTreeMap<Mode, ModeRuns>> = BTreeMap::new();
    for dir in &runs {
        let (s, r) = read_run(dir)?;
        let key = (
            s.dataset.table_rank(),
            s.dataset.to_string(),
            s.architecture.clone(),
            s.timesteps,
            s.batch_size,
            s.batches_per_epoch,
        );
        let entry = groups.entry(key).or_default().entry(s.mode).or_insert(ModeRuns {
            summaries: Vec::new(),
            reports: Vec::new(),
        });
        entry.summaries.push(s);
        entry.reports.push(r);
    }

    let mut rows = Vec::new();
    let mut plots: [Vec<PlotRow>; 3] = Default::default();
    for ((_, dataset, architecture, timesteps, _, _), modes) in &groups {
        let mut row = ComparisonRow {
            dataset: dataset.clone(),
            architecture: architecture.clone(),
            timesteps: *timesteps,
            ..ComparisonRow::default()
        };
        let mut means: BTreeMap<Mode, CostReport> = BTreeMap::new();
        let mut pretrained = Vec::new();
        for (mode, runs) in modes {
            let mut mean = CostReport::mean(&runs.reports)?;
            let post = runs.mean(|s| s.post_adapt_acc);
            let pre = runs.mean(|s| s.pre_adapt_acc);
            mean.accuracy = Some(post);
            pretrained.push(runs.mean(|s| s.pretrained_acc));
            match mode {
                Mode::Bp => {
                    row.bp_runs = runs.summaries.len();
                    row.bp_pre_adapt_acc = Some(pre);
                    row.bp_post_adapt_acc = Some(post);
                    row.bp_energy_mj = Some(mean.energy.on_chip());
                    row.bp_latency_ms = Some(mean.latency_ms());
                    row.bp_area_mm2 = Some(mean.area_mm2());
                }
                Mode::Dfa => {
                    row.dfa_runs = runs.summaries.len();
                    row.dfa_pre_adapt_acc = Some(pre);
                    row.dfa_post_adapt_acc = Some(post);
                    row.dfa_energy_mj = Some(mean.energy.on_chip());
                    row.dfa_latency_ms = Some(mean.latency_ms());
                    row.dfa_area_mm2 = Some(mean.area_mm2());
                }
            }
            push_plot_rows(&mut plots, dataset, architecture, *timesteps, &mean);
            means.insert(*mode, mean);
        }
        row.pretrained_acc = pretrained.iter().sum::<f64>() / pretrained.len() as f64;
        match (means.get(&Mode::Bp), means.get(&Mode::Dfa)) {
            (Some(bp), Some(dfa)) => {
                let c = compare_modes(bp, dfa)?;
                row.energy_saving_pct = Some(c.energy_saving_pct);
                row.area_saving_pct = Some(c.area_saving_pct);
                row.latency_speedup = Some(c.latency_speedup);
                row.accuracy_delta = c.accuracy_delta;
            }
            (Some(_), None) => row.warning = "no DFA run for this workload".into(),
            (None, Some(_)) => row.warning = "no BP run for this workload".into(),
            (None, None) => unreachable!("groups are created with at least one run"),
        }
        if !row.warning.is_empty() {
            log::warn!("{dataset} {architecture}: {}", row.warning);
        }
        rows.push(row);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("comparison.csv", to_csv("comparison", "", &rows)?)?;
    for (name, unit, data) in [
        ("plot_energy", "mJ", &plots[0]),
        ("plot_area", "mm2", &plots[1]),
        ("plot_latency", "ms", &plots[2]),
    ] {
        write(&format!("{name}.csv"), to_csv(name, &format!(" unit={unit}"), data)?)?;
    }
    Ok(Report { rows, skipped })
}

pub fn read_comparison(text: &str) -> Result<Vec<ComparisonRow>> {
    from_csv("comparison", text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlotRow {
    dataset: String,
    architecture: String,
    timesteps: usize,
    mode: Mode,
    component: String,
    value: f64,
}

fn push_plot_rows(plots: &mut [Vec<PlotRow>; 3], dataset: &str, arch: &str, timesteps: usize, r: &CostReport) {
    let mut push = |k: usize, labels: &[&str], values: &[f64]| {
        for (l, v) in labels.iter().zip(values) {
            plots[k].push(PlotRow {
                dataset: dataset.into(),
                architecture: arch.into(),
                timesteps,
                mode: r.mode,
                component: l.to_string(),
                value: *v,
            });
        }
    };
    push(0, &EnergyBreakdown::LABELS, &r.energy.values());
    push(1, &AreaBreakdown::LABELS, &r.area.values());
    push(2, &LatencyBreakdown::LABELS, &r.latency.values());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mode: Mode) -> RunSummary {
        RunSummary {
            dataset: DatasetId::Hhar,
            architecture: "6-256-128-64-6".into(),
            timesteps: 100,
            mode,
            seed: 3,
            batch_size: 50,
            batches_per_epoch: 10,
            epochs: 25,
            pretrained_acc: 90.77,
            quantized_acc: 88.0,
            pre_adapt_acc: 39.6,
            post_adapt_acc: 82.55,
            energy_mj: 0.0474,
            latency_ms: 8.67,
            area_mm2: 19.5,
            noise_rmse_us: None,
        }
    }

    #[test]
    fn summary_round_trips() {
        let s = summary(Mode::Dfa);
        let text = s.to_csv().unwrap();
        assert!(text.starts_with("# imc-snn summary schema_version=1\n"));
        assert_eq!(RunSummary::from_csv(&text).unwrap(), s);
        assert!(matches!(RunSummary::from_csv("dataset\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn breakdown_total_is_checked_on_read() {
        let text = breakdown_csv("breakdown_latency", "ms", Mode::Bp, &LatencyBreakdown::LABELS, &[1.0, 2.0, 3.0, 4.0], 10.0)
            .unwrap();
        let (m, v) = parse_breakdown("breakdown_latency", &text, &LatencyBreakdown::LABELS).unwrap();
        assert_eq!((m, v), (Mode::Bp, [1.0, 2.0, 3.0, 4.0]));
        let bad = text.replace("bp,total,10", "bp,total,11");
        assert!(matches!(
            parse_breakdown("breakdown_latency", &bad, &LatencyBreakdown::LABELS),
            Err(Error::Schema(_))
        ));
    }
}
