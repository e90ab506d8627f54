//! Experiment orchestration: datasets, configuration, runs and reports.

pub mod config;
pub mod data;
pub mod report;
pub mod run;

use std::path::Path;

pub use config::{ExperimentConfig, NoiseConfig, SeedPlan};
pub use data::{gen_synthetic_task, load_dataset, DatasetBundle, DatasetId, SyntheticSpec};
pub use report::{emit_report, ComparisonRow, Report, RunSummary};
pub use run::{run_experiment, RunOutcome};

use crate::error::Result;
use crate::hwmodel::Mode;

/// Outcome of one self-test check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// End-to-end smoke test in `dir`: one short BP and one DFA run on a small
/// synthetic task, a repeat for determinism, and a joined report.
pub fn selftest(dir: &Path) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let base = ExperimentConfig {
        architecture: "6-16-6".into(),
        synthetic: SyntheticSpec {
            samples: 300,
            ..SyntheticSpec::default()
        },
        pretrain: crate::learner::PretrainConfig {
            epochs: 5,
            ..Default::default()
        },
        noise: NoiseConfig {
            samples: 400,
            fit_iterations: 20,
            ..NoiseConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let mut outcomes = Vec::new();
    for mode in [Mode::Bp, Mode::Dfa] {
        let mut cfg = base.clone();
        cfg.adapt.mode = mode;
        cfg.adapt.epochs = 1;
        cfg.output_dir = dir.join(mode.to_string().to_lowercase());
        let out = run_experiment(&cfg)?;
        checks.push(Check {
            name: if mode == Mode::Bp { "bp run completes" } else { "dfa run completes" },
            passed: run::is_complete(&out.dir) && out.history.len() == 1,
            detail: format!(
                "pre {:.1}% post {:.1}% energy {:.3e} mJ",
                out.summary.pre_adapt_acc, out.summary.post_adapt_acc, out.summary.energy_mj
            ),
        });
        outcomes.push((cfg, out));
    }

    let (cfg, first) = &outcomes[1];
    let mut again = cfg.clone();
    again.output_dir = dir.join("dfa_repeat");
    run_experiment(&again)?;
    let a = std::fs::read(first.dir.join("summary.csv")).map_err(|e| crate::Error::io(&first.dir, e))?;
    let b = std::fs::read(again.output_dir.join("summary.csv")).map_err(|e| crate::Error::io(&again.output_dir, e))?;
    checks.push(Check {
        name: "repeat run is byte-identical",
        passed: a == b,
        detail: format!("{} bytes", a.len()),
    });

    let report = emit_report(
        &[outcomes[0].1.dir.clone(), outcomes[1].1.dir.clone()],
        &dir.join("report"),
    )?;
    let row = report.rows.first();
    checks.push(Check {
        name: "report joins the BP/DFA pair",
        passed: report.rows.len() == 1 && row.is_some_and(|r| r.warning.is_empty() && r.energy_saving_pct.is_some()),
        detail: row.map_or_else(String::new, |r| {
            format!(
                "energy saving {:.1}%, speedup {:.2}x",
                r.energy_saving_pct.unwrap_or(f64::NAN),
                r.latency_speedup.unwrap_or(f64::NAN)
            )
        }),
    });
    Ok(checks)
}
