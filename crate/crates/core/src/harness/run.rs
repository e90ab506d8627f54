//! One experiment: pretrain or load, program, evaluate, adapt, evaluate, write results.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, SeedPlan};
use super::data::{load_dataset, DatasetBundle};
use super::report::{write_breakdowns, write_epochs, RunSummary};
use crate::deployment::{HardwareDeployment, SharedNoise};
use crate::error::{Error, Result};
use crate::hwmodel::{CostReport, EventTally, Mode};
use crate::learner::{adapt, evaluate, pretrain, Checkpoint, EpochRecord, FeedbackMatrices};
use crate::noise_gpr::{evaluate_rmse, synth_neurram_like, GprNoiseModel, NoiseDataset};
use crate::snn::{DenseSynapses, NetworkSpec};

pub const STATUS_FILE: &str = "STATUS";

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub history: Vec<EpochRecord>,
    pub report: CostReport,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the configured checkpoint or trains one from scratch.
pub fn obtain_checkpoint(cfg: &ExperimentConfig, net: &NetworkSpec, data: &DatasetBundle) -> Result<Checkpoint> {
    match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.net != *net {
                return Err(Error::Config(format!(
                    "checkpoint {} holds {} at T={}, config asks for {} at T={}",
                    path.display(),
                    ck.net.architecture(),
                    ck.net.timesteps,
                    net.architecture(),
                    net.timesteps
                )));
            }
            Ok(ck)
        }
        None => {
            let (weights, losses) = pretrain(net, &data.train, &cfg.pretrain)?;
            log::info!(
                "pretrained {} for {} epochs, final loss {:.4}",
                net.architecture(),
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            let acc = evaluate(net, &DenseSynapses(&weights), &data.test)?;
            Checkpoint::new(net.clone(), weights, Some(acc))
        }
    }
}

/// Noise model selected by the configuration, plus its held-out RMSE when fitted here.
pub fn obtain_noise_model(cfg: &ExperimentConfig, seed: u64) -> Result<Option<(GprNoiseModel, Option<f64>)>> {
    let n = &cfg.noise;
    if !n.enabled {
        return Ok(None);
    }
    if let Some(path) = &n.model {
        return Ok(Some((GprNoiseModel::load(path)?, None)));
    }
    let pairs = match &n.data {
        Some(path) => NoiseDataset::read_csv(path)?.clean(&cfg.device.range),
        None => synth_neurram_like(n.samples, &n.synthetic, seed)?,
    };
    let (train, test) = pairs.split(n.train_fraction, seed)?;
    let model = GprNoiseModel::fit(&train, n.fit_iterations)?;
    let rmse = if test.is_empty() { None } else { Some(evaluate_rmse(&model, &test)?) };
    Ok(Some((model, rmse)))
}

fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let resolved = cfg.resolved()?;
    write(&dir.join("resolved_config.toml"), &resolved.to_toml()?)?;
    let seeds = SeedPlan::from_seed(cfg.seed);
    let net = resolved.network()?;
    let hw = resolved.hardware_config()?;

    let data = load_dataset(resolved.dataset, resolved.data_dir.as_deref(), &resolved.synthetic, seeds.data)
        .map_err(|e| e.context("loading dataset"))?;
    if data.features != net.inputs() || data.classes != net.classes() || data.timesteps != net.timesteps {
        return Err(Error::Config(format!(
            "dataset provides {} features, {} classes, T={}; network is {} at T={}",
            data.features,
            data.classes,
            data.timesteps,
            net.architecture(),
            net.timesteps
        )));
    }

    let ck = obtain_checkpoint(&resolved, &net, &data).map_err(|e| e.context("pretraining"))?;
    ck.save(&dir.join("checkpoint.json"))?;
    let software_acc = match ck.software_accuracy {
        Some(a) => a,
        None => evaluate(&net, &DenseSynapses(&ck.weights), &data.test)?,
    };

    let noise = obtain_noise_model(&resolved, seeds.noise_data).map_err(|e| e.context("noise model"))?;
    let noise_rmse = noise.as_ref().and_then(|(_, r)| *r);
    if let Some((model, _)) = &noise {
        model.save(&dir.join("noise_model.json"))?;
    }

    let mode = resolved.adapt.mode;
    let feedback = (mode == Mode::Dfa).then(|| FeedbackMatrices::random(&net, seeds.feedback));
    let mut deployment = HardwareDeployment::new(&net, &ck.weights, feedback.as_ref(), mode, &hw, &resolved.device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.programming);
    let mut setup = EventTally::new();
    deployment.program(&mut rng, &mut setup);
    let quantized_acc = evaluate(&net, &deployment, &data.test)?;
    let pre_acc = match noise {
        Some((model, _)) => {
            let shared: SharedNoise = Arc::new(model);
            deployment.set_noise(Some(shared));
            deployment.program(&mut rng, &mut setup);
            evaluate(&net, &deployment, &data.test)?
        }
        None => quantized_acc,
    };
    log::info!("{mode}: software {software_acc:.2}%, quantized {quantized_acc:.2}%, noisy {pre_acc:.2}%");

    let mut weights = ck.weights.clone();
    let outcome = adapt(&mut deployment, &mut weights, &data.train, &data.test, &resolved.adapt, &mut rng)
        .map_err(|e| e.context("adaptation"))?;
    let post_acc = outcome.history.last().map_or(pre_acc, |h| h.test_accuracy);
    let mut report = outcome.report;
    report.accuracy = Some(post_acc);

    let summary = RunSummary {
        dataset: resolved.dataset,
        architecture: net.architecture(),
        timesteps: net.timesteps,
        mode,
        seed: resolved.seed,
        batch_size: report.workload.batch_size,
        batches_per_epoch: report.workload.batches_per_epoch,
        epochs: outcome.history.len(),
        pretrained_acc: software_acc,
        quantized_acc,
        pre_adapt_acc: pre_acc,
        post_adapt_acc: post_acc,
        energy_mj: report.energy.on_chip(),
        latency_ms: report.latency_ms(),
        area_mm2: report.area_mm2(),
        noise_rmse_us: noise_rmse,
    };
    write(&dir.join("summary.csv"), &summary.to_csv()?)?;
    write(&dir.join("epochs.csv"), &write_epochs(&outcome.history)?)?;
    write_breakdowns(dir, &report)?;
    write(&dir.join("cost_report.json"), &report.to_json()?)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
        history: outcome.history,
        report,
    })
}

/// Runs the full pipeline into `cfg.output_dir`. `STATUS` reads `incomplete`
/// until every output is written, and keeps the error text on failure.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let status = dir.join(STATUS_FILE);
    write(&status, "incomplete\n")?;
    match execute(cfg, &dir) {
        Ok(out) => {
            write(&status, "complete\n")?;
            Ok(out)
        }
        Err(e) => {
            let e = e.context(format!("run in {}", dir.display()));
            // The run error matters more than a failure to record it.
            let _ = write(&status, &format!("incomplete\nerror: {e}\n"));
            Err(e)
        }
    }
}

/// True when `dir` holds a finished run.
pub fn is_complete(dir: &Path) -> bool {
    fs::read_to_string(dir.join(STATUS_FILE)).is_ok_and(|s| s.lines().next() == Some("complete"))
}
