use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use imc_snn::harness::data::{convert_hhar, convert_uci_har, load_dataset};
use imc_snn::harness::run::{obtain_checkpoint, obtain_noise_model};
use imc_snn::harness::{emit_report, run_experiment, selftest, DatasetId, ExperimentConfig, SeedPlan};
use imc_snn::hwmodel::Mode;
use imc_snn::Result;

#[derive(Parser)]
#[command(name = "imc-snn", version, about = "Online adaptation of spiking MLPs on simulated RRAM crossbars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the GP device-noise model and save it as JSON.
    FitNoise(FitNoiseArgs),
    /// Train a full-precision checkpoint in software.
    Pretrain(PretrainArgs),
    /// Run a full experiment: program, evaluate, adapt, evaluate, write results.
    Adapt(ExperimentArgs),
    /// Join finished runs into comparison tables and plot data.
    Report(ReportArgs),
    /// Quick end-to-end check on a small synthetic task.
    Selftest(SelftestArgs),
    /// Convert a public HAR distribution into the windowed CSV layout.
    ConvertHar(ConvertArgs),
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Layer widths, e.g. 6-256-128-64-6.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Results directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Hardware description (TOML).
    #[arg(long)]
    hardware: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Saved GP noise model (from fit-noise).
    #[arg(long)]
    noise_model: Option<PathBuf>,
    /// Program devices at their ideal levels.
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    adc_bits: Option<u32>,
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetId, String> {
    s.parse().map_err(|e: imc_snn::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: imc_snn::Error| e.to_string())
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(a) = &self.arch {
            cfg.architecture = a.clone();
        }
        if let Some(t) = self.timesteps {
            cfg.timesteps = Some(t);
            cfg.synthetic.timesteps = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(h) = &self.hardware {
            cfg.hardware = Some(h.clone());
        }
        if let Some(m) = self.mode {
            cfg.adapt.mode = m;
        }
        if let Some(e) = self.epochs {
            cfg.adapt.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.adapt.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.adapt.batch_size = b;
        }
        if let Some(n) = &self.noise_model {
            cfg.noise.model = Some(n.clone());
        }
        if self.no_noise {
            cfg.noise.enabled = false;
        }
        if let Some(b) = self.adc_bits {
            cfg.device.read.adc_bits = Some(b);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct FitNoiseArgs {
    /// Measured pairs as CSV with header `g_uS,dg_uS`; synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8650)]
    samples: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long, default_value = "noise_model.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Checkpoint file to write; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Scratch directory; a fresh temporary directory when omitted.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HarFormat {
    /// `UCI HAR Dataset/` with `train|test/Inertial Signals/*.txt` and `y_*.txt`:
    /// 9 channels in the published 128-sample windows, labels shifted to 0..5.
    UciHar,
    /// `Phones_accelerometer.csv` and `Phones_gyroscope.csv`: per (user, device),
    /// sorted by creation time, paired by sample index without resampling
    /// (3 accelerometer + 3 gyroscope channels), 100-sample windows with 50%
    /// overlap, majority label, unlabelled samples dropped; the last
    /// `--test-users` users by name form the test split.
    Hhar,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    format: HarFormat,
    /// Root of the public distribution.
    #[arg(long)]
    src: PathBuf,
    /// Output directory for train.csv and test.csv.
    #[arg(long)]
    dst: PathBuf,
    #[arg(long, default_value_t = 2)]
    test_users: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitNoise(a) => {
            let cfg = ExperimentConfig {
                noise: imc_snn::harness::NoiseConfig {
                    data: a.data,
                    samples: a.samples,
                    train_fraction: a.train_fraction,
                    fit_iterations: a.iterations,
                    ..Default::default()
                },
                ..ExperimentConfig::default()
            };
            let (model, rmse) = obtain_noise_model(&cfg, a.seed)?.expect("noise is enabled");
            model.save(&a.out)?;
            let h = model.hyperparameters();
            println!(
                "signal_var {:.4} lengthscale {:.4} noise_var {:.4} mean {:.4}",
                h.signal_var, h.lengthscale, h.noise_var, h.mean
            );
            if let Some(r) = rmse {
                println!("test RMSE = {r:.3} uS");
            }
            println!("wrote {}", a.out.display());
        }
        Command::Pretrain(a) => {
            let cfg = a.experiment.resolve()?;
            cfg.validate()?;
            let cfg = cfg.resolved()?;
            let net = cfg.network()?;
            let seeds = SeedPlan::from_seed(cfg.seed);
            let data = load_dataset(cfg.dataset, cfg.data_dir.as_deref(), &cfg.synthetic, seeds.data)?;
            let ck = obtain_checkpoint(&ExperimentConfig { checkpoint: None, ..cfg.clone() }, &net, &data)?;
            let path = a.save.unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| imc_snn::Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            ck.save(&path)?;
            println!(
                "{} T={} software accuracy {:.2}%, wrote {}",
                net.architecture(),
                net.timesteps,
                ck.software_accuracy.unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Adapt(a) => {
            let out = run_experiment(&a.resolve()?)?;
            let s = &out.summary;
            println!(
                "{} {} {} T={}: pretrained {:.2}% quantized {:.2}% pre-adapt {:.2}% post-adapt {:.2}%",
                s.dataset, s.mode, s.architecture, s.timesteps, s.pretrained_acc, s.quantized_acc, s.pre_adapt_acc,
                s.post_adapt_acc
            );
            println!(
                "per epoch: energy {:.4} mJ, latency {:.3} ms; area {:.2} mm2; results in {}",
                s.energy_mj,
                s.latency_ms,
                s.area_mm2,
                out.dir.display()
            );
        }
        Command::Report(a) => {
            let report = emit_report(&a.runs, &a.out)?;
            for p in &report.skipped {
                eprintln!("warning: skipped unfinished run {}", p.display());
            }
            for r in &report.rows {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
                println!(
                    "{:<14} {:<22} T={:<4} BP {:>6}% DFA {:>6}% | energy -{}% area -{}% speedup {}x {}",
                    r.dataset,
                    r.architecture,
                    r.timesteps,
                    f(r.bp_post_adapt_acc),
                    f(r.dfa_post_adapt_acc),
                    f(r.energy_saving_pct),
                    f(r.area_saving_pct),
                    f(r.latency_speedup),
                    if r.warning.is_empty() { String::new() } else { format!("[{}]", r.warning) }
                );
            }
            println!("wrote {}", a.out.display());
        }
        Command::Selftest(a) => {
            let tmp;
            let dir = match a.dir {
                Some(d) => d,
                None => {
                    tmp = std::env::temp_dir().join(format!("imc-snn-selftest-{}", std::process::id()));
                    tmp
                }
            };
            let checks = selftest(&dir)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(imc_snn::Error::State(format!("{failed} self-test check(s) failed")));
            }
        }
        Command::ConvertHar(a) => {
            let (train, test) = match a.format {
                HarFormat::UciHar => convert_uci_har(&a.src, &a.dst)?,
                HarFormat::Hhar => convert_hhar(&a.src, &a.dst, a.test_users)?,
            };
            println!("wrote {train} train and {test} test windows to {}", a.dst.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
