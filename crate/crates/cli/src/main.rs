//! `addm`: phantom generation, training, sampling, detection and evaluation.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O or file
//! format failure, 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use addm::anodetect::{self, DetectParams};
use addm::config::{self, RunConfig};
use addm::diffusion;
use addm::io::checkpoint;
use addm::io::manifest::DatasetManifest;
use addm::io::{preview, tensor_file};
use addm::metrics::Aggregation;
use addm::phantoms::{self, TEST_MANIFEST, TRAIN_MANIFEST, VAL_MANIFEST};
use addm::{training, Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "addm", version, about = "Adversarial denoising diffusion for anomaly segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build phantom train/val/test sets and their manifests.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the normal-only train manifest of a data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unconditional ancestral samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image anomaly maps and masks for the test manifest.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noising depth; defaults to T/4.
        #[arg(long = "t-ad")]
        t_ad: Option<usize>,
        /// Quantile of validation residuals used as threshold.
        #[arg(long)]
        quantile: Option<f64>,
        /// Fixed threshold; skips the validation pass.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "n-recon")]
        n_recon: Option<usize>,
        /// Run configuration supplying detection defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dataset metrics from a detection results directory.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average per-image values instead of pooling pixels.
        #[arg(long = "macro")]
        macro_avg: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Sample { ckpt, n, out } => sample(&ckpt, n, &out),
        Command::Detect {
            ckpt,
            data,
            out,
            t_ad,
            quantile,
            threshold,
            n_recon,
            config,
        } => {
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let opts = DetectOptions {
                t_ad: t_ad.or(base.t_ad),
                quantile: quantile.unwrap_or(base.quantile),
                threshold,
                n_recon: n_recon.unwrap_or(base.n_recon),
            };
            detect(&ckpt, &data, &out, &opts)
        }
        Command::Eval { results, out, macro_avg } => {
            let aggregation = if macro_avg { Aggregation::Macro } else { Aggregation::Micro };
            eval(&results, &out, aggregation)
        }
    }
}

fn gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let built = phantoms::build_dataset(&config.phantom_spec(), config.dataset_sizes(), out)?;
    config.write_effective(out)?;
    log::info!(
        "wrote {} train, {} val, {} test images to {}",
        built.train.records.len(),
        built.val.records.len(),
        built.test.records.len(),
        out.display()
    );
    Ok(())
}

fn train(config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let manifest = DatasetManifest::load(&data.join(TRAIN_MANIFEST))?;
    config.write_effective(out)?;
    let output = training::train_on_manifest(&config.train_config(), &manifest, out)?;
    log::info!(
        "trained {} steps; checkpoint {}",
        output.state.step,
        output.final_checkpoint.display()
    );
    Ok(())
}

/// Checkpoint seed unless `ADDM_SEED` is set.
fn run_seed(header_seed: u64) -> Result<u64> {
    Ok(config::seed_from_env()?.unwrap_or(header_seed))
}

fn sample(ckpt: &Path, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let (denoiser, schedule, header) = checkpoint::load_denoiser(ckpt)?;
    let s = header.config.denoiser.image_size;
    let seed = run_seed(header.seed)?;
    let samples = diffusion::sample(&denoiser, &schedule, &[n, 1, s, s], seed)?;
    tensor_file::write(&out.join("samples.adtf"), &samples)?;
    preview::write_pgm(&out.join("samples.pgm"), &samples)?;
    log::info!("wrote {n} samples (seed {seed}) to {}", out.display());
    Ok(())
}

struct DetectOptions {
    t_ad: Option<usize>,
    quantile: f64,
    threshold: Option<f64>,
    n_recon: usize,
}

fn detect(ckpt: &Path, data: &Path, out: &Path, opts: &DetectOptions) -> Result<()> {
    let (denoiser, schedule, header) = checkpoint::load_denoiser(ckpt)?;
    let t_ad = opts.t_ad.unwrap_or_else(|| anodetect::default_t_ad(schedule.steps()));
    schedule.check_t(t_ad).map_err(|_| {
        Error::invalid("t-ad", format!("must lie in 1..={}, got {t_ad}", schedule.steps()))
    })?;
    let seed = run_seed(header.seed)?;
    let test = DatasetManifest::load(&data.join(TEST_MANIFEST))?;
    let threshold = match opts.threshold {
        Some(th) => th,
        None => {
            let val_path = data.join(VAL_MANIFEST);
            let val_path = if val_path.is_file() {
                val_path
            } else {
                log::warn!("no {VAL_MANIFEST}; choosing the threshold on {TRAIN_MANIFEST}");
                data.join(TRAIN_MANIFEST)
            };
            let val = DatasetManifest::load(&val_path)?;
            anodetect::threshold_from_validation(&denoiser, &schedule, &val, t_ad, opts.n_recon, seed, opts.quantile)?
        }
    };
    log::info!("t_ad {t_ad}, threshold {threshold:.6}, n_recon {}", opts.n_recon);
    let params = DetectParams {
        t_ad,
        threshold,
        n_recon: opts.n_recon,
        seed,
    };
    let records = anodetect::detect_dataset(&denoiser, &schedule, &test, &params, out)?;
    log::info!("wrote {} detection records to {}", records.len(), out.display());
    Ok(())
}

fn eval(results: &Path, out: &Path, aggregation: Aggregation) -> Result<()> {
    let records = anodetect::read_records(results)?;
    let table = anodetect::evaluate_records(results, &records, aggregation)?;
    let mut json = serde_json::to_string_pretty(&table).expect("metrics serialize");
    json.push('\n');
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    println!("{}", serde_json::to_string(&table).expect("metrics serialize"));
    Ok(())
}
