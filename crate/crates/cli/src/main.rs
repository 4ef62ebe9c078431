mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use equirecon::dataset::{encode_ppm, generate_mini_iebench, ingest_ppm_dir, planar_to_hwc, Dataset, DatasetError};
use equirecon::eval::{eval_classification, eval_equivariance, EvalError, ProbeInput};
use equirecon::gradcore::{op_suite, CheckResult, OpKind, REL_TOLERANCE};
use equirecon::imageops;
use equirecon::model::{Model, ModelError};
use equirecon::train::{self, model_gradcheck, Checkpoint, EpochMetrics, TrainError, TrainOutput};
use equirecon::views::{item_seed, make_view_pair};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "equirecon", version, about = "Split invariant/equivariant representation learning with reconstruction")]
#[command(after_help = "Any config key can be overridden with --<key>=<value>, e.g. --train.epochs=5")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (or ingest a PPM directory) into an EQDS file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoder, heads and decoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probe a frozen encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "equivariance")]
        mode: Mode,
        /// CSV destination (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every differentiable op and a small full model against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write (v1, v2, reconstruction) triplets as PPM files.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    VicregOnly,
    ReconOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Equivariance,
    Classification,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

const USAGE: u8 = 1;
const IO: u8 = 3;
const NUMERICAL: u8 = 4;
const GRADCHECK: u8 = 5;

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { IO } else { USAGE };
        Failure::new(code, e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let code = if matches!(e, DatasetError::Config(_)) { USAGE } else { IO };
        Failure::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFinite { .. } => NUMERICAL,
            TrainError::Checkpoint { .. } | TrainError::Corrupted { .. } | TrainError::Io { .. } => IO,
            _ => USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(USAGE, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(USAGE, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(IO, format!("{}: {}", path.display(), e))
}

/// Splits `--section.key=value` overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a.strip_prefix("--").and_then(|s| s.split_once('=')).filter(|(k, _)| k.contains('.'));
        match parsed {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    eprintln!("resolved config:\n{}", cfg.render());
    Ok(cfg)
}

fn data_path(cli: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli.unwrap_or_else(|| PathBuf::from(cfg.raw("paths.data")))
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = data_path(out, cfg);
    let ppm_dir = cfg.raw("data.ppm_dir");
    let dataset = if ppm_dir.is_empty() {
        generate_mini_iebench(&cfg.dataset()?)?
    } else {
        let labels = cfg.raw("data.labels_file");
        if labels.is_empty() {
            return Err(Failure::new(USAGE, "data.labels_file must be set when data.ppm_dir is"));
        }
        let size: usize = cfg.get("data.image_size")?;
        ingest_ppm_dir(Path::new(ppm_dir), Path::new(labels), size)?
    };
    dataset.save(&out)?;
    println!("wrote {} images ({}x{}) to {}", dataset.len(), dataset.width, dataset.height, out.display());
    Ok(())
}

fn pretrain(cfg: RunConfig, data: Option<PathBuf>, out_dir: Option<PathBuf>, resume: Option<PathBuf>) -> Result<(), Failure> {
    let train_cfg = cfg.train()?;
    let model_cfg = cfg.model()?;
    let dataset = Dataset::load(&data_path(data, &cfg))?;
    if (dataset.height, dataset.width) != (model_cfg.encoder.image_size, model_cfg.encoder.image_size) {
        return Err(Failure::new(
            USAGE,
            format!(
                "dataset images are {}x{} but data.image_size is {}",
                dataset.width, dataset.height, model_cfg.encoder.image_size
            ),
        ));
    }
    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(cfg.raw("paths.out_dir")));
    fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir, e))?;
    let resolved = cfg.render();
    let config_path = out_dir.join("config.txt");
    fs::write(&config_path, &resolved).map_err(|e| io_failure(&config_path, e))?;
    let checkpoint = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let mut model = Model::new(model_cfg, cfg.get("model.seed")?)?;
    println!("model has {} parameters", model.params.num_elements());
    let mut log = |m: &EpochMetrics| {
        let l = &m.loss;
        eprintln!(
            "epoch {:>4}  total {:.5}  inv {:.5}  var {:.5}  cov {:.5}  recon {:.5}",
            m.epoch, l.total, l.invariance, l.variance, l.covariance, l.recon
        );
    };
    let out = TrainOutput { dir: &out_dir, meta: resolved, on_epoch: Some(&mut log) };
    let summary = train::train(&dataset, &mut model, &train_cfg, checkpoint.as_ref(), out)?;
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

/// Rebuilds the model described by a checkpoint's stored config.
fn load_model(path: &Path) -> Result<(Model, RunConfig), Failure> {
    let ck = Checkpoint::load(path)?;
    let mut stored = RunConfig::default();
    stored
        .apply_text(&ck.meta)
        .map_err(|e| Failure::new(USAGE, format!("checkpoint {} carries an unusable config: {}", path.display(), e)))?;
    let mut model = Model::new(stored.model()?, 0)?;
    ck.restore_params(&mut model)?;
    Ok((model, stored))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<PathBuf>, mode: Mode, out: Option<PathBuf>) -> Result<(), Failure> {
    let probe = cfg.probe()?;
    let (model, _) = load_model(checkpoint)?;
    let dataset = Dataset::load(&data_path(data, cfg))?;
    let seed: u64 = cfg.get("probe.seed")?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let (csv, default_name) = match mode {
        Mode::Equivariance => {
            let report = eval_equivariance(ProbeInput::Encoder(&model), &dataset, &cfg.views()?, &probe, seed)?;
            for w in &report.warnings {
                eprintln!("warning: {}", w);
            }
            println!("{}", report.table());
            (report.to_csv(), "equivariance.csv")
        }
        Mode::Classification => {
            let report = eval_classification(&model, &dataset, &probe, seed)?;
            println!(
                "classification: held-out accuracy {:.4} (train {:.4}), {} classes, train {} / held-out {}",
                report.accuracy, report.train_accuracy, report.classes, report.train_size, report.test_size
            );
            (format!("metric,value\naccuracy,{}\ntrain_accuracy,{}\n", report.accuracy, report.train_accuracy), "classification.csv")
        }
    };
    let out = out.unwrap_or_else(|| dir.join(default_name));
    fs::write(&out, csv).map_err(|e| io_failure(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(inject_fault: Option<String>) -> Result<(), Failure> {
    let fault = match inject_fault {
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| Failure::new(USAGE, format!("unknown op {:?}", name)))?),
        None => None,
    };
    let mut results: Vec<(Option<OpKind>, CheckResult)> = Vec::new();
    for check in op_suite() {
        let r = check.run(fault).map_err(|e| Failure::new(GRADCHECK, format!("{}: {}", check.name, e)))?;
        results.push((check.kind, r));
    }
    let full = model_gradcheck(0)?;
    let r = full.run(fault).map_err(|e| Failure::new(GRADCHECK, format!("full model: {}", e)))?;
    results.push((None, r));

    println!("{:<28} {:>12} {:>8}  status", "check", "max rel err", "elems");
    for (_, r) in &results {
        println!("{:<28} {:>12.3e} {:>8}  {}", r.name, r.max_rel_error, r.checked, if r.passed() { "ok" } else { "FAIL" });
    }
    println!("\nworst case per op (tolerance {:e}):", REL_TOLERANCE);
    let mut failed = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let worst = results.iter().filter(|(k, _)| *k == Some(kind)).map(|(_, r)| r.max_rel_error).fold(None, |acc: Option<f64>, e| {
            Some(acc.map_or(e, |a| a.max(e)))
        });
        match worst {
            Some(w) => {
                let ok = w < REL_TOLERANCE;
                println!("  {:<14} {:>12.3e}  {}", kind.name(), w, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(kind.name().to_string());
                }
            }
            None => {
                println!("  {:<14} {:>12}  FAIL", kind.name(), "unchecked");
                failed.push(format!("{} (unchecked)", kind.name()));
            }
        }
    }
    for (_, r) in results.iter().filter(|(k, r)| k.is_none() && !r.passed()) {
        failed.push(r.name.clone());
    }
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::new(GRADCHECK, format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn reconstruct(cfg: &RunConfig, checkpoint: &Path, data: Option<PathBuf>, out_dir: &Path, n: usize) -> Result<(), Failure> {
    let views = cfg.views()?;
    let (model, _) = load_model(checkpoint)?;
    let dataset = Dataset::load(&data_path(data, cfg))?;
    let n = n.min(dataset.len());
    let indices: Vec<usize> = (0..n).collect();
    let seed: u64 = cfg.get("probe.seed")?;
    let seeds: Vec<u64> = indices.iter().map(|&i| item_seed(seed, 0, i as u64)).collect();
    let pair = make_view_pair(&dataset.batch(&indices), &views, &seeds);
    let recon = model.reconstruct(&pair.v1, &pair.v2)?;
    fs::create_dir_all(out_dir).map_err(|e| io_failure(out_dir, e))?;
    let (h, w) = (dataset.height, dataset.width);
    for i in 0..n {
        for (tag, batch) in [("v1", &pair.v1), ("v2", &pair.v2), ("recon", &recon)] {
            let rgb = planar_to_hwc(imageops::image(batch, i), h, w);
            let path = out_dir.join(format!("{:04}_{}.ppm", i, tag));
            fs::write(&path, encode_ppm(w, h, &rgb)).map_err(|e| io_failure(&path, e))?;
        }
    }
    println!("wrote {} triplets to {}", n, out_dir.display());
    Ok(())
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<(), Failure> {
    match command {
        Command::GenData { config, out } => gen_data(&resolve(config.as_deref(), overrides)?, out),
        Command::Pretrain { config, data, out_dir, ablation, resume } => {
            let mut overrides = overrides.to_vec();
            match ablation {
                Some(Ablation::VicregOnly) => overrides.push(("loss.lambda_recon".into(), "0".into())),
                Some(Ablation::ReconOnly) => overrides.push(("loss.lambda_ssl".into(), "0".into())),
                None => {}
            }
            pretrain(resolve(config.as_deref(), &overrides)?, data, out_dir, resume)
        }
        Command::Eval { checkpoint, config, data, mode, out } => {
            eval(&resolve(config.as_deref(), overrides)?, &checkpoint, data, mode, out)
        }
        Command::Gradcheck { inject_fault } => {
            if !overrides.is_empty() {
                return Err(Failure::new(USAGE, "gradcheck takes no config overrides"));
            }
            gradcheck(inject_fault)
        }
        Command::Reconstruct { checkpoint, config, data, out_dir, n } => {
            reconstruct(&resolve(config.as_deref(), overrides)?, &checkpoint, data, &out_dir, n)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand => 2,
                _ => USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
