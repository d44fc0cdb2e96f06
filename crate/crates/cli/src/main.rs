use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disdis_core::autodiff::{finite_diff_check, Array2, FdConfig};
use disdis_core::dataio::{default_personas, synth_generate, write_labels, write_scene, SynthSpec, TrajectorySample};
use disdis_core::harness::{self, load_dataset, Checkpoint, ExperimentConfig, HarnessError};
use disdis_core::model::{ModelParams, ParamVars};
use disdis_core::objective::{build_loss, Estimator, ObjectiveError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "disdis", version, about = "Discrete-latent pedestrian trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed (the data seed for `synth`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, then evaluate on the held-out set and write the run directory.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the PCMD curve of a checkpoint (or of the untrained model).
    Pcmd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate labeled synthetic data as a scene file.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Samples per persona when no config is given.
        #[arg(long, default_value_t = 250)]
        per_persona: usize,
    },
    /// Train the full model and its two ablations; write ablation.csv.
    Ablate(Common),
    /// Finite-difference check of the full objective on 8 training samples.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Check at most this many scalars per parameter array.
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let path = common.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &Common, config: Option<&ExperimentConfig>, fallback: &str) -> PathBuf {
    common.out.clone().or_else(|| config.and_then(|c| c.eval.out_dir.clone())).unwrap_or_else(|| PathBuf::from(fallback))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn cmd_train(common: &Common) -> Result<bool, HarnessError> {
    let config = load_config(common)?;
    let dir = out_dir(common, Some(&config), "run");
    let out = harness::run_training(&config, &dir, |epoch, r| {
        println!("epoch={epoch} step={} l1={} l2={} l3={} total={}", r.step, r.l1, r.l2, r.l3, r.total);
    })?;
    print!("{}", out.report.to_text());
    Ok(true)
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<bool, HarnessError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = match &common.config {
        Some(_) => load_config(common)?,
        None => ckpt.config.clone(),
    };
    let data = load_dataset(&config.data)?;
    let report = harness::evaluate(&ckpt.state.params, &data.eval, &config)?;
    harness::write_eval_outputs(&out_dir(common, Some(&config), "eval"), &ckpt.state.params, &data.eval, &report)?;
    print!("{}", report.to_text());
    Ok(true)
}

fn cmd_pcmd(common: &Common, checkpoint: Option<&Path>) -> Result<bool, HarnessError> {
    let config = load_config(common)?;
    let params = match checkpoint {
        Some(path) => Checkpoint::load(path)?.state.params,
        None => harness::TrainState::init(&config)?.params,
    };
    let data = load_dataset(&config.data)?;
    let report = harness::evaluate(&params, &data.eval, &config)?;
    let dir = out_dir(common, Some(&config), "pcmd");
    harness::ensure_dir(&dir)?;
    let csv = report.pcmd.to_csv();
    write(&dir.join("pcmd.csv"), &csv)?;
    print!("{csv}");
    Ok(true)
}

fn cmd_synth(common: &Common, per_persona: usize) -> Result<bool, HarnessError> {
    let (spec, seed) = match &common.config {
        Some(_) => {
            let config = load_config(common)?;
            let synth = config.data.synth.ok_or_else(|| HarnessError::Config("config has no synth section".into()))?;
            (synth.generator, synth.seed)
        }
        None => (SynthSpec::new(default_personas(), per_persona), 0),
    };
    let seed = common.seed.unwrap_or(seed);
    let samples = synth_generate(&spec, seed)?;
    let dir = out_dir(common, None, "synth");
    harness::ensure_dir(&dir)?;
    write_scene(dir.join("synth.txt"), &samples)?;
    write_labels(dir.join("synth_labels.txt"), &samples)?;
    println!("samples={} seed={seed} dir={}", samples.len(), dir.display());
    Ok(true)
}

fn cmd_ablate(common: &Common) -> Result<bool, HarnessError> {
    let config = load_config(common)?;
    let rows = harness::run_ablation(&config)?;
    let csv = harness::ablation_csv(&rows);
    let dir = out_dir(common, Some(&config), "ablation");
    harness::ensure_dir(&dir)?;
    write(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(true)
}

const GRADCHECK_BATCH: usize = 8;

fn cmd_gradcheck(common: &Common, tolerance: f64, max_coords: Option<usize>) -> Result<bool, HarnessError> {
    let mut config = load_config(common)?;
    config.loss.estimator = Estimator::Exact;
    let data = load_dataset(&config.data)?;
    let batch: Vec<&TrajectorySample> = data.train.iter().take(GRADCHECK_BATCH).collect();
    let params = ModelParams::init(&config.model, config.train.seed)?;
    let arrays: Vec<Array2> = params.tensors().into_iter().cloned().collect();
    let fd = FdConfig { tolerance, max_coords_per_param: max_coords, ..FdConfig::default() };
    let report = finite_diff_check(
        |t, vars| {
            let p = ParamVars::from_vars(vars);
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            match build_loss(t, &p, &batch, &config.loss, &mut rng) {
                Ok(g) => Ok(g.root),
                Err(ObjectiveError::Autodiff(e)) => Err(e),
                Err(e) => panic!("{e}"),
            }
        },
        &arrays,
        &fd,
    );
    println!("max_rel_err={} max_abs_err={} checked={} pass={}", report.max_rel_err, report.max_abs_err, report.checked, report.pass);
    Ok(report.pass)
}

fn run(cli: &Cli) -> Result<bool, HarnessError> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Pcmd { common, checkpoint } => cmd_pcmd(common, checkpoint.as_deref()),
        Command::Synth { common, per_persona } => cmd_synth(common, *per_persona),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Gradcheck { common, tolerance, max_coords } => cmd_gradcheck(common, *tolerance, *max_coords),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error kind=check exit=1 message=\"gradient check failed\"");
            ExitCode::from(1)
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error kind={} exit={code} message={:?}", e.kind(), e.to_string());
            ExitCode::from(code as u8)
        }
    }
}
