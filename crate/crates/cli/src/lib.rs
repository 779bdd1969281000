//! Command-line front end: scenario generation, training, evaluation,
//! ablation tables and the gradient oracle suite.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pda_core::data::{generate_scenario, ScenarioDataset, ScenarioSpec};
use pda_core::engine::{self, CdlMode, EngineError, StepRecord, TrainConfig, TrainObserver, TrainState};
use pda_core::eval::{self, EvalReport};
use pda_core::gradcheck;
use pda_core::labeling::LabelingState;
use pda_core::losses::LOSS_LOG_HEADER;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.pda";
pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.log";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const LATENTS_FILE: &str = "latents.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "pda",
    version,
    about = "Variational partial domain adaptation on synthetic scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario and write it as a dataset file.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the hidden target labels.
    Eval(EvalArgs),
    /// Run the full model and its three ablations over several seeds.
    Ablate(AblateArgs),
    /// Run every finite-difference gradient check.
    Gradcheck,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Scenario file (flat TOML); defaults apply when omitted.
    spec: Option<PathBuf>,
    /// Output dataset file.
    out: Option<PathBuf>,
    #[arg(long = "config", conflicts_with = "spec")]
    config: Option<PathBuf>,
    #[arg(long = "out", conflicts_with = "out")]
    out_flag: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config (flat TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the checkpoint, loss log and plot data.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "ablation-cdl-mode")]
    cdl_mode: Option<CdlMode>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; the default scenario is generated when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long = "ablation-cdl-mode")]
    cdl_mode: Option<CdlMode>,
    /// Table file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError(String);

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(code) => code,
        Err(CliError(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, cdl_mode: Option<CdlMode>) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = cdl_mode {
        cfg.cdl_mode = mode;
    }
    Ok(cfg)
}

fn generate(a: GenerateArgs) -> CliResult {
    let spec_path = a.spec.or(a.config);
    let out = a
        .out
        .or(a.out_flag)
        .ok_or_else(|| CliError("generate needs an output path".into()))?;
    let spec = match spec_path {
        Some(p) => ScenarioSpec::load(&p)?,
        None => ScenarioSpec::default(),
    };
    let ds = generate_scenario(&spec)?;
    ds.save(&out)?;
    println!(
        "wrote {} source and {} target samples to {}",
        ds.train.n_source(),
        ds.train.n_target(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Streams the loss log and labeling diagnostics to files.
struct FileLogger {
    losses: fs::File,
    diagnostics: fs::File,
    error: Option<std::io::Error>,
    weights: Vec<(usize, LabelingState)>,
}

impl FileLogger {
    fn record(&mut self, r: std::io::Result<()>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl TrainObserver for FileLogger {
    fn on_step(&mut self, record: &StepRecord) {
        let r = writeln!(self.losses, "{}", record.csv_line());
        self.record(r);
    }

    fn on_reestimate(&mut self, epoch: usize, state: &LabelingState) {
        let r = writeln!(self.diagnostics, "{}", state.diagnostics_line(epoch));
        self.record(r);
        self.weights.push((epoch, state.clone()));
    }
}

fn train(a: TrainArgs) -> CliResult {
    let config = load_config(a.config.as_deref(), a.cdl_mode)?;
    let ds = ScenarioDataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    let resuming = a.checkpoint.is_some();
    let mut state = match &a.checkpoint {
        Some(p) => TrainState::load(p)?,
        None => TrainState::init(&config, &ds.train)?,
    };
    if resuming && state.config_hash != config.hash() {
        return Err(CliError(format!(
            "checkpoint was produced by config {} but the current config is {}",
            state.config_hash,
            config.hash()
        )));
    }
    write_file(&a.out.join(CONFIG_FILE), &config.to_toml())?;
    let open = |name: &str| -> Result<fs::File, CliError> {
        let path = a.out.join(name);
        let mut opts = OpenOptions::new();
        opts.create(true);
        if resuming {
            opts.append(true);
        } else {
            opts.write(true).truncate(true);
        }
        opts.open(&path)
            .map_err(|e| CliError(format!("cannot open {}: {e}", path.display())))
    };
    let mut logger = FileLogger {
        losses: open(LOSS_LOG_FILE)?,
        diagnostics: open(DIAGNOSTICS_FILE)?,
        error: None,
        weights: Vec::new(),
    };
    if !resuming {
        writeln!(logger.losses, "{LOSS_LOG_HEADER}")?;
    }

    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let outcome = engine::train(&mut state, &config, &ds.train, config.epochs, &mut logger);
    if let Some(e) = logger.error.take() {
        return Err(CliError(format!("log write failed: {e}")));
    }
    match outcome {
        Ok(()) => {}
        Err(EngineError::Diverged {
            step,
            reason,
            last_good,
        }) => {
            last_good.save(&checkpoint)?;
            return Err(CliError(format!(
                "training diverged at step {step} ({reason}); last finite state saved to {}",
                checkpoint.display()
            )));
        }
        Err(e) => return Err(e.into()),
    }
    state.save(&checkpoint)?;
    write_file(&a.out.join(WEIGHTS_FILE), &eval::weight_trajectory_csv(&logger.weights))?;
    write_file(&a.out.join(LATENTS_FILE), &eval::latent_csv(&state, &ds.train)?)?;
    let last = state.history.last();
    println!(
        "trained {} epochs ({} steps), final total loss {}; outputs in {}",
        state.epoch,
        state.step,
        last.map_or(f64::NAN, |r| r.losses.total),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn evaluate(a: EvalArgs) -> CliResult {
    let state = TrainState::load(&a.checkpoint)?;
    let ds = ScenarioDataset::load(&a.dataset)?;
    let report = eval::evaluate(&state, &ds)?;
    emit(a.out.as_deref(), &report.to_text())?;
    Ok(EXIT_OK)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ablate(a: AblateArgs) -> CliResult {
    let config = load_config(a.config.as_deref(), a.cdl_mode)?;
    if a.seeds.is_empty() {
        return Err(CliError("--seeds needs at least one seed".into()));
    }
    let ds = match &a.dataset {
        Some(p) => ScenarioDataset::load(p)?,
        None => generate_scenario(&ScenarioSpec::default())?,
    };
    let table = eval::run_ablation(&config, &ds, &a.seeds)?;
    emit(a.out.as_deref(), &table.to_text())?;
    Ok(EXIT_OK)
}

fn gradcheck() -> CliResult {
    let results = gradcheck::run_suite();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{r}");
    }
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

/// Loads a report written by `eval`.
pub fn read_report(path: &Path) -> Result<EvalReport, String> {
    EvalReport::load(path).map_err(|e| e.to_string())
}
