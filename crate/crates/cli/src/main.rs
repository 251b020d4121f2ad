//! `accelgraph`: synthesize or ingest a corpus, train a model, roll it out,
//! and score the rollouts.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accelgraph::data::{
    export_csv, generate_synthetic, ingest_csv, load_checkpoint, save_checkpoint, ColumnMap, TrajectoryTable,
    UnitSystem,
};
use accelgraph::metrics::{evaluate, MetricsReport, DEFAULT_JERK_DEADBAND};
use accelgraph::model::ARCH_NAMES;
use accelgraph::simulation::{
    read_trajectories, read_truths, rollout_segments, write_trajectories, write_truths, ModelPredictor,
};
use accelgraph::training::{segment_corpus, train};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{input_path, output_dir, training_config, FileConfig, RunConfig, TrainingFlags};

const CORPUS_FILE: &str = "corpus.csv";
const CHECKPOINT_FILE: &str = "model.ckpt";
const TRAINING_LOG_FILE: &str = "training_log.csv";
const TRAJECTORY_FILE: &str = "trajectories.csv";
const TRUTH_FILE: &str = "truths.csv";

#[derive(Parser)]
#[command(name = "accelgraph", version, about = "Graph-based stochastic acceleration models for freeway traffic")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [synthetic], [training] and [rollout] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic IDM corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Convert an NGSIM-style table to an SI corpus.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Delimited table with NGSIM column names.
        #[arg(long)]
        input: PathBuf,
        /// Unit system of the input table.
        #[arg(long, default_value = "feet")]
        units: UnitSystem,
    },
    /// Train one architecture on a corpus's training segments.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by `synth` or `ingest`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ARCH_NAMES))]
        arch: Option<String>,
        /// Replace the third dense layer with an LSTM.
        #[arg(long)]
        recurrent: bool,
        /// Self-looped binary adjacency without an ego path (implied by gcn).
        #[arg(long)]
        self_loops: bool,
        /// Graph connection range, meters.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Roll a trained model out over the corpus's test segments.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Training output directory or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Samples per ego trajectory.
        #[arg(long)]
        samples: Option<usize>,
        /// Rollout worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Egos simulated per test segment.
        #[arg(long)]
        max_egos: Option<usize>,
    },
    /// Score a simulation directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Simulation output directory.
        #[arg(long)]
        sims: PathBuf,
        /// Jerk magnitude below which no sign is counted, m/s³.
        #[arg(long, default_value_t = DEFAULT_JERK_DEADBAND)]
        jerk_deadband: f64,
    },
    /// Merge metric reports into one comparison table.
    Report {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// `metrics.json` files written by `evaluate`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut line = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !line.contains(&msg) {
            if !line.is_empty() {
                line.push_str(": ");
            }
            line.push_str(&msg);
        }
    }
    line
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => synth(&common),
        Command::Ingest { common, input, units } => ingest(&common, &input, units),
        Command::Train {
            common,
            corpus,
            arch,
            recurrent,
            self_loops,
            tau,
            epochs,
            lr,
        } => {
            if self_loops && arch.as_deref().is_some_and(|a| a != "gcn") {
                bail!("--self-loops applies only to --arch gcn; the other families have no self-loops");
            }
            let flags = TrainingFlags {
                arch: if self_loops { Some("gcn".into()) } else { arch },
                recurrent,
                tau,
                epochs,
                lr,
            };
            train_cmd(&common, &corpus, &flags)
        }
        Command::Simulate {
            common,
            corpus,
            model,
            samples,
            workers,
            max_egos,
        } => simulate(&common, &corpus, &model, samples, workers, max_egos),
        Command::Evaluate {
            common,
            sims,
            jerk_deadband,
        } => evaluate_cmd(&common, &sims, jerk_deadband),
        Command::Report { out, reports } => report(&out, &reports),
    }
}

fn synth(common: &Common) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = file.seed(common.seed);
    let config = accelgraph::data::SyntheticConfig {
        seed,
        ..file.synthetic.clone().unwrap_or_default()
    };
    let out = output_dir(&common.out, &[])?;
    let (table, manifest) = generate_synthetic(&config)?;
    let corpus = out.join(CORPUS_FILE);
    export_csv(&table, &corpus, &manifest.source)?;
    let mut run = RunConfig::new("synth", seed);
    run.path("out", &out);
    run.synthetic = Some(config);
    run.write(&out)?;
    println!(
        "{}: {} vehicles, {} rows",
        corpus.display(),
        manifest.vehicle_count,
        manifest.row_count
    );
    Ok(())
}

fn ingest(common: &Common, input: &Path, units: UnitSystem) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let input = input_path(input)?;
    let out = output_dir(&common.out, &[&input])?;
    let (table, manifest) = ingest_csv(&input, &ColumnMap::default(), units)?;
    let corpus = out.join(CORPUS_FILE);
    export_csv(&table, &corpus, &manifest.source)?;
    let mut run = RunConfig::new("ingest", file.seed(common.seed));
    run.path("input", &input).path("out", &out);
    run.write(&out)?;
    println!(
        "{}: {} vehicles, {} rows, {} rejected",
        corpus.display(),
        manifest.vehicle_count,
        manifest.row_count,
        manifest.rejected_rows
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(PathBuf, TrajectoryTable)> {
    let dir = input_path(dir)?;
    let path = dir.join(CORPUS_FILE);
    let (table, _) = ingest_csv(&path, &ColumnMap::default(), UnitSystem::Meters)?;
    Ok((dir, table))
}

fn train_cmd(common: &Common, corpus: &Path, flags: &TrainingFlags) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = file.seed(common.seed);
    let config = training_config(&file.training, flags, seed)?;
    let (corpus, table) = load_corpus(corpus)?;
    let out = output_dir(&common.out, &[&corpus])?;
    let (segments, _) = segment_corpus(&table, file.split_ratio())?;

    let mut log = String::from("epoch,mean_nll,supervised_frames,optimizer_steps,clipped_steps\n");
    log::info!("training {} on {} segments", config.arch, segments.len());
    let ckpt = train(&config, &segments, &mut |r| {
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.mean_nll, r.supervised_frames, r.optimizer_steps, r.clipped_steps
        ));
    })?;
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &ckpt)?;
    accelgraph::data::write_atomic(&out.join(TRAINING_LOG_FILE), log.as_bytes())?;

    let mut run = RunConfig::new("train", seed);
    run.model = Some(config.arch.label());
    run.split_ratio = Some(file.split_ratio());
    run.path("corpus", &corpus).path("out", &out);
    run.training = Some(config);
    run.write(&out)?;
    let last = ckpt.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("{}: {} trained, final mean NLL {last:.4}", path.display(), ckpt.config.arch);
    Ok(())
}

fn simulate(
    common: &Common,
    corpus: &Path,
    model: &Path,
    samples: Option<usize>,
    workers: Option<usize>,
    max_egos: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = file.seed(common.seed);
    let model = input_path(model)?;
    let ckpt_path = if model.is_dir() { model.join(CHECKPOINT_FILE) } else { model.clone() };
    let ckpt = load_checkpoint(&ckpt_path)?;
    let (corpus, table) = load_corpus(corpus)?;
    let out = output_dir(&common.out, &[&corpus, &model])?;
    let (_, test) = segment_corpus(&table, file.split_ratio())?;
    if test.is_empty() {
        bail!("{}: the split leaves no test segments", corpus.display());
    }

    let mut config = file.rollout.clone().unwrap_or_default();
    config.seed = seed;
    config.samples_per_trajectory = samples.unwrap_or(config.samples_per_trajectory);
    config.workers = workers.unwrap_or(config.workers);
    config.max_egos_per_segment = max_egos.or(config.max_egos_per_segment);
    config.validate()?;

    let predictor = ModelPredictor {
        model: &ckpt.model,
        tau: ckpt.config.tau,
    };
    let batch = rollout_segments(&predictor, &test, &config)?;
    if batch.truths.is_empty() {
        bail!("no vehicle spans a whole test segment; nothing to simulate");
    }
    write_trajectories(&out.join(TRAJECTORY_FILE), &batch.sims)?;
    write_truths(&out.join(TRUTH_FILE), &batch.truths)?;

    let mut run = RunConfig::new("simulate", seed);
    run.model = Some(ckpt.config.arch.label());
    run.split_ratio = Some(file.split_ratio());
    run.path("corpus", &corpus).path("checkpoint", &ckpt_path).path("out", &out);
    run.rollout = Some(config);
    run.write(&out)?;
    println!(
        "{}: {} trajectories for {} egos",
        out.join(TRAJECTORY_FILE).display(),
        batch.sims.len(),
        batch.truths.len()
    );
    Ok(())
}

fn evaluate_cmd(common: &Common, sims: &Path, deadband: f64) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let dir = input_path(sims)?;
    let sim_path = dir.join(TRAJECTORY_FILE);
    let truth_path = dir.join(TRUTH_FILE);
    let run_in = RunConfig::read(&dir).context("not a simulation directory")?;
    let sims = read_trajectories(&sim_path, run_in.seed)?;
    let truths = read_truths(&truth_path)?;
    let out = output_dir(&common.out, &[&dir])?;
    let label = run_in.model.clone().unwrap_or_else(|| "model".into());
    let report = MetricsReport::new(deadband, vec![evaluate(&label, &truths, &sims, deadband)?]);
    report.write(&out, "metrics")?;

    let mut run = RunConfig::new("evaluate", file.seed(common.seed));
    run.model = Some(label.clone());
    run.path("sims", &dir).path("out", &out);
    run.write(&out)?;
    let m = &report.models[0];
    println!(
        "{label}: velocity RMSE at 10 s {:.4} m/s, position RMSE {:.3} m, negative-headway rate {:.3}",
        m.velocity_rmse[9], m.y_rmse_10s, m.negative_headway_rate
    );
    Ok(())
}

fn report(out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let inputs = inputs.iter().map(|p| input_path(p)).collect::<Result<Vec<_>>>()?;
    let reports = inputs
        .iter()
        .map(|p| MetricsReport::read(p).with_context(|| format!("{}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = MetricsReport::merge(&reports)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let out = output_dir(out, &refs)?;
    merged.write(&out, "comparison")?;

    let mut run = RunConfig::new("report", 0);
    for (i, p) in inputs.iter().enumerate() {
        run.path(&format!("report_{i}"), p);
    }
    run.path("out", &out);
    run.write(&out)?;

    println!("{:<12} {:>10} {:>10} {:>8} {:>8}", "model", "v@10s", "y@10s", "jerk", "neg-hw");
    for m in &merged.models {
        println!(
            "{:<12} {:>10.4} {:>10.3} {:>8.2} {:>8.3}",
            m.model, m.velocity_rmse[9], m.y_rmse_10s, m.jerk_sign_inversions, m.negative_headway_rate
        );
    }
    Ok(())
}
