mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use teachsim::agents::{read_jsonl, Split, UtteranceRecord};
use teachsim::env::FeatureSpace;
use teachsim::experiments::{
    analyze_message_semantics, analyze_unique_utterances, read_run_manifest, run_dir, run_experiment_1, run_experiment_2,
    run_experiment_3, write_run, AggregateTable, CellStatus, SweepOptions, AGGREGATE_FILE, MANIFEST_FILE,
};
use teachsim::training::{train_run_with_progress, UTTERANCES_FILE};

#[derive(Parser)]
#[command(name = "teachsim", version, about = "Train and analyze teachers that instruct by language or by demonstration")]
struct Cli {
    /// Output root for runs and sweeps.
    #[arg(long, global = true, env = "TEACHSIM_OUT", default_value = "teachsim-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into `<out>/runs/<config hash>-s<seed>`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one experiment grid, resuming completed cells.
    Sweep {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        experiment: u8,
        #[command(flatten)]
        config: ConfigArgs,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Retrain cells that already have a completed run.
        #[arg(long)]
        force: bool,
    },
    /// Analyze a run's utterance log; writes a CSV into the run directory.
    Analyze {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        kind: AnalysisKind,
    },
    /// Plot an aggregate CSV as SVG.
    Plot {
        table: PathBuf,
        /// Defaults to the table path with an `.svg` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML file with optional `[train]` and `[sweep]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `channel=language`, `K=10`, `sweep.seeds=[0,1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Unique,
    Semantics,
}

const UNIQUE_OUTPUT: &str = "unique_utterances.csv";
const SEMANTICS_OUTPUT: &str = "message_semantics.csv";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, force } => train(&cli.out, &config, seed, force),
        Command::Sweep {
            experiment,
            config,
            parallel,
            force,
        } => sweep(&cli.out, experiment, &config, parallel, force),
        Command::Analyze { run_dir, kind } => analyze(&run_dir, kind),
        Command::Plot { table, output } => plot_table(&table, output),
    }
}

fn train(out: &Path, args: &ConfigArgs, seed: Option<u64>, force: bool) -> Result<ExitCode> {
    let mut loaded = config::load(args.config.as_deref(), &args.set)?;
    if let Some(s) = seed {
        loaded.file.train.seed = s;
    }
    let train = loaded.file.train.resolved();
    train.validate()?;
    let dir = run_dir(out, &train);
    if dir.join(MANIFEST_FILE).exists() && !force {
        bail!("{} already holds a completed run; pass --force to overwrite", dir.display());
    }
    eprintln!("training {} into {}", train.run_name(), dir.display());
    let output = train_run_with_progress(&train, |r| {
        eprintln!("update {:>5} {:<5} {:.4} ± {:.4}", r.update, r.split.name(), r.mean_normalized_reward, r.sem);
    })?;
    let manifest = write_run(&dir, &output, Some(loaded.source))?;
    println!(
        "final normalized reward: train {:.4}, val {:.4}",
        manifest.final_train.unwrap_or(f64::NAN),
        manifest.final_val.unwrap_or(f64::NAN)
    );
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(out: &Path, experiment: u8, args: &ConfigArgs, parallel: usize, force: bool) -> Result<ExitCode> {
    let loaded = config::load(args.config.as_deref(), &args.set)?;
    let spec = loaded.file.sweep_spec(experiment)?;
    let total = spec.cells().len();
    eprintln!("experiment {experiment}: {total} runs, {parallel} at a time");
    let report = |o: &teachsim::experiments::CellOutcome| {
        let status = match &o.status {
            CellStatus::Trained => "trained".to_string(),
            CellStatus::Reused => "reused".to_string(),
            CellStatus::Failed { error } => format!("FAILED: {error}"),
        };
        eprintln!(
            "{} {}={} seed {}: {status}",
            o.cell.condition,
            spec.axis.name(),
            o.cell.axis_value,
            o.cell.seed
        );
    };
    let options = SweepOptions { parallel, force };
    let result = match experiment {
        1 => run_experiment_1(&spec, out, options, &report),
        2 => run_experiment_2(&spec, out, options, &report),
        _ => run_experiment_3(&spec, out, options, &report),
    }?;
    println!("{}", result.dir.join(AGGREGATE_FILE).display());
    let failed = result.failures().count();
    if failed > 0 {
        eprintln!("{failed} of {total} runs failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn read_log(run_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let path = run_dir.join(UTTERANCES_FILE);
    let file = fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    read_jsonl(std::io::BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn analyze(run_dir: &Path, kind: AnalysisKind) -> Result<ExitCode> {
    let log = read_log(run_dir)?;
    let (name, csv) = match kind {
        AnalysisKind::Unique => (UNIQUE_OUTPUT, analyze_unique_utterances(&log)?.to_csv()),
        AnalysisKind::Semantics => {
            let manifest = read_run_manifest(run_dir).context("semantics analysis needs the run manifest")?;
            let space = FeatureSpace::new(manifest.config.n)?;
            let val: Vec<UtteranceRecord> = log.into_iter().filter(|r| r.split == Split::Val).collect();
            (SEMANTICS_OUTPUT, analyze_message_semantics(&val, &space)?.to_csv())
        }
    };
    let path = run_dir.join(name);
    fs::write(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn plot_table(table_path: &Path, output: Option<PathBuf>) -> Result<ExitCode> {
    let text = fs::read_to_string(table_path).with_context(|| format!("cannot read {}", table_path.display()))?;
    let table = AggregateTable::from_csv(&text)?;
    let svg = plot::render(&table)?;
    let output = output.unwrap_or_else(|| table_path.with_extension("svg"));
    fs::write(&output, svg)?;
    println!("{}", output.display());
    Ok(ExitCode::SUCCESS)
}
