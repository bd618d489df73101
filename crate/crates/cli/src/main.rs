use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use tasklab::evaluator::EvalRecord;
use tasklab::policy::ConditioningMode;
use tasklab::simenv::AmbiguityScheme;
use tasklab::taskspace::{self, Scenario};
use tasklab_cli::pipeline::{self, DataPaths, GenDataSpec, Split};
use tasklab_cli::report::{self, DEFAULT_TOP_N};
use tasklab_cli::{CliError, CliResult, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "tasklab",
    version,
    about = "Multi-task imitation learning experiments"
)]
struct Cli {
    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect expert demonstrations into a data directory.
    GenData {
        /// Take defaults from an experiment file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        #[arg(long)]
        n_per_task: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ambiguity scheme: i or ii.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<AmbiguityScheme>,
        /// Demos per test task for finetuning; 0 skips the pool.
        #[arg(long)]
        finetune_n: Option<usize>,
        /// Skip the one-hot oracle buffer.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Train one run per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the mode; also accepts one_hot_oracle.
        #[arg(long)]
        mode: Option<String>,
        /// Train only these seeds instead of the configured list.
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Continue a demo-only checkpoint on test-task demos.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n_demos: usize,
    },
    /// Run one evaluation set of a checkpoint and emit report rows.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Test-time modality; must match the checkpoint except for mcil.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ConditioningMode>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Experiment file giving the data paths and embedding cache.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data directory, when no experiment file is given.
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV file to write; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate evaluation CSVs into a table and learning curves.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
    },
    /// Print the instruction of every task in a scenario, one per line.
    Instructions {
        #[arg(long, value_parser = parse_scenario, default_value = "mini")]
        scenario: Scenario,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: tasklab::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ConditioningMode, String> {
    s.parse().map_err(|e: tasklab::Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<AmbiguityScheme, String> {
    match s {
        "i" => Ok(AmbiguityScheme::Unique),
        "ii" => Ok(AmbiguityScheme::IdenticalPair),
        _ => Err(format!("unknown ambiguity scheme {s:?}, expected i or ii")),
    }
}

fn flag_error(flag: &str, msg: String) -> CliError {
    CliError::Config(ConfigError {
        origin: flag.into(),
        line: None,
        msg,
    })
}

fn load(path: Option<&PathBuf>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_records(records: &[EvalRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData {
            config,
            scenario,
            n_per_task,
            seed,
            out,
            scheme,
            finetune_n,
            no_oracle,
        } => {
            let cfg = load(config.as_ref())?;
            let mut spec = GenDataSpec::from_config(&cfg);
            spec.scenario = scenario.unwrap_or(spec.scenario);
            spec.n_per_task = n_per_task.unwrap_or(spec.n_per_task);
            spec.seed = seed.unwrap_or(spec.seed);
            spec.scheme = scheme.unwrap_or(spec.scheme);
            spec.finetune_n = finetune_n.unwrap_or(spec.finetune_n);
            spec.oracle = !no_oracle;
            let out = out.unwrap_or_else(|| cfg.data_dir());
            let plan = spec.plan();
            log::info!(
                "collecting {} train, {} oracle, {} validation and {} finetune trajectories into {}",
                plan.train,
                plan.oracle,
                plan.val,
                plan.finetune,
                out.display()
            );
            let summary = pipeline::gen_data(&spec, &out)?;
            for s in &summary.streams {
                println!(
                    "{}: {} trajectories over {} tasks, expert pre-filter success {:.1}% ({} attempts)",
                    s.file,
                    s.trajectories,
                    s.tasks,
                    100.0 * s.pre_filter_success,
                    s.attempts
                );
            }
        }
        Cmd::Train { config, mode, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                if m == "one_hot_oracle" {
                    cfg.train.mode = ConditioningMode::OneHot;
                    cfg.train.one_hot_oracle = true;
                } else {
                    cfg.train.mode = parse_mode(&m).map_err(|e| flag_error("--mode", e))?;
                    cfg.train.one_hot_oracle = false;
                }
                cfg.validate().map_err(|e| flag_error("--mode", e))?;
            }
            let seeds = if seed.is_empty() {
                cfg.train.seeds.clone()
            } else {
                seed
            };
            for dir in pipeline::train(&cfg, &seeds)? {
                println!("{}", dir.display());
            }
        }
        Cmd::Finetune {
            config,
            ckpt,
            n_demos,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}", pipeline::finetune(&cfg, &ckpt, n_demos)?.display());
        }
        Cmd::Eval {
            ckpt,
            mode,
            split,
            config,
            data,
            out,
        } => {
            let cfg = load(config.as_ref())?;
            let paths = match data {
                Some(d) => DataPaths::in_dir(&d),
                None if config.is_some() => cfg.data_paths(),
                None => {
                    return Err(flag_error(
                        "eval",
                        "pass --config or --data to locate the validation set".into(),
                    ))
                }
            };
            let backend = cfg
                .language_backend()
                .map_err(|e| CliError::Data(format!("embedding cache: {e}")))?;
            let records = pipeline::evaluate(&ckpt, mode, split, &paths, &backend)?;
            match out {
                Some(p) => {
                    if p.exists() {
                        return Err(CliError::Usage(format!(
                            "{} exists; outputs are write-once",
                            p.display()
                        )));
                    }
                    tasklab::evaluator::write_eval_records(&records, &p)?;
                }
                None => print_records(&records)?,
            }
        }
        Cmd::Report { runs, out, top_n } => {
            let rep = report::build_report(&runs, top_n)?;
            if rep.rows.is_empty() {
                return Err(CliError::Data(
                    "no evaluation CSVs found under the given run directories".into(),
                ));
            }
            report::write_report(&rep, &out)?;
            print!("{}", report::markdown_table(&rep.rows));
        }
        Cmd::Instructions { scenario } => {
            let mut stdout = std::io::stdout().lock();
            for id in taskspace::split(scenario).universe() {
                writeln!(stdout, "{}", taskspace::instruction(id)?.text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
