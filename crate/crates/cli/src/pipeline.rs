//! Data generation, training, finetuning and evaluation runs on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasklab::checkpoint::Checkpoint;
use tasklab::datasets::{load_buffer, load_val_set, save_buffer, save_val_set, Buffer, ValSet};
use tasklab::encoders::LanguageBackend;
use tasklab::evaluator::{write_eval_records, EvalRecord};
use tasklab::expert::{
    build_budget_buffer, build_finetune_buffer, build_training_buffer, build_validation_set,
    CollectionStats, ExpertConfig,
};
use tasklab::policy::ConditioningMode;
use tasklab::simenv::{AmbiguityScheme, ResetOptions, TabletopEnv};
use tasklab::taskspace::{self, Scenario};
use tasklab::trainer::{self, first_demo_set, RunOutput, TrainConfig, Trainer};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// File names inside a data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub train: PathBuf,
    pub oracle: PathBuf,
    pub val: PathBuf,
    pub finetune: PathBuf,
    pub summary: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.dltc"),
            oracle: dir.join("oracle.dltc"),
            val: dir.join("val.dltc"),
            finetune: dir.join("finetune.dltc"),
            summary: dir.join("gen_data.json"),
        }
    }
}

/// Refuse to reuse a directory that already holds files.
pub fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} already holds results; outputs are write-once, pick another name or remove it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSpec {
    pub scenario: Scenario,
    pub n_per_task: usize,
    pub seed: u64,
    pub scheme: AmbiguityScheme,
    /// Demos per test task in the finetuning pool; 0 skips it.
    pub finetune_n: usize,
    /// Also write the one-hot oracle buffer over the test tasks.
    pub oracle: bool,
    pub expert: ExpertConfig,
}

impl GenDataSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            scenario: cfg.train.scenario,
            n_per_task: cfg.train.n_per_task,
            seed: cfg.data_seed,
            scheme: cfg.train.scheme,
            finetune_n: cfg.finetune_demos,
            oracle: true,
            expert: cfg.expert.clone(),
        }
    }

    pub fn plan(&self) -> DataPlan {
        let s = taskspace::split(self.scenario);
        let train = s.train_ids.len() * self.n_per_task;
        DataPlan {
            train,
            oracle: if self.oracle { train } else { 0 },
            val: s.test_ids.len(),
            finetune: s.test_ids.len() * self.finetune_n,
        }
    }
}

/// Trajectory counts per output file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPlan {
    pub train: usize,
    pub oracle: usize,
    pub val: usize,
    pub finetune: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub file: String,
    pub tasks: usize,
    pub trajectories: usize,
    pub attempts: usize,
    pub pre_filter_success: f64,
}

impl StreamSummary {
    fn new(file: &Path, buffer: &Buffer, stats: CollectionStats) -> Self {
        Self {
            file: file
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tasks: buffer.tasks.len(),
            trajectories: buffer.num_trajectories(),
            attempts: stats.attempts,
            pre_filter_success: stats.success_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub spec: GenDataSpec,
    pub streams: Vec<StreamSummary>,
}

/// Collect and write every buffer of a data directory.
pub fn gen_data(spec: &GenDataSpec, out: &Path) -> CliResult<GenDataSummary> {
    if spec.n_per_task == 0 {
        return Err(CliError::Usage("n_per_task must be at least 1".into()));
    }
    fresh_dir(out)?;
    let paths = DataPaths::in_dir(out);
    let env = TabletopEnv::default();
    let opts = ResetOptions {
        scheme: spec.scheme,
        target_side: None,
    };
    let split = taskspace::split(spec.scenario);
    let train_ids: Vec<usize> = split.train_ids.iter().copied().collect();
    let test_ids: Vec<usize> = split.test_ids.iter().copied().collect();
    let mut streams = Vec::new();

    let (train, stats) = build_training_buffer(
        &env,
        &train_ids,
        spec.n_per_task,
        spec.seed,
        opts,
        &spec.expert,
    )?;
    save_buffer(&train, &paths.train)?;
    streams.push(StreamSummary::new(&paths.train, &train, stats));
    drop(train);

    if spec.oracle {
        let total = spec.n_per_task * train_ids.len();
        let (oracle, stats) =
            build_budget_buffer(&env, &test_ids, total, spec.seed, opts, &spec.expert)?;
        save_buffer(&oracle, &paths.oracle)?;
        streams.push(StreamSummary::new(&paths.oracle, &oracle, stats));
    }

    let (val, stats) = build_validation_set(&env, &test_ids, spec.seed, opts, &spec.expert)?;
    save_val_set(&val, &paths.val)?;
    streams.push(StreamSummary::new(&paths.val, val.as_buffer(), stats));

    if spec.finetune_n > 0 {
        let (ft, stats) = build_finetune_buffer(
            &env,
            &test_ids,
            spec.finetune_n,
            spec.seed,
            opts,
            &spec.expert,
        )?;
        save_buffer(&ft, &paths.finetune)?;
        streams.push(StreamSummary::new(&paths.finetune, &ft, stats));
    }

    let summary = GenDataSummary {
        spec: spec.clone(),
        streams,
    };
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(&paths.summary, json + "\n")?;
    Ok(summary)
}

/// Name a run is reported under.
pub fn run_label(cfg: &TrainConfig) -> String {
    match cfg.mode {
        ConditioningMode::OneHot if cfg.one_hot_oracle => "one_hot_oracle".into(),
        ConditioningMode::Mcil if cfg.mcil_eval == ConditioningMode::DemoOnly => {
            "mcil_demo_only".into()
        }
        m => m.to_string(),
    }
}

pub fn train_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.experiment_dir()
        .join(run_label(&cfg.train))
        .join(format!("seed{seed}"))
}

pub fn finetune_dir(cfg: &ExperimentConfig, n: usize, seed: u64) -> PathBuf {
    cfg.experiment_dir()
        .join("finetune")
        .join(format!("n{n}"))
        .join(format!("seed{seed}"))
}

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_TRAIN_CSV: &str = "eval_train.csv";
pub const ECHO_TOML: &str = "experiment.toml";

fn records(
    label: &str,
    cfg: &TrainConfig,
    seed: u64,
    rates: impl IntoIterator<Item = f64>,
) -> Vec<EvalRecord> {
    rates
        .into_iter()
        .enumerate()
        .map(|(eval_set, success_rate)| EvalRecord {
            mode: label.to_string(),
            scenario: cfg.scenario.to_string(),
            seed,
            eval_set,
            success_rate,
        })
        .collect()
}

fn backend(cfg: &ExperimentConfig) -> CliResult<LanguageBackend> {
    cfg.language_backend()
        .map_err(|e| CliError::Data(format!("embedding cache: {e}")))
}

fn load_val(path: &Path) -> CliResult<ValSet> {
    load_val_set(path)
        .map_err(|e| CliError::Data(format!("validation set {}: {e}", path.display())))
}

fn load_train(path: &Path) -> CliResult<Buffer> {
    load_buffer(path).map_err(|e| CliError::Data(format!("buffer {}: {e}", path.display())))
}

/// Train one run per seed; returns the run directories.
pub fn train(cfg: &ExperimentConfig, seeds: &[u64]) -> CliResult<Vec<PathBuf>> {
    let data = cfg.data_paths();
    let buffer = load_train(if cfg.train.is_oracle() {
        &data.oracle
    } else {
        &data.train
    })?;
    trainer::check_buffer(&cfg.train, &buffer).map_err(|e| CliError::Data(e.to_string()))?;
    let val = load_val(&data.val)?;
    let backend = backend(cfg)?;
    let env = TabletopEnv::default();
    let label = run_label(&cfg.train);
    let mut dirs = Vec::new();
    for &seed in seeds {
        let dir = train_dir(cfg, seed);
        fresh_dir(&dir)?;
        let mut echo = cfg.clone();
        echo.train.seeds = vec![seed];
        std::fs::write(dir.join(ECHO_TOML), echo.to_toml())?;
        log::info!("training {label} seed {seed} into {}", dir.display());
        let out = RunOutput { dir: dir.clone() };
        let outcome = trainer::train(
            &cfg.train,
            cfg.model_config(),
            seed,
            &buffer,
            &val,
            &backend,
            &env,
            Some(&out),
        )?;
        write_eval_records(
            &records(
                &label,
                &cfg.train,
                seed,
                outcome.test_success.iter().copied(),
            ),
            &dir.join(EVAL_CSV),
        )?;
        if cfg.train.eval_train_tasks {
            let rates = outcome.metrics.iter().filter_map(|r| r.train_success_opt);
            write_eval_records(
                &records(&label, &cfg.train, seed, rates),
                &dir.join(EVAL_TRAIN_CSV),
            )?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Trainer)> {
    let ck = Checkpoint::load(path)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    Ok((ck, trainer))
}

/// Finetune a demo-only checkpoint on `n` demos per test task.
pub fn finetune(cfg: &ExperimentConfig, ckpt: &Path, n: usize) -> CliResult<PathBuf> {
    let (ck, source) = load_checkpoint(ckpt)?;
    if source.agent.cfg.mode != ConditioningMode::DemoOnly {
        return Err(CliError::Usage(format!(
            "finetuning needs a demo_only checkpoint, got {}",
            source.agent.cfg.mode
        )));
    }
    let seed = source.seed;
    let data = cfg.data_paths();
    let val = load_val(&data.val)?;
    let demos = if n > 0 {
        load_train(&data.finetune)?
    } else {
        Buffer::default()
    };
    if let Some(have) = demos
        .tasks
        .values()
        .map(|b| b.trajectories.len())
        .min()
        .filter(|&h| h < n)
    {
        return Err(CliError::Data(format!(
            "{} holds {have} demos per task, {n} requested; regenerate it with a larger finetune pool",
            data.finetune.display()
        )));
    }
    let backend = backend(cfg)?;
    let env = TabletopEnv::default();
    let dir = finetune_dir(cfg, n, seed);
    fresh_dir(&dir)?;
    std::fs::write(dir.join(ECHO_TOML), cfg.to_toml())?;
    let label = format!("demo_only_ft{n}");
    let out = RunOutput { dir: dir.clone() };
    let outcome = trainer::finetune(
        &ck,
        &demos,
        n,
        cfg.train.finetune_steps,
        &val,
        &backend,
        &env,
        Some(&out),
    )?;
    let rates = if n == 0 {
        ck.save(&out.final_path())?;
        vec![outcome.trainer.evaluate(&env, &val, &backend)?]
    } else {
        outcome.test_success
    };
    write_eval_records(
        &records(&label, &outcome.trainer.cfg, seed, rates),
        &dir.join(EVAL_CSV),
    )?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Split {
    #[default]
    Test,
    Train,
}

/// One evaluation set of a checkpoint. `pass` picks the test-time modality
/// of an mcil checkpoint and must otherwise equal the trained mode.
pub fn evaluate(
    ckpt: &Path,
    pass: Option<ConditioningMode>,
    split: Split,
    data: &DataPaths,
    backend: &LanguageBackend,
) -> CliResult<Vec<EvalRecord>> {
    let (_, mut t) = load_checkpoint(ckpt)?;
    let trained = t.agent.cfg.mode;
    match pass {
        None => {}
        Some(p) if p == trained => {}
        Some(p @ (ConditioningMode::LanguageOnly | ConditioningMode::DemoOnly))
            if trained == ConditioningMode::Mcil =>
        {
            t.cfg.mcil_eval = p;
        }
        Some(p) => {
            return Err(CliError::Usage(format!(
                "checkpoint was trained in {trained} mode and cannot be evaluated as {p}"
            )));
        }
    }
    let val = match split {
        Split::Test => load_val(&data.val)?,
        Split::Train => first_demo_set(&load_train(if t.cfg.is_oracle() {
            &data.oracle
        } else {
            &data.train
        })?)?,
    };
    let env = TabletopEnv::default();
    let rate = t.evaluate(&env, &val, backend)?;
    Ok(records(&run_label(&t.cfg), &t.cfg, t.seed, [rate]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        let mut spec = GenDataSpec::from_config(&ExperimentConfig::default());
        spec.scenario = Scenario::Mini;
        spec.n_per_task = 25;
        let p = spec.plan();
        assert_eq!(
            (p.train, p.oracle, p.val, p.finetune),
            (2100, 2100, 36, 900)
        );
        spec.scenario = Scenario::A;
        spec.n_per_task = 200;
        assert_eq!(spec.plan().train, 39_600);
    }

    #[test]
    fn labels() {
        let mut c = TrainConfig::desk();
        assert_eq!(run_label(&c), "deltaco");
        c.mode = ConditioningMode::OneHot;
        assert_eq!(run_label(&c), "one_hot");
        c.one_hot_oracle = true;
        assert_eq!(run_label(&c), "one_hot_oracle");
        c.mode = ConditioningMode::Mcil;
        assert_eq!(run_label(&c), "mcil");
        c.mcil_eval = ConditioningMode::DemoOnly;
        assert_eq!(run_label(&c), "mcil_demo_only");
    }

    #[test]
    fn fresh_dir_is_write_once() {
        let d = tempfile::tempdir().unwrap();
        let run = d.path().join("a/b");
        fresh_dir(&run).unwrap();
        fresh_dir(&run).unwrap();
        std::fs::write(run.join("x"), "1").unwrap();
        assert!(matches!(fresh_dir(&run), Err(CliError::Usage(_))));
    }
}
