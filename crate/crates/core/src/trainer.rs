//! Training loop, evaluation schedule and finetuning.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{sample_task_batch, Batch, Buffer, SampleConfig, ValSet, PROPRIO_DIM};
use crate::encoders::{
    contrastive_loss, cosine_loss, images_to_tensor, one_hot_embedding, LanguageBackend,
};
use crate::evaluator::{run_evaluation_set, EvalConfig, PolicyController};
use crate::expert::budget_quotas;
use crate::nn::{param_grads, Adam, AdamConfig};
use crate::policy::{
    joint_loss, policy_loss, Agent, Arch, ConditioningMode, ModelConfig, TaskInputs,
};
use crate::render::IMG;
use crate::seeds::{self, stream};
use crate::simenv::{AmbiguityScheme, TabletopEnv};
use crate::taskspace::{self, Scenario};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub mode: ConditioningMode,
    pub arch: Arch,
    pub tasks_per_batch: usize,
    pub samples_per_task: usize,
    pub learning_rate: f64,
    pub alpha_g: f64,
    pub alpha_d: f64,
    pub beta: f64,
    pub symmetric_contrastive: bool,
    /// Demonstrations collected per training task.
    pub n_per_task: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    /// Also evaluate on training tasks at each evaluation point.
    pub eval_train_tasks: bool,
    pub eval_trials: usize,
    pub deterministic_eval: bool,
    pub mcil_eval: ConditioningMode,
    pub eval_batch: usize,
    pub seeds: Vec<u64>,
    pub upsample_color_shape: bool,
    pub demo_grid: (usize, usize),
    pub crop_pad: usize,
    pub scheme: AmbiguityScheme,
    /// Finetuning steps on test-task demos.
    pub finetune_steps: u64,
    /// One-hot mode only: train on the test tasks under the same trajectory
    /// budget instead of on the training split.
    pub one_hot_oracle: bool,
    /// Samples per gradient-accumulation chunk; 0 processes the batch at once.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::A,
            mode: ConditioningMode::Deltaco,
            arch: Arch::FilmDemoConcatLang,
            tasks_per_batch: 16,
            samples_per_task: 64,
            learning_rate: 3e-4,
            alpha_g: 30.0,
            alpha_d: 10.0,
            beta: 0.1,
            symmetric_contrastive: false,
            n_per_task: 200,
            total_steps: 800_000,
            eval_every: 10_000,
            eval_train_tasks: false,
            eval_trials: 2,
            deterministic_eval: false,
            mcil_eval: ConditioningMode::LanguageOnly,
            eval_batch: 128,
            seeds: vec![0, 1, 2],
            upsample_color_shape: false,
            demo_grid: (1, 2),
            crop_pad: 4,
            scheme: AmbiguityScheme::Unique,
            finetune_steps: 300_000,
            one_hot_oracle: false,
            micro_batch: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized run on the mini scenario.
    pub fn desk() -> Self {
        Self {
            scenario: Scenario::Mini,
            n_per_task: 25,
            total_steps: 60_000,
            eval_every: 2_000,
            finetune_steps: 20_000,
            micro_batch: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("tasks_per_batch", self.tasks_per_batch),
            ("samples_per_task", self.samples_per_task),
            ("n_per_task", self.n_per_task),
            ("eval_trials", self.eval_trials),
            ("eval_batch", self.eval_batch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("alpha_g", self.alpha_g),
            ("beta", self.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.alpha_d >= 0.0 && self.alpha_d.is_finite()) {
            return bad(format!(
                "alpha_d must be non-negative, got {}",
                self.alpha_d
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.one_hot_oracle && self.mode != ConditioningMode::OneHot {
            return bad("one_hot_oracle applies to one_hot mode only".into());
        }
        if self.upsample_color_shape && self.scenario != Scenario::B {
            return bad("upsample_color_shape applies to scenario B only".into());
        }
        if !matches!(
            self.mcil_eval,
            ConditioningMode::LanguageOnly | ConditioningMode::DemoOnly
        ) {
            return bad("mcil_eval must be language_only or demo_only".into());
        }
        let (m, n) = self.demo_grid;
        if m * n < 2 {
            return bad("demo_grid needs at least 2 cells".into());
        }
        let pool = self.training_ids().len();
        if self.tasks_per_batch > pool {
            return bad(format!(
                "tasks_per_batch {} exceeds {pool} training tasks",
                self.tasks_per_batch
            ));
        }
        if matches!(
            self.mode,
            ConditioningMode::Deltaco | ConditioningMode::DemoOnly
        ) && self.tasks_per_batch < 2
        {
            return bad("tasks_per_batch must be at least 2 for the contrastive term".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.mode, self.arch, self.demo_grid)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            trials: self.eval_trials,
            deterministic: self.deterministic_eval,
            mcil_eval: self.mcil_eval,
            scheme: self.scheme,
            demo_grid: self.demo_grid,
            max_batch: self.eval_batch,
        }
    }

    pub fn sample_config(&self, available_tasks: usize) -> SampleConfig {
        SampleConfig {
            tasks_per_batch: self.tasks_per_batch.min(available_tasks),
            samples_per_task: self.samples_per_task,
            upsample_color_shape: self.upsample_color_shape,
            demo_grid: self.demo_grid,
            crop_pad: self.crop_pad,
        }
    }

    pub fn is_oracle(&self) -> bool {
        self.mode == ConditioningMode::OneHot && self.one_hot_oracle
    }

    /// Tasks whose data the policy trains on: the test tasks for the one-hot
    /// oracle, the training split otherwise.
    pub fn training_ids(&self) -> Vec<usize> {
        let s = taskspace::split(self.scenario);
        let ids = if self.is_oracle() {
            s.test_ids
        } else {
            s.train_ids
        };
        ids.into_iter().collect()
    }

    /// Per-task demo counts of the training buffer. The one-hot oracle gets
    /// the same total spread over the test tasks.
    pub fn buffer_quotas(&self) -> Vec<(usize, usize)> {
        let s = taskspace::split(self.scenario);
        if self.is_oracle() {
            let test: Vec<usize> = s.test_ids.into_iter().collect();
            budget_quotas(&test, self.n_per_task * s.train_ids.len())
        } else {
            s.train_ids
                .into_iter()
                .map(|id| (id, self.n_per_task))
                .collect()
        }
    }
}

/// Assert that `buffer` is the buffer `cfg` prescribes: right tasks, and for
/// the one-hot oracle the same trajectory total as the other methods.
pub fn check_buffer(cfg: &TrainConfig, buffer: &Buffer) -> Result<()> {
    let want = cfg.buffer_quotas();
    let want_ids: Vec<usize> = want.iter().map(|q| q.0).collect();
    if buffer.task_ids() != want_ids {
        return Err(Error::InvalidArgument(format!(
            "buffer covers {} tasks, {}{} on scenario {} needs {}",
            buffer.tasks.len(),
            cfg.mode,
            if cfg.is_oracle() { " oracle" } else { "" },
            cfg.scenario,
            want_ids.len()
        )));
    }
    if cfg.is_oracle() {
        let total: usize = want.iter().map(|q| q.1).sum();
        if buffer.num_trajectories() != total {
            return Err(Error::InvalidArgument(format!(
                "one-hot oracle buffer holds {} trajectories, the other methods train on {total}",
                buffer.num_trajectories()
            )));
        }
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mode: ConditioningMode,
    #[serde(rename = "L_pi")]
    pub l_pi: f64,
    #[serde(rename = "L_demo")]
    pub l_demo: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub train_success_opt: Option<f64>,
    pub test_success: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunEcho {
    train: TrainConfig,
    model: ModelConfig,
    seed: u64,
}

/// Parameters, optimizer state and step counter of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub agent: Agent,
    pub opt: Adam,
    pub step: u64,
}

/// Tensors one loss evaluation consumes. Per-task tensors have one row per
/// task; `rows[i]` is the task row of sample `i`.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub obs: Tensor,
    pub proprio: Tensor,
    pub actions: Tensor,
    pub grippers: Tensor,
    pub rows: Tensor,
    pub demo_images: Option<Tensor>,
    pub z_lang: Option<Tensor>,
    pub one_hot: Option<Tensor>,
}

impl LossInputs {
    /// Samples `start..start + len` with the per-task tensors shared.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let cut = |t: &Tensor| t.narrow(0, start, len).map_err(Error::from);
        Ok(Self {
            obs: cut(&self.obs)?,
            proprio: cut(&self.proprio)?,
            actions: cut(&self.actions)?,
            grippers: cut(&self.grippers)?,
            rows: cut(&self.rows)?,
            demo_images: self.demo_images.clone(),
            z_lang: self.z_lang.clone(),
            one_hot: self.one_hot.clone(),
        })
    }

    pub fn from_batch(agent: &Agent, batch: &Batch, backend: &LanguageBackend) -> Result<Self> {
        let dtype = agent.dtype();
        let dev = agent.device();
        let mode = agent.cfg.mode;
        let n = batch.len();
        let images: Vec<&[u8]> = batch.obs.chunks_exact(IMG * IMG * 3).collect();
        let obs = images_to_tensor(&images, IMG, IMG, dtype)?;
        let proprio: Vec<f32> = batch.proprio.iter().flatten().copied().collect();
        let proprio = Tensor::from_vec(proprio, (n, PROPRIO_DIM), dev)?.to_dtype(dtype)?;
        let actions: Vec<f32> = batch.actions.iter().flatten().copied().collect();
        let actions = Tensor::from_vec(actions, (n, 3), dev)?.to_dtype(dtype)?;
        let grippers = Tensor::from_vec(batch.grippers.clone(), (n, 1), dev)?.to_dtype(dtype)?;
        let rows: Vec<u32> = (0..n).map(|i| (i / batch.per_task) as u32).collect();
        let rows = Tensor::from_vec(rows, n, dev)?;
        let demo_images = if mode.uses_demo() {
            let d = batch.demos.first().ok_or(Error::MissingEmbedding {
                mode: mode.to_string(),
                what: "demo",
            })?;
            let images: Vec<&[u8]> = batch.demos.iter().map(|d| d.image.as_slice()).collect();
            Some(images_to_tensor(&images, d.height, d.width, dtype)?)
        } else {
            None
        };
        let z_lang = if mode == ConditioningMode::OneHot {
            None
        } else {
            Some(backend.encode_batch(&batch.instructions, dtype)?)
        };
        let one_hot = if mode == ConditioningMode::OneHot {
            let slots = agent.cfg.policy.num_task_slots;
            let mut flat = Vec::with_capacity(batch.tasks.len() * slots);
            for &id in &batch.tasks {
                flat.extend(one_hot_embedding(id, slots)?);
            }
            Some(Tensor::from_vec(flat, (batch.tasks.len(), slots), dev)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            obs,
            proprio,
            actions,
            grippers,
            rows,
            demo_images,
            z_lang,
            one_hot,
        })
    }
}

/// Scalar losses and parameter gradients of one sampled batch.
pub struct StepGradients {
    pub l_pi: f64,
    pub l_demo: f64,
    pub l: f64,
    pub tasks: Vec<usize>,
    pub grads: BTreeMap<String, Tensor>,
}

/// Loss tensors for one batch.
pub struct BatchLosses {
    pub l_pi: Tensor,
    pub l_demo: Tensor,
    pub l: Tensor,
}

/// Training objective of `agent` on `batch`, per the agent's mode.
pub fn batch_losses(
    agent: &Agent,
    batch: &Batch,
    backend: &LanguageBackend,
    cfg: &TrainConfig,
) -> Result<BatchLosses> {
    losses(agent, &LossInputs::from_batch(agent, batch, backend)?, cfg)
}

/// Policy loss, task-embedding loss and their weighted sum.
pub fn losses(agent: &Agent, inp: &LossInputs, cfg: &TrainConfig) -> Result<BatchLosses> {
    use ConditioningMode as M;
    let mode = agent.cfg.mode;
    let missing = |what| Error::MissingEmbedding {
        mode: mode.to_string(),
        what,
    };
    let z_demo = match (&agent.demo_encoder, &inp.demo_images, mode.uses_demo()) {
        (Some(enc), Some(x), true) => Some(enc.forward(x)?),
        (_, _, true) => return Err(missing("demo")),
        _ => None,
    };
    if mode.uses_language() && inp.z_lang.is_none() {
        return Err(missing("language"));
    }
    let expand = |t: Option<&Tensor>| -> Result<Option<Tensor>> {
        t.map(|t| t.index_select(&inp.rows, 0).map_err(Error::from))
            .transpose()
    };
    let (zd, zl, oh) = (
        expand(z_demo.as_ref())?,
        expand(inp.z_lang.as_ref())?,
        expand(inp.one_hot.as_ref())?,
    );
    let inputs = TaskInputs {
        z_demo: zd.as_ref(),
        z_lang: zl.as_ref(),
        one_hot: oh.as_ref(),
    };
    let pi_loss = |pass: ConditioningMode| -> Result<Tensor> {
        let out = agent
            .policy
            .forward(&inp.obs, &inp.proprio, &inputs, pass)?;
        policy_loss(&out, &inp.actions, &inp.grippers, cfg.alpha_g)
    };
    let l_pi = match mode {
        M::Mcil => ((pi_loss(M::DemoOnly)? + pi_loss(M::LanguageOnly)?)? * 0.5)?,
        m => pi_loss(m)?,
    };
    let zero = || Tensor::new(0f64, agent.device())?.to_dtype(agent.dtype());
    let pair = || -> Result<(&Tensor, &Tensor)> {
        Ok((
            z_demo.as_ref().ok_or_else(|| missing("demo"))?,
            inp.z_lang.as_ref().ok_or_else(|| missing("language"))?,
        ))
    };
    let (l_demo, alpha_d) = match mode {
        M::Deltaco | M::DemoOnly => {
            let (zd, zl) = pair()?;
            (
                contrastive_loss(zd, zl, cfg.beta, cfg.symmetric_contrastive)?,
                cfg.alpha_d,
            )
        }
        M::Bcz => {
            let (zd, zl) = pair()?;
            (cosine_loss(zd, zl)?, cfg.alpha_d)
        }
        M::OneHot | M::LanguageOnly | M::Mcil => (zero()?, 0.0),
    };
    let l = joint_loss(&l_pi, &l_demo, alpha_d)?;
    Ok(BatchLosses { l_pi, l_demo, l })
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig, seed: u64) -> Result<Self> {
        if model.mode != cfg.mode {
            return Err(Error::InvalidArgument(format!(
                "model mode {} differs from config mode {}",
                model.mode, cfg.mode
            )));
        }
        let mut rng = seeds::rng_for(seed, &[stream::INIT]);
        let agent = Agent::new(model, DType::F32, &mut rng)?;
        let opt = Adam::new(
            &agent.params,
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            cfg,
            seed,
            agent,
            opt,
            step: 0,
        })
    }

    /// Losses and summed parameter gradients of the batch for the current
    /// step, accumulated over `micro_batch` chunks.
    pub fn gradients(&self, buffer: &Buffer, backend: &LanguageBackend) -> Result<StepGradients> {
        let mut rng = seeds::rng_for(self.seed, &[stream::BATCH, self.step]);
        let sample = self.cfg.sample_config(buffer.tasks.len());
        let batch = sample_task_batch(buffer, &sample, &mut rng)?;
        let inp = LossInputs::from_batch(&self.agent, &batch, backend)?;
        let n = batch.len();
        let chunk = if self.cfg.micro_batch == 0 {
            n
        } else {
            self.cfg.micro_batch.min(n)
        };
        let scalar =
            |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut out = StepGradients {
            l_pi: 0.0,
            l_demo: 0.0,
            l: 0.0,
            tasks: batch.tasks.clone(),
            grads: BTreeMap::new(),
        };
        for start in (0..n).step_by(chunk) {
            let len = chunk.min(n - start);
            let losses = if len == n {
                losses(&self.agent, &inp, &self.cfg)?
            } else {
                losses(&self.agent, &inp.narrow(start, len)?, &self.cfg)?
            };
            let w = len as f64 / n as f64;
            let (c_pi, c_l) = (scalar(&losses.l_pi)?, scalar(&losses.l)?);
            // The task-embedding term is counted once, on the first chunk.
            let objective = if len == n {
                (out.l_pi, out.l_demo, out.l) = (c_pi, scalar(&losses.l_demo)?, c_l);
                losses.l
            } else if start == 0 {
                out.l_demo = scalar(&losses.l_demo)?;
                out.l += c_l - c_pi * (1.0 - w);
                out.l_pi += c_pi * w;
                (&losses.l - (&losses.l_pi * (1.0 - w))?)?
            } else {
                out.l += c_pi * w;
                out.l_pi += c_pi * w;
                (&losses.l_pi * w)?
            };
            for (name, g) in param_grads(&self.agent.params, &objective)? {
                let sum = match out.grads.remove(&name) {
                    Some(acc) => (acc + g)?,
                    None => g,
                };
                out.grads.insert(name, sum);
            }
        }
        Ok(out)
    }

    /// One gradient step on a freshly sampled batch.
    pub fn iteration(&mut self, buffer: &Buffer, backend: &LanguageBackend) -> Result<MetricsRow> {
        let StepGradients {
            l_pi,
            l_demo,
            l,
            tasks,
            grads,
        } = self.gradients(buffer, backend)?;
        if !(l_pi.is_finite() && l_demo.is_finite() && l.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("L_pi={l_pi} L_demo={l_demo} L={l} tasks={tasks:?}"),
            });
        }
        self.opt.apply(&self.agent.params, &grads)?;
        self.step += 1;
        Ok(MetricsRow {
            step: self.step,
            mode: self.cfg.mode,
            l_pi,
            l_demo,
            l,
            train_success_opt: None,
            test_success: None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let echo = RunEcho {
            train: self.cfg.clone(),
            model: self.agent.cfg.clone(),
            seed: self.seed,
        };
        let (adam_m, adam_v) = self.opt.export()?;
        Ok(Checkpoint {
            config_json: serde_json::to_string(&echo).expect("config serializes"),
            step: self.step,
            optimizer_step: self.opt.t,
            params: self.agent.params.export()?,
            adam_m,
            adam_v,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let echo: RunEcho =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::Malformed {
                path: PathBuf::from("<checkpoint>"),
                msg: format!("config echo: {e}"),
            })?;
        let mut t = Self::new(echo.train, echo.model, echo.seed)?;
        t.agent.params.import(&ck.params)?;
        t.opt.import(ck.optimizer_step, &ck.adam_m, &ck.adam_v)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn evaluate(
        &self,
        env: &TabletopEnv,
        val: &ValSet,
        backend: &LanguageBackend,
    ) -> Result<f64> {
        let eval = self.cfg.eval_config();
        let mut ctl = PolicyController::new(&self.agent, backend, &eval);
        run_evaluation_set(env, &mut ctl, val, self.seed, &eval)
    }
}

/// One demo per task taken from a training buffer, for train-task evaluation.
pub fn first_demo_set(buffer: &Buffer) -> Result<ValSet> {
    let mut b = Buffer::default();
    for (&id, bucket) in &buffer.tasks {
        let first = bucket.trajectories.first().ok_or(Error::EmptyBucket(id))?;
        b.insert(id, bucket.instruction.clone(), vec![first.clone()]);
    }
    ValSet::from_buffer(b)
}

/// Where a run writes its metrics and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step:08}.dlck"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.dlck")
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<MetricsRow>,
    /// Test success per evaluation set, in order.
    pub test_success: Vec<f64>,
}

/// Run `steps` iterations from the trainer's current state, evaluating every
/// `eval_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    mut trainer: Trainer,
    steps: u64,
    buffer: &Buffer,
    val: &ValSet,
    train_val: Option<&ValSet>,
    backend: &LanguageBackend,
    env: &TabletopEnv,
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    let mut writer = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            let path = o.metrics_path();
            let exists = path.exists() && std::fs::metadata(&path)?.len() > 0;
            let file = File::options().create(true).append(true).open(&path)?;
            Some(
                csv::WriterBuilder::new()
                    .has_headers(!exists)
                    .from_writer(file),
            )
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut test_success = Vec::new();
    let end = trainer.step + steps;
    while trainer.step < end {
        let mut row = match trainer.iteration(buffer, backend) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(o) = out {
                    let dump = o.dir.join(format!("nonfinite_step{:08}.txt", trainer.step));
                    let finite: Vec<String> = trainer
                        .agent
                        .params
                        .export()?
                        .iter()
                        .map(|a| {
                            format!("{} finite={}", a.name, a.data.iter().all(|x| x.is_finite()))
                        })
                        .collect();
                    std::fs::write(&dump, format!("{e}\n{}\n", finite.join("\n")))?;
                    log::error!("non-finite loss; diagnostics written to {}", dump.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if trainer.step.is_multiple_of(trainer.cfg.eval_every) {
            let rate = trainer.evaluate(env, val, backend)?;
            row.test_success = Some(rate);
            test_success.push(rate);
            if let Some(tv) = train_val {
                row.train_success_opt = Some(trainer.evaluate(env, tv, backend)?);
            }
            log::info!(
                "step {} {}: test success {:.3}",
                trainer.step,
                trainer.cfg.mode,
                rate
            );
            if let Some(o) = out {
                trainer
                    .checkpoint()?
                    .save(&o.checkpoint_path(trainer.step))?;
            }
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        metrics.push(row);
    }
    if let Some(o) = out {
        trainer.checkpoint()?.save(&o.final_path())?;
    }
    Ok(TrainOutcome {
        trainer,
        metrics,
        test_success,
    })
}

/// Train from scratch for `cfg.total_steps`.
pub fn train(
    cfg: &TrainConfig,
    model: ModelConfig,
    seed: u64,
    buffer: &Buffer,
    val: &ValSet,
    backend: &LanguageBackend,
    env: &TabletopEnv,
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_buffer(cfg, buffer)?;
    let train_val = if cfg.eval_train_tasks {
        Some(first_demo_set(buffer)?)
    } else {
        None
    };
    let trainer = Trainer::new(cfg.clone(), model, seed)?;
    run_loop(
        trainer,
        cfg.total_steps,
        buffer,
        val,
        train_val.as_ref(),
        backend,
        env,
        out,
    )
}

/// Continue training a demo-only checkpoint on `n` demos of each test task.
/// `n = 0` returns the checkpoint unchanged.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    ck: &Checkpoint,
    demos: &Buffer,
    n: usize,
    steps: u64,
    val: &ValSet,
    backend: &LanguageBackend,
    env: &TabletopEnv,
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::from_checkpoint(ck)?;
    if trainer.agent.cfg.mode != ConditioningMode::DemoOnly {
        return Err(Error::InvalidArgument(format!(
            "finetuning needs a demo_only checkpoint, got {}",
            trainer.agent.cfg.mode
        )));
    }
    if n == 0 {
        return Ok(TrainOutcome {
            trainer,
            metrics: Vec::new(),
            test_success: Vec::new(),
        });
    }
    let mut subset = Buffer::default();
    for id in val.task_ids() {
        let bucket = demos.tasks.get(&id).ok_or(Error::EmptyBucket(id))?;
        if bucket.trajectories.len() < n {
            return Err(Error::Quota {
                task_id: id,
                collected: bucket.trajectories.len(),
                wanted: n,
                attempts: 0,
            });
        }
        subset.insert(
            id,
            bucket.instruction.clone(),
            bucket.trajectories[..n].to_vec(),
        );
    }
    run_loop(trainer, steps, &subset, val, None, backend, env, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.tasks_per_batch, c.samples_per_task), (16, 64));
        assert_eq!(c.learning_rate, 3e-4);
        assert_eq!((c.alpha_g, c.alpha_d, c.beta), (30.0, 10.0, 0.1));
        assert_eq!((c.eval_every, c.eval_trials), (10_000, 2));
        assert_eq!(c.crop_pad, 4);
        let d = TrainConfig::desk();
        assert_eq!(
            (d.scenario, d.n_per_task, d.total_steps, d.eval_every),
            (Scenario::Mini, 25, 60_000, 2_000)
        );
        d.validate().unwrap();
    }

    #[test]
    fn one_hot_budget_matches_training_total() {
        let cfg = TrainConfig {
            mode: ConditioningMode::OneHot,
            one_hot_oracle: true,
            ..TrainConfig::desk()
        };
        let q = cfg.buffer_quotas();
        assert_eq!(q.len(), 36);
        assert_eq!(q.iter().map(|x| x.1).sum::<usize>(), 25 * 84);
        let other = TrainConfig::desk().buffer_quotas();
        assert_eq!(other.len(), 84);
        let baseline = TrainConfig {
            mode: ConditioningMode::OneHot,
            ..TrainConfig::desk()
        };
        assert_eq!(baseline.buffer_quotas(), other);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = TrainConfig::desk();
        assert!(TrainConfig {
            upsample_color_shape: true,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            tasks_per_batch: 200,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            one_hot_oracle: true,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            mode: ConditioningMode::Mcil,
            mcil_eval: ConditioningMode::Deltaco,
            ..ok
        }
        .validate()
        .is_err());
    }
}
