//! Policy rollouts on held-out tasks and success-rate aggregation.

use std::fmt;
use std::path::Path;

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_demo_array, ValSet};
use crate::encoders::{images_to_tensor, one_hot_embedding, LanguageBackend};
use crate::expert::{expert_action, expert_action_clean, ExpertConfig, ExpertTarget, PhaseMemory};
use crate::policy::{act, Agent, ConditioningMode, TaskInputs};
use crate::render::IMG;
use crate::seeds::{self, stream};
use crate::simenv::{
    check_success, Action, AmbiguityScheme, Observation, ResetOptions, SceneState, TabletopEnv,
};
use crate::taskspace::{self, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    /// Take the Gaussian mean instead of sampling.
    pub deterministic: bool,
    /// Conditioning used at test time by a policy trained in `mcil` mode.
    pub mcil_eval: ConditioningMode,
    pub scheme: AmbiguityScheme,
    pub demo_grid: (usize, usize),
    /// Episodes stepped together in one forward pass.
    pub max_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 2,
            deterministic: false,
            mcil_eval: ConditioningMode::LanguageOnly,
            scheme: AmbiguityScheme::Unique,
            demo_grid: (1, 2),
            max_batch: 128,
        }
    }
}

/// Seed of trial `trial` of `task_id` within a run.
pub fn trial_seed(run_seed: u64, task_id: usize, trial: usize) -> u64 {
    seeds::derive(
        run_seed,
        &[stream::EVAL_EPISODE, task_id as u64, trial as u64],
    )
}

/// One live evaluation episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskSpec,
    pub trial: usize,
    pub state: SceneState,
    pub obs: Observation,
    pub rng: ChaCha8Rng,
}

/// Anything that can drive a batch of episodes in lockstep.
pub trait Controller {
    /// Fix per-episode conditioning; called once after reset.
    fn begin(&mut self, env: &TabletopEnv, episodes: &mut [Episode], val: &ValSet) -> Result<()>;
    fn act(&mut self, env: &TabletopEnv, episodes: &mut [Episode]) -> Result<Vec<Action>>;
}

/// Does nothing; never succeeds.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdleController;

impl Controller for IdleController {
    fn begin(&mut self, _: &TabletopEnv, _: &mut [Episode], _: &ValSet) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &TabletopEnv, episodes: &mut [Episode]) -> Result<Vec<Action>> {
        Ok(vec![Action::ZERO; episodes.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptTarget {
    /// The task's own object and container.
    True,
    /// A uniformly random object and container of the scene.
    Random,
}

/// The scripted expert standing in for a learned policy.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    pub target: ScriptTarget,
    pub expert: ExpertConfig,
    targets: Vec<ExpertTarget>,
    memories: Vec<PhaseMemory>,
}

impl ScriptedController {
    pub fn new(target: ScriptTarget, expert: ExpertConfig) -> Self {
        Self {
            target,
            expert,
            targets: Vec::new(),
            memories: Vec::new(),
        }
    }
}

impl Controller for ScriptedController {
    fn begin(&mut self, _: &TabletopEnv, episodes: &mut [Episode], _: &ValSet) -> Result<()> {
        self.targets = episodes
            .iter_mut()
            .map(|ep| match self.target {
                ScriptTarget::True => ExpertTarget::of(&ep.state),
                ScriptTarget::Random => ExpertTarget {
                    object: ep.rng.random_range(0..ep.state.objects.len()),
                    container: ep.rng.random_range(0..ep.state.containers.len()),
                },
            })
            .collect();
        self.memories = vec![PhaseMemory::default(); episodes.len()];
        Ok(())
    }

    fn act(&mut self, env: &TabletopEnv, episodes: &mut [Episode]) -> Result<Vec<Action>> {
        Ok(episodes
            .iter_mut()
            .enumerate()
            .map(|(i, ep)| {
                let (t, m) = (self.targets[i], &mut self.memories[i]);
                if self.expert.noise_sigma > 0.0 {
                    expert_action(env, &ep.state, t, m, &self.expert, &mut ep.rng)
                } else {
                    expert_action_clean(env, &ep.state, t, m, &self.expert)
                }
            })
            .collect())
    }
}

/// A trained agent; conditioning embeddings are computed once per episode.
pub struct PolicyController<'a> {
    pub agent: &'a Agent,
    pub backend: &'a LanguageBackend,
    pub pass: ConditioningMode,
    pub deterministic: bool,
    pub demo_grid: (usize, usize),
    z_demo: Option<Tensor>,
    z_lang: Option<Tensor>,
    one_hot: Option<Tensor>,
}

impl<'a> PolicyController<'a> {
    pub fn new(agent: &'a Agent, backend: &'a LanguageBackend, cfg: &EvalConfig) -> Self {
        let pass = match agent.cfg.mode {
            ConditioningMode::Mcil => cfg.mcil_eval,
            m => m,
        };
        Self {
            agent,
            backend,
            pass,
            deterministic: cfg.deterministic,
            demo_grid: cfg.demo_grid,
            z_demo: None,
            z_lang: None,
            one_hot: None,
        }
    }
}

impl Controller for PolicyController<'_> {
    fn begin(&mut self, _: &TabletopEnv, episodes: &mut [Episode], val: &ValSet) -> Result<()> {
        let dtype = self.agent.dtype();
        let entries = episodes
            .iter()
            .map(|ep| {
                val.entry(ep.task.task_id)
                    .ok_or_else(|| Error::MissingEmbedding {
                        mode: self.pass.to_string(),
                        what: "validation demo",
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let (m, n) = self.demo_grid;
        self.z_demo = None;
        self.z_lang = None;
        self.one_hot = None;
        let needs_demo = matches!(
            self.pass,
            ConditioningMode::DemoOnly | ConditioningMode::Bcz | ConditioningMode::Deltaco
        );
        if needs_demo {
            let enc = self
                .agent
                .demo_encoder
                .as_ref()
                .ok_or_else(|| Error::MissingEmbedding {
                    mode: self.pass.to_string(),
                    what: "demo",
                })?;
            let demos = entries
                .iter()
                .zip(episodes.iter_mut())
                .map(|((tr, _), ep)| make_demo_array(tr, m, n, &mut ep.rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = demos.iter().collect();
            self.z_demo = Some(enc.encode_arrays(&refs, dtype)?.detach());
        }
        if matches!(
            self.pass,
            ConditioningMode::LanguageOnly | ConditioningMode::Deltaco
        ) {
            let texts: Vec<&str> = entries.iter().map(|(_, s)| *s).collect();
            self.z_lang = Some(self.backend.encode_batch(&texts, dtype)?);
        }
        if self.pass == ConditioningMode::OneHot {
            let slots = self.agent.cfg.policy.num_task_slots;
            let mut flat = Vec::with_capacity(episodes.len() * slots);
            for ep in episodes.iter() {
                flat.extend(one_hot_embedding(ep.task.task_id, slots)?);
            }
            let t = Tensor::from_vec(flat, (episodes.len(), slots), self.agent.device())?;
            self.one_hot = Some(t.to_dtype(dtype)?);
        }
        Ok(())
    }

    fn act(&mut self, _: &TabletopEnv, episodes: &mut [Episode]) -> Result<Vec<Action>> {
        let dtype = self.agent.dtype();
        let images: Vec<&[u8]> = episodes.iter().map(|ep| ep.obs.rgb.as_slice()).collect();
        let obs = images_to_tensor(&images, IMG, IMG, dtype)?;
        let p = self.agent.cfg.policy.proprio_dim;
        let flat: Vec<f32> = episodes
            .iter()
            .flat_map(|ep| ep.obs.proprio[..p].to_vec())
            .collect();
        let proprio =
            Tensor::from_vec(flat, (episodes.len(), p), self.agent.device())?.to_dtype(dtype)?;
        let inputs = TaskInputs {
            z_demo: self.z_demo.as_ref(),
            z_lang: self.z_lang.as_ref(),
            one_hot: self.one_hot.as_ref(),
        };
        let out = self
            .agent
            .policy
            .forward(&obs, &proprio, &inputs, self.pass)?;
        let rows = out.rows()?;
        Ok(rows
            .iter()
            .zip(episodes.iter_mut())
            .map(|(r, ep)| act(r, &mut ep.rng, self.deterministic))
            .collect())
    }
}

/// Roll every `(task_id, trial)` pair for one horizon; returns successes in order.
pub fn run_episodes(
    env: &TabletopEnv,
    controller: &mut dyn Controller,
    val: &ValSet,
    jobs: &[(usize, usize)],
    run_seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<bool>> {
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cfg.max_batch.max(1)) {
        let mut episodes = chunk
            .iter()
            .map(|&(task_id, trial)| {
                let task = taskspace::task(task_id)?;
                let seed = trial_seed(run_seed, task_id, trial);
                let target_side = match cfg.scheme {
                    AmbiguityScheme::IdenticalPair => {
                        val.entry(task_id).and_then(|(tr, _)| tr.grasp_side())
                    }
                    AmbiguityScheme::Unique => None,
                };
                let (state, obs) = env.reset(
                    &task,
                    seed,
                    ResetOptions {
                        scheme: cfg.scheme,
                        target_side,
                    },
                )?;
                let rng = seeds::rng_for(seed, &[stream::ACTION_NOISE]);
                Ok(Episode {
                    task,
                    trial,
                    state,
                    obs,
                    rng,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        controller.begin(env, &mut episodes, val)?;
        while !episodes.iter().all(|ep| ep.state.done()) {
            let actions = controller.act(env, &mut episodes)?;
            for (ep, a) in episodes.iter_mut().zip(&actions) {
                if !ep.state.done() {
                    ep.obs = env.step(&mut ep.state, a)?.0;
                }
            }
        }
        results.extend(episodes.iter().map(|ep| check_success(&ep.state, &ep.task)));
    }
    Ok(results)
}

/// Successes out of `trials` rollouts of one task.
pub fn evaluate_task(
    env: &TabletopEnv,
    controller: &mut dyn Controller,
    val: &ValSet,
    task_id: usize,
    run_seed: u64,
    cfg: &EvalConfig,
) -> Result<(usize, usize)> {
    let jobs: Vec<(usize, usize)> = (0..cfg.trials).map(|t| (task_id, t)).collect();
    let ok = run_episodes(env, controller, val, &jobs, run_seed, cfg)?;
    Ok((ok.iter().filter(|&&s| s).count(), cfg.trials))
}

/// Mean success over every task of `val` × `cfg.trials`.
pub fn run_evaluation_set(
    env: &TabletopEnv,
    controller: &mut dyn Controller,
    val: &ValSet,
    run_seed: u64,
    cfg: &EvalConfig,
) -> Result<f64> {
    let jobs: Vec<(usize, usize)> = val
        .task_ids()
        .into_iter()
        .flat_map(|id| (0..cfg.trials).map(move |t| (id, t)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation set has no episodes".into(),
        ));
    }
    let ok = run_episodes(env, controller, val, &jobs, run_seed, cfg)?;
    Ok(ok.iter().filter(|&&s| s).count() as f64 / ok.len() as f64)
}

// ---------------------------------------------------------------------------
// Aggregation

/// Success rates indexed `[seed][evaluation set]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl SuccessMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(Error::InvalidArgument("success matrix is empty".into()));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "success matrix rows differ in length".into(),
            ));
        }
        if rows.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "success rates must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { rows })
    }

    pub fn num_seeds(&self) -> usize {
        self.rows.len()
    }

    pub fn num_sets(&self) -> usize {
        self.rows[0].len()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportStats {
    pub reported_rate: f64,
    pub reported_sd: f64,
    pub selected_sets: Vec<usize>,
}

impl fmt::Display for ReportStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.1} ± {:.1}",
            100.0 * self.reported_rate,
            100.0 * self.reported_sd
        )
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Average, over the `top_n` evaluation sets with the highest seed-mean,
/// of the seed-mean and of the across-seed sample deviation.
pub fn aggregate_report(matrix: &SuccessMatrix, top_n: usize) -> Result<ReportStats> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    if matrix.num_seeds() == 1 {
        log::warn!("single seed: reported deviation is 0");
    }
    let seeds = matrix.num_seeds() as f64;
    let means: Vec<f64> = (0..matrix.num_sets())
        .map(|j| matrix.column(j).sum::<f64>() / seeds)
        .collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
    order.truncate(top_n);
    let k = order.len() as f64;
    let rate = order.iter().map(|&j| means[j]).sum::<f64>() / k;
    let sd = order
        .iter()
        .map(|&j| sample_sd(&matrix.column(j).collect::<Vec<_>>()))
        .sum::<f64>()
        / k;
    Ok(ReportStats {
        reported_rate: rate,
        reported_sd: sd,
        selected_sets: order,
    })
}

/// One row of an evaluation report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: String,
    pub scenario: String,
    pub seed: u64,
    pub eval_set: usize,
    pub success_rate: f64,
}

pub fn write_eval_records(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<EvalRecord>, _>>()?)
}

/// Success matrix for one (mode, scenario) group: one row per seed, columns
/// ordered by evaluation-set index. Seeds must share the same set indices.
pub fn matrix_from_records(records: &[&EvalRecord]) -> Result<SuccessMatrix> {
    let mut by_seed: std::collections::BTreeMap<u64, std::collections::BTreeMap<usize, f64>> =
        Default::default();
    for r in records {
        if by_seed
            .entry(r.seed)
            .or_default()
            .insert(r.eval_set, r.success_rate)
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate eval set {} for seed {}",
                r.eval_set, r.seed
            )));
        }
    }
    let mut sets: Option<Vec<usize>> = None;
    let mut rows = Vec::new();
    for (seed, cols) in by_seed {
        let keys: Vec<usize> = cols.keys().copied().collect();
        match &sets {
            None => sets = Some(keys),
            Some(s) if *s != keys => {
                return Err(Error::InvalidArgument(format!(
                    "seed {seed} has a different set of evaluation sets"
                )));
            }
            _ => {}
        }
        rows.push(cols.into_values().collect());
    }
    SuccessMatrix::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(rows: &[Vec<f64>], top_n: usize) -> (f64, f64) {
        let s = rows.len();
        let cols = rows[0].len();
        let mut cm: Vec<(f64, usize)> = (0..cols)
            .map(|j| (rows.iter().map(|r| r[j]).sum::<f64>() / s as f64, j))
            .collect();
        cm.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let pick = &cm[..top_n.min(cols)];
        let rate = pick.iter().map(|p| p.0).sum::<f64>() / pick.len() as f64;
        let sd = pick
            .iter()
            .map(|&(m, j)| {
                if s < 2 {
                    0.0
                } else {
                    (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt()
                }
            })
            .sum::<f64>()
            / pick.len() as f64;
        (rate, sd)
    }

    #[test]
    fn worked_example() {
        let m = SuccessMatrix::new(vec![vec![0.1, 0.3, 0.2], vec![0.3, 0.5, 0.4]]).unwrap();
        let r = aggregate_report(&m, 1).unwrap();
        assert!((r.reported_rate - 0.4).abs() < 1e-12);
        assert!((r.reported_sd - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.selected_sets, vec![1]);
    }

    #[test]
    fn single_seed_and_constant() {
        let one = SuccessMatrix::new(vec![vec![0.5, 0.25]]).unwrap();
        assert_eq!(aggregate_report(&one, 10).unwrap().reported_sd, 0.0);
        let c = SuccessMatrix::new(vec![vec![0.3; 12]; 3]).unwrap();
        let r = aggregate_report(&c, 10).unwrap();
        assert!((r.reported_rate - 0.3).abs() < 1e-15);
        assert_eq!(r.reported_sd, 0.0);
        assert_eq!(r.selected_sets.len(), 10);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(SuccessMatrix::new(vec![]).is_err());
        assert!(SuccessMatrix::new(vec![vec![]]).is_err());
        assert!(SuccessMatrix::new(vec![vec![0.1], vec![0.1, 0.2]]).is_err());
        assert!(SuccessMatrix::new(vec![vec![1.5]]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(seeds in 1usize..5, sets in 1usize..20, top_n in 1usize..12, data in prop::collection::vec(0.0f64..=1.0, 100)) {
            let rows: Vec<Vec<f64>> = (0..seeds).map(|i| (0..sets).map(|j| data[(i * sets + j) % data.len()]).collect()).collect();
            let r = aggregate_report(&SuccessMatrix::new(rows.clone()).unwrap(), top_n).unwrap();
            let (rate, sd) = brute(&rows, top_n);
            prop_assert!((r.reported_rate - rate).abs() <= 1e-12);
            prop_assert!((r.reported_sd - sd).abs() <= 1e-12);
            let lo = rows.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
            let hi = rows.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.reported_rate >= lo - 1e-12 && r.reported_rate <= hi + 1e-12);
        }
    }

    #[test]
    fn records_round_trip_to_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        let recs: Vec<EvalRecord> = (0..2u64)
            .flat_map(|s| {
                (0..3).map(move |j| EvalRecord {
                    mode: "deltaco".into(),
                    scenario: "mini".into(),
                    seed: s,
                    eval_set: j,
                    success_rate: 0.1 * (s as f64 + j as f64),
                })
            })
            .collect();
        write_eval_records(&recs, &p).unwrap();
        let back = read_eval_records(&p).unwrap();
        assert_eq!(back, recs);
        let refs: Vec<&EvalRecord> = back.iter().collect();
        let m = matrix_from_records(&refs).unwrap();
        assert_eq!(m.num_seeds(), 2);
        assert_eq!(m.num_sets(), 3);
    }
}
