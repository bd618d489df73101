//! Scripted pick-and-place expert and demonstration collection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Buffer, Trajectory, ValSet, TRAJ_LEN};
use crate::error::{Error, Result};
use crate::render::OBS_BYTES;
use crate::seeds::{self, stream};
use crate::simenv::{check_success, Action, ResetOptions, SceneState, TabletopEnv};
use crate::taskspace::{self, TaskSpec};
use crate::verify::verify_trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub dist_thresh: f32,
    /// Standard deviation of the per-dimension action noise, in units of
    /// the environment's maximum per-step displacement.
    pub noise_sigma: f32,
    pub num_timesteps: usize,
    /// Demo attempts allowed per requested demo before giving up.
    pub attempt_factor: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            dist_thresh: 0.02,
            noise_sigma: 0.1,
            num_timesteps: TRAJ_LEN,
            attempt_factor: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseMemory {
    pub place_attempted: bool,
}

/// Which object to pick and which container to drop it in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertTarget {
    pub object: usize,
    pub container: usize,
}

impl ExpertTarget {
    pub fn of(state: &SceneState) -> Self {
        Self {
            object: state.target_object,
            container: state.target_container,
        }
    }
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// One step of the scripted policy, before noise.
pub fn expert_action_clean(
    env: &TabletopEnv,
    state: &SceneState,
    target: ExpertTarget,
    memory: &mut PhaseMemory,
    cfg: &ExpertConfig,
) -> Action {
    let eef = state.eef_pos;
    let pick = state.objects[target.object].pos;
    let (cx, cy) = state.containers[target.container].center();
    let drop = [cx, cy, env.cfg.lift_height + 0.05];
    let grasped = state.attached_object == Some(target.object);
    let lifted = eef[2] >= env.cfg.lift_height - 1e-6;

    if memory.place_attempted {
        Action::ZERO
    } else if !grasped && dist(eef, pick) > cfg.dist_thresh {
        Action {
            delta: sub(pick, eef),
            gripper: 0.0,
        }
    } else if !grasped {
        Action {
            delta: sub(pick, eef),
            gripper: 1.0,
        }
    } else if !lifted {
        Action {
            delta: [0.0, 0.0, 1.0],
            gripper: 1.0,
        }
    } else if dist(eef, drop) > cfg.dist_thresh {
        Action {
            delta: sub(drop, eef),
            gripper: 1.0,
        }
    } else {
        memory.place_attempted = true;
        Action {
            delta: [0.0; 3],
            gripper: 0.0,
        }
    }
}

/// Scripted action with Gaussian noise added to every displacement.
pub fn expert_action(
    env: &TabletopEnv,
    state: &SceneState,
    target: ExpertTarget,
    memory: &mut PhaseMemory,
    cfg: &ExpertConfig,
    rng: &mut impl Rng,
) -> Action {
    let mut a = expert_action_clean(env, state, target, memory, cfg);
    let sigma = cfg.noise_sigma * env.cfg.max_step;
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
        for d in &mut a.delta {
            *d += normal.sample(rng);
        }
    }
    a
}

/// Roll the expert on `(task, seed)` and record every step. Returns the
/// trajectory and whether the final state is a success.
pub fn rollout_expert(
    env: &TabletopEnv,
    task: &TaskSpec,
    seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Trajectory, SceneState)> {
    let (mut state, mut obs) = env.reset(task, seed, opts)?;
    let mut rng = seeds::rng_for(seed, &[stream::ACTION_NOISE, task.task_id as u64]);
    let target = ExpertTarget::of(&state);
    let mut memory = PhaseMemory::default();
    let steps = cfg.num_timesteps.min(env.cfg.horizon);
    let mut tr = Trajectory {
        task_id: task.task_id,
        frames: Vec::with_capacity(steps * OBS_BYTES),
        proprio: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        grippers: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let a = expert_action(env, &state, target, &mut memory, cfg, &mut rng);
        let m = env.cfg.max_step;
        let executed = a.delta.map(|v| v.clamp(-m, m));
        let gripper = if a.gripper >= env.cfg.gripper_threshold {
            1.0
        } else {
            0.0
        };
        tr.frames.extend_from_slice(&obs.rgb);
        tr.proprio.push([
            obs.proprio[0],
            obs.proprio[1],
            obs.proprio[2],
            obs.proprio[3],
        ]);
        tr.actions.push(executed);
        tr.grippers.push(gripper);
        let (next, _) = env.step(
            &mut state,
            &Action {
                delta: executed,
                gripper,
            },
        )?;
        obs = next;
    }
    Ok((tr, state))
}

/// A successful, frame-verifiable expert trajectory, or `None`.
pub fn collect_trajectory(
    env: &TabletopEnv,
    task: &TaskSpec,
    seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<Option<Trajectory>> {
    let (tr, state) = rollout_expert(env, task, seed, opts, cfg)?;
    let ok = tr.len() == TRAJ_LEN && check_success(&state, task) && verify_trajectory(&tr, task);
    Ok(ok.then_some(tr))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectionStats {
    pub attempts: usize,
    pub successes: usize,
}

impl CollectionStats {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }

    fn merge(self, o: Self) -> Self {
        Self {
            attempts: self.attempts + o.attempts,
            successes: self.successes + o.successes,
        }
    }
}

/// Seed for attempt `attempt` of task `task_id` in a given stream.
pub fn demo_seed(base_seed: u64, stream_tag: u64, task_id: usize, attempt: usize) -> u64 {
    seeds::derive(base_seed, &[stream_tag, task_id as u64, attempt as u64])
}

fn collect_for_task(
    env: &TabletopEnv,
    task_id: usize,
    wanted: usize,
    base_seed: u64,
    stream_tag: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Vec<Trajectory>, CollectionStats)> {
    let task = taskspace::task(task_id)?;
    let budget = wanted * cfg.attempt_factor.max(1);
    let mut out = Vec::with_capacity(wanted);
    let mut stats = CollectionStats::default();
    while out.len() < wanted {
        if stats.attempts >= budget {
            return Err(Error::Quota {
                task_id,
                collected: out.len(),
                wanted,
                attempts: stats.attempts,
            });
        }
        let seed = demo_seed(base_seed, stream_tag, task_id, stats.attempts);
        stats.attempts += 1;
        if let Some(tr) = collect_trajectory(env, &task, seed, opts, cfg)? {
            stats.successes += 1;
            out.push(tr);
        }
    }
    Ok((out, stats))
}

/// Collect `quota(task)` demos for every task; tasks run in parallel but
/// results are identical to a serial run.
pub fn collect_buffer(
    env: &TabletopEnv,
    quotas: &[(usize, usize)],
    base_seed: u64,
    stream_tag: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Buffer, CollectionStats)> {
    let results: Vec<Result<(usize, Vec<Trajectory>, CollectionStats)>> = quotas
        .par_iter()
        .map(|&(id, n)| {
            collect_for_task(env, id, n, base_seed, stream_tag, opts, cfg).map(|(t, s)| (id, t, s))
        })
        .collect();
    let mut buffer = Buffer::default();
    let mut stats = CollectionStats::default();
    for r in results {
        let (id, trajs, s) = r?;
        buffer.insert(id, taskspace::instruction(id)?.text, trajs);
        stats = stats.merge(s);
    }
    Ok((buffer, stats))
}

pub fn build_training_buffer(
    env: &TabletopEnv,
    train_ids: &[usize],
    n_per_task: usize,
    base_seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Buffer, CollectionStats)> {
    if n_per_task == 0 {
        return Err(Error::InvalidArgument(
            "n_per_task must be at least 1".into(),
        ));
    }
    let quotas: Vec<(usize, usize)> = train_ids.iter().map(|&id| (id, n_per_task)).collect();
    collect_buffer(env, &quotas, base_seed, stream::TRAIN_DEMO, opts, cfg)
}

/// Split `total` demos over `ids` as evenly as possible; the remainder goes
/// to the lowest ids.
pub fn budget_quotas(ids: &[usize], total: usize) -> Vec<(usize, usize)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let (q, r) = (total / sorted.len().max(1), total % sorted.len().max(1));
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, q + usize::from(i < r)))
        .collect()
}

/// Buffer with exactly `total` trajectories spread over `ids`.
pub fn build_budget_buffer(
    env: &TabletopEnv,
    ids: &[usize],
    total: usize,
    base_seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Buffer, CollectionStats)> {
    let quotas = budget_quotas(ids, total);
    if quotas.iter().any(|&(_, n)| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "budget {total} leaves some of {} tasks empty",
            ids.len()
        )));
    }
    collect_buffer(env, &quotas, base_seed, stream::TRAIN_DEMO, opts, cfg)
}

pub fn build_validation_set(
    env: &TabletopEnv,
    test_ids: &[usize],
    base_seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(ValSet, CollectionStats)> {
    let quotas: Vec<(usize, usize)> = test_ids.iter().map(|&id| (id, 1)).collect();
    let (buffer, stats) = collect_buffer(env, &quotas, base_seed, stream::VAL_DEMO, opts, cfg)?;
    Ok((ValSet::from_buffer(buffer)?, stats))
}

/// `n` demos per task for finetuning, drawn from a stream disjoint from
/// both training and validation demos.
pub fn build_finetune_buffer(
    env: &TabletopEnv,
    test_ids: &[usize],
    n: usize,
    base_seed: u64,
    opts: ResetOptions,
    cfg: &ExpertConfig,
) -> Result<(Buffer, CollectionStats)> {
    let quotas: Vec<(usize, usize)> = test_ids.iter().map(|&id| (id, n)).collect();
    collect_buffer(env, &quotas, base_seed, stream::FINETUNE_DEMO, opts, cfg)
}
