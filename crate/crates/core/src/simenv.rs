//! Deterministic kinematic tabletop environment.
//!
//! The workspace is `[0,1]² × [0,0.5]`, split into four quadrants at
//! `x = 0.5` and `y = 0.5` (front = low y, left = low x). Two quadrants hold
//! the green and red containers; three objects start in the other two.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render;
use crate::seeds;
use crate::taskspace::{objects, ContainerId, TaskSpec};

/// Half the side length of a square container footprint.
pub const BIN_HALF: f32 = 0.15;
const OBJECT_MARGIN: f32 = 0.1;
const MIN_OBJECT_SEPARATION: f32 = 0.12;
pub const Z_MAX: f32 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub max_step: f32,
    pub grasp_height: f32,
    pub lift_height: f32,
    pub horizon: usize,
    pub dist_thresh: f32,
    pub gripper_threshold: f32,
    /// Proprio vector length; values past the 4 native entries are zero.
    pub proprio_dim: usize,
    pub start_height: f32,
    pub start_jitter: f32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_step: 0.1,
            grasp_height: 0.05,
            lift_height: 0.2,
            horizon: 30,
            dist_thresh: 0.02,
            gripper_threshold: 0.5,
            proprio_dim: 4,
            start_height: 0.3,
            start_jitter: 0.05,
        }
    }
}

/// Quadrant index: bit 0 set = right half, bit 1 set = back half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadrant(pub u8);

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant(0), Quadrant(1), Quadrant(2), Quadrant(3)];

    pub fn is_right(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn is_back(self) -> bool {
        self.0 & 2 == 2
    }

    pub fn center(self) -> (f32, f32) {
        (
            if self.is_right() { 0.75 } else { 0.25 },
            if self.is_back() { 0.75 } else { 0.25 },
        )
    }

    pub fn contains(self, x: f32, y: f32) -> bool {
        (x >= 0.5) == self.is_right() && (y >= 0.5) == self.is_back()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerColor {
    Green,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub quadrant: Quadrant,
    pub color: ContainerColor,
}

impl Container {
    pub fn center(&self) -> (f32, f32) {
        self.quadrant.center()
    }

    pub fn covers(&self, x: f32, y: f32) -> bool {
        let (cx, cy) = self.center();
        (x - cx).abs() <= BIN_HALF && (y - cy).abs() <= BIN_HALF
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_row: usize,
    pub pos: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityScheme {
    /// Exactly one object satisfies the identifier.
    #[default]
    #[serde(rename = "i")]
    Unique,
    /// Two identical satisfying objects on opposite sides; the side shown
    /// in the demonstration picks the target.
    #[serde(rename = "ii")]
    IdenticalPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraySide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResetOptions {
    pub scheme: AmbiguityScheme,
    /// Scheme ii only: the side the target instance must be on. Sampled
    /// from the seed when absent.
    pub target_side: Option<TraySide>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub eef_pos: [f32; 3],
    pub gripper_closed: bool,
    pub objects: [SceneObject; 3],
    pub attached_object: Option<usize>,
    /// `containers[0]` is green, `containers[1]` is red.
    pub containers: [Container; 2],
    /// For each object, the container index it was released into.
    pub placed: [Option<usize>; 3],
    pub t: usize,
    pub horizon: usize,
    pub rng_seed: u64,
    pub task_id: usize,
    pub target_object: usize,
    pub target_container: usize,
    pub first_grasped: Option<usize>,
}

impl SceneState {
    pub fn done(&self) -> bool {
        self.t >= self.horizon
    }

    pub fn target_pos(&self) -> [f32; 3] {
        self.objects[self.target_object].pos
    }

    /// Which x-side of the tray an object is on.
    pub fn side_of(&self, object: usize) -> TraySide {
        if self.objects[object].pos[0] < 0.5 {
            TraySide::Left
        } else {
            TraySide::Right
        }
    }

    /// Unordered container quadrant pair, as a sorted tuple.
    pub fn container_layout(&self) -> (Quadrant, Quadrant) {
        let (a, b) = (self.containers[0].quadrant, self.containers[1].quadrant);
        (a.min(b), a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rgb: Vec<u8>,
    pub proprio: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f32; 3],
    pub gripper: f32,
}

impl Action {
    pub const ZERO: Action = Action {
        delta: [0.0; 3],
        gripper: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub first_grasped: Option<usize>,
    pub final_state: SceneState,
}

/// Resolve which container a container identifier refers to, if exactly one.
pub fn resolve_container(id: ContainerId, containers: &[Container; 2]) -> Option<usize> {
    let pick = |pred: &dyn Fn(&Container) -> bool| {
        let hits: Vec<usize> = (0..2).filter(|&i| pred(&containers[i])).collect();
        (hits.len() == 1).then(|| hits[0])
    };
    match id {
        ContainerId::Green => pick(&|c| c.color == ContainerColor::Green),
        ContainerId::Red => pick(&|c| c.color == ContainerColor::Red),
        ContainerId::Front => pick(&|c| !c.quadrant.is_back()),
        ContainerId::Back => pick(&|c| c.quadrant.is_back()),
        ContainerId::Left => pick(&|c| !c.quadrant.is_right()),
        ContainerId::Right => pick(&|c| c.quadrant.is_right()),
    }
}

/// All six unordered quadrant pairs.
pub fn quadrant_pairs() -> Vec<(Quadrant, Quadrant)> {
    let mut out = Vec::with_capacity(6);
    for i in 0..4u8 {
        for j in i + 1..4 {
            out.push((Quadrant(i), Quadrant(j)));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TabletopEnv {
    pub cfg: EnvConfig,
}

impl TabletopEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        Self { cfg }
    }

    pub fn reset(
        &self,
        task: &TaskSpec,
        seed: u64,
        opts: ResetOptions,
    ) -> Result<(SceneState, Observation)> {
        let mut rng = seeds::rng_for(seed, &[task.task_id as u64]);
        let table = objects();

        let satisfying: Vec<usize> = table
            .iter()
            .filter(|o| o.satisfies(task))
            .map(|o| o.object_row)
            .collect();
        let others: Vec<usize> = table
            .iter()
            .filter(|o| !o.satisfies(task))
            .map(|o| o.object_row)
            .collect();
        if satisfying.is_empty() {
            return Err(Error::Unsatisfiable(task.object_identifier.clone()));
        }
        if others.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "too few distractors for identifier {:?}",
                task.object_identifier
            )));
        }

        // Container layout: uniform over the six quadrant pairs, restricted
        // to pairs where the container identifier names exactly one bin
        // (and, for scheme ii, pairs leaving one object quadrant per side).
        let pairs = quadrant_pairs();
        let (containers, target_container) = loop {
            let &(qa, qb) = pairs.choose(&mut rng).expect("six pairs");
            let mut quads = [qa, qb];
            quads.shuffle(&mut rng);
            let containers = [
                Container {
                    quadrant: quads[0],
                    color: ContainerColor::Green,
                },
                Container {
                    quadrant: quads[1],
                    color: ContainerColor::Red,
                },
            ];
            if opts.scheme == AmbiguityScheme::IdenticalPair && qa.is_right() == qb.is_right() {
                continue;
            }
            if let Some(t) = resolve_container(task.container_identifier, &containers) {
                break (containers, t);
            }
        };
        let free: Vec<Quadrant> = Quadrant::ALL
            .into_iter()
            .filter(|q| *q != containers[0].quadrant && *q != containers[1].quadrant)
            .collect();

        let target_row = *satisfying.choose(&mut rng).expect("non-empty");
        let (rows, quads, target_object): ([usize; 3], [Option<Quadrant>; 3], usize) =
            match opts.scheme {
                AmbiguityScheme::Unique => {
                    let picked: Vec<usize> = others.choose_multiple(&mut rng, 2).copied().collect();
                    let mut rows = [target_row, picked[0], picked[1]];
                    rows.shuffle(&mut rng);
                    let target = rows.iter().position(|&r| r == target_row).expect("present");
                    (rows, [None; 3], target)
                }
                AmbiguityScheme::IdenticalPair => {
                    let distractor = *others.choose(&mut rng).expect("non-empty");
                    let side = opts.target_side.unwrap_or(if rng.random_bool(0.5) {
                        TraySide::Left
                    } else {
                        TraySide::Right
                    });
                    let (left_q, right_q) = if free[0].is_right() {
                        (free[1], free[0])
                    } else {
                        (free[0], free[1])
                    };
                    let rows = [target_row, target_row, distractor];
                    let quads = [Some(left_q), Some(right_q), None];
                    let target = if side == TraySide::Left { 0 } else { 1 };
                    (rows, quads, target)
                }
            };

        let mut placed_pos: Vec<[f32; 3]> = Vec::with_capacity(3);
        for q in quads {
            let pos = loop {
                let quad = q.unwrap_or_else(|| *free.choose(&mut rng).expect("two free quadrants"));
                let (cx, cy) = quad.center();
                let span = 0.25 - OBJECT_MARGIN;
                let x = cx + rng.random_range(-span..span);
                let y = cy + rng.random_range(-span..span);
                let clear = placed_pos.iter().all(|p| {
                    let (dx, dy) = (p[0] - x, p[1] - y);
                    (dx * dx + dy * dy).sqrt() >= MIN_OBJECT_SEPARATION
                });
                if clear {
                    break [x, y, 0.0];
                }
            };
            placed_pos.push(pos);
        }
        let objects_arr = [0, 1, 2].map(|i| SceneObject {
            object_row: rows[i],
            pos: placed_pos[i],
        });

        let j = self.cfg.start_jitter;
        let eef_pos = [
            0.5 + rng.random_range(-j..=j),
            0.5 + rng.random_range(-j..=j),
            self.cfg.start_height,
        ];
        let state = SceneState {
            eef_pos,
            gripper_closed: false,
            objects: objects_arr,
            attached_object: None,
            containers,
            placed: [None; 3],
            t: 0,
            horizon: self.cfg.horizon,
            rng_seed: seed,
            task_id: task.task_id,
            target_object,
            target_container,
            first_grasped: None,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    pub fn observe(&self, state: &SceneState) -> Observation {
        let mut proprio = vec![0.0f32; self.cfg.proprio_dim.max(4)];
        proprio[..3].copy_from_slice(&state.eef_pos);
        proprio[3] = if state.gripper_closed { 1.0 } else { 0.0 };
        Observation {
            rgb: render::render(state),
            proprio,
        }
    }

    /// Advance one timestep. Returns the new observation and whether the
    /// episode has reached its horizon.
    pub fn step(&self, state: &mut SceneState, action: &Action) -> Result<(Observation, bool)> {
        if state.done() {
            return Err(Error::EpisodeDone(state.t));
        }
        let m = self.cfg.max_step;
        let upper = [1.0, 1.0, Z_MAX];
        for d in 0..3 {
            let delta = if action.delta[d].is_finite() {
                action.delta[d].clamp(-m, m)
            } else {
                0.0
            };
            state.eef_pos[d] = (state.eef_pos[d] + delta).clamp(0.0, upper[d]);
        }
        if let Some(i) = state.attached_object {
            state.objects[i].pos = state.eef_pos;
        }

        let close = action.gripper >= self.cfg.gripper_threshold;
        if close && state.attached_object.is_none() {
            self.try_grasp(state);
        } else if !close {
            if let Some(i) = state.attached_object.take() {
                let [x, y, _] = state.eef_pos;
                state.objects[i].pos = [x, y, 0.0];
                state.placed[i] = state.containers.iter().position(|c| c.covers(x, y));
            }
        }
        state.gripper_closed = close;
        state.t += 1;
        Ok((self.observe(state), state.done()))
    }

    fn try_grasp(&self, state: &mut SceneState) {
        let [ex, ey, ez] = state.eef_pos;
        if ez > self.cfg.grasp_height {
            return;
        }
        let nearest = (0..3)
            .map(|i| {
                let p = state.objects[i].pos;
                (i, ((p[0] - ex).powi(2) + (p[1] - ey).powi(2)).sqrt())
            })
            .filter(|&(_, d)| d <= self.cfg.dist_thresh)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            state.attached_object = Some(i);
            state.placed[i] = None;
            state.objects[i].pos = state.eef_pos;
            state
                .first_grasped
                .get_or_insert(state.objects[i].object_row);
        }
    }
}

/// True iff the target object rests in the target container.
pub fn check_success(state: &SceneState, task: &TaskSpec) -> bool {
    if state.task_id != task.task_id {
        return false;
    }
    let target = state.target_object;
    if !objects()[state.objects[target].object_row].satisfies(task) {
        return false;
    }
    state.attached_object != Some(target) && state.placed[target] == Some(state.target_container)
}

pub fn episode_result(state: SceneState, task: &TaskSpec) -> EpisodeResult {
    EpisodeResult {
        success: check_success(&state, task),
        first_grasped: state.first_grasped,
        final_state: state,
    }
}
