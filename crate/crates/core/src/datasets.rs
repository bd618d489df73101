//! Trajectory storage, the binary buffer format, demo frame arrays and
//! batch sampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::render::{IMG, OBS_BYTES};
use crate::simenv::TraySide;
use crate::taskspace;

pub const TRAJ_LEN: usize = 30;
pub const PROPRIO_DIM: usize = 4;
pub const BUFFER_MAGIC: [u8; 4] = *b"DLTC";
pub const BUFFER_VERSION: u32 = 1;
const RECORD_BYTES: usize = OBS_BYTES + 4 * PROPRIO_DIM + 4 * 4;

/// One fixed-length expert episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    /// `TRAJ_LEN` observations, each 48×48×3, concatenated.
    pub frames: Vec<u8>,
    pub proprio: Vec<[f32; PROPRIO_DIM]>,
    /// Executed xyz displacement per step.
    pub actions: Vec<[f32; 3]>,
    /// Gripper command per step (1 = closed).
    pub grippers: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.proprio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proprio.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t * OBS_BYTES..(t + 1) * OBS_BYTES]
    }

    pub fn is_finite(&self) -> bool {
        self.proprio
            .iter()
            .flatten()
            .chain(self.actions.iter().flatten())
            .chain(&self.grippers)
            .all(|v| v.is_finite())
    }

    /// Tray side of the first grasp, read from the proprio stream.
    pub fn grasp_side(&self) -> Option<TraySide> {
        (0..self.len()).find(|&t| self.grippers[t] >= 0.5).map(|t| {
            if self.proprio[t][0] + self.actions[t][0] < 0.5 {
                TraySide::Left
            } else {
                TraySide::Right
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskBucket {
    pub instruction: String,
    pub trajectories: Vec<Trajectory>,
}

/// Trajectories grouped by task id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Buffer {
    pub tasks: BTreeMap<usize, TaskBucket>,
}

impl Buffer {
    pub fn num_trajectories(&self) -> usize {
        self.tasks.values().map(|b| b.trajectories.len()).sum()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.keys().copied().collect()
    }

    pub fn insert(&mut self, task_id: usize, instruction: String, trajectories: Vec<Trajectory>) {
        let bucket = self.tasks.entry(task_id).or_default();
        bucket.instruction = instruction;
        bucket.trajectories.extend(trajectories);
    }
}

/// One demonstration and instruction per held-out task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValSet {
    buffer: Buffer,
}

impl ValSet {
    pub fn from_buffer(buffer: Buffer) -> Result<Self> {
        for (id, b) in &buffer.tasks {
            if b.trajectories.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "validation task {id} holds {} demos, expected 1",
                    b.trajectories.len()
                )));
            }
        }
        Ok(Self { buffer })
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.buffer.task_ids()
    }

    pub fn entry(&self, task_id: usize) -> Option<(&Trajectory, &str)> {
        self.buffer
            .tasks
            .get(&task_id)
            .map(|b| (&b.trajectories[0], b.instruction.as_str()))
    }

    pub fn as_buffer(&self) -> &Buffer {
        &self.buffer
    }

    pub fn len(&self) -> usize {
        self.buffer.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.tasks.is_empty()
    }

    /// Copy with instructions permuted across tasks (demos untouched).
    pub fn with_instructions_rotated(&self, by: usize) -> Self {
        let ids = self.task_ids();
        let texts: Vec<String> = ids
            .iter()
            .map(|i| self.buffer.tasks[i].instruction.clone())
            .collect();
        let mut out = self.clone();
        for (j, id) in ids.iter().enumerate() {
            out.buffer.tasks.get_mut(id).expect("present").instruction =
                texts[(j + by) % texts.len()].clone();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Binary format

fn checksum(records: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(records);
    h.finalize()
}

fn encode_trajectory(traj: &Trajectory, out: &mut Vec<u8>) {
    let start = out.len();
    for t in 0..TRAJ_LEN {
        out.extend_from_slice(traj.frame(t));
        for v in traj.proprio[t] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in traj.actions[t]
            .iter()
            .chain(std::iter::once(&traj.grippers[t]))
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = checksum(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn write_buffer(buffer: &Buffer, mut w: impl Write) -> Result<()> {
    for (id, b) in &buffer.tasks {
        for tr in &b.trajectories {
            if tr.len() != TRAJ_LEN || tr.task_id != *id {
                return Err(Error::InvalidArgument(format!(
                    "task {id}: malformed trajectory"
                )));
            }
        }
        if b.instruction.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "task {id}: instruction too long"
            )));
        }
    }
    w.write_all(&BUFFER_MAGIC)?;
    w.write_all(&BUFFER_VERSION.to_le_bytes())?;
    w.write_all(&(buffer.tasks.len() as u32).to_le_bytes())?;
    let mut scratch = Vec::with_capacity(TRAJ_LEN * RECORD_BYTES + 4);
    for (id, b) in &buffer.tasks {
        w.write_all(&(*id as u16).to_le_bytes())?;
        w.write_all(&(b.instruction.len() as u16).to_le_bytes())?;
        w.write_all(b.instruction.as_bytes())?;
        w.write_all(&(b.trajectories.len() as u32).to_le_bytes())?;
        for tr in &b.trajectories {
            scratch.clear();
            encode_trajectory(tr, &mut scratch);
            w.write_all(&scratch)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Cursor<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated {
                path: self.path.to_path_buf(),
            },
            _ => Error::Io(e),
        })
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

fn f32_at(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

/// Decode a buffer stream. `path` is only used in error messages.
pub fn read_buffer(r: impl Read, path: &Path) -> Result<Buffer> {
    let mut cur = Cursor { inner: r, path };
    let mut magic = [0u8; 4];
    cur.fill(&mut magic)?;
    if magic != BUFFER_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: BUFFER_MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != BUFFER_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let n_tasks = cur.u32()?;
    let mut buffer = Buffer::default();
    let mut records = vec![0u8; TRAJ_LEN * RECORD_BYTES];
    for _ in 0..n_tasks {
        let task_id = cur.u16()? as usize;
        let len = cur.u16()? as usize;
        let mut text = vec![0u8; len];
        cur.fill(&mut text)?;
        let instruction = String::from_utf8(text).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("task {task_id}: instruction is not UTF-8"),
        })?;
        let n_traj = cur.u32()? as usize;
        let mut trajectories = Vec::with_capacity(n_traj.min(1 << 16));
        for index in 0..n_traj {
            cur.fill(&mut records)?;
            let crc = cur.u32()?;
            if crc != checksum(&records) {
                return Err(Error::Checksum {
                    path: path.to_path_buf(),
                    task_id,
                    index,
                });
            }
            let mut tr = Trajectory {
                task_id,
                frames: Vec::with_capacity(TRAJ_LEN * OBS_BYTES),
                proprio: Vec::with_capacity(TRAJ_LEN),
                actions: Vec::with_capacity(TRAJ_LEN),
                grippers: Vec::with_capacity(TRAJ_LEN),
            };
            for rec in records.chunks_exact(RECORD_BYTES) {
                tr.frames.extend_from_slice(&rec[..OBS_BYTES]);
                let p = OBS_BYTES;
                tr.proprio
                    .push([0, 1, 2, 3].map(|i| f32_at(rec, p + 4 * i)));
                let a = p + 4 * PROPRIO_DIM;
                tr.actions.push([0, 1, 2].map(|i| f32_at(rec, a + 4 * i)));
                tr.grippers.push(f32_at(rec, a + 12));
            }
            trajectories.push(tr);
        }
        if buffer.tasks.contains_key(&task_id) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("duplicate task {task_id}"),
            });
        }
        buffer.tasks.insert(
            task_id,
            TaskBucket {
                instruction,
                trajectories,
            },
        );
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing)? != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: "trailing bytes".into(),
        });
    }
    Ok(buffer)
}

pub fn save_buffer(buffer: &Buffer, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_buffer(buffer, BufWriter::new(file))
}

/// Load a buffer and re-verify every stored trajectory.
pub fn load_buffer(path: &Path) -> Result<Buffer> {
    let file = File::open(path)?;
    let buffer = read_buffer(BufReader::new(file), path)?;
    for (id, b) in &buffer.tasks {
        let task = taskspace::task(*id)?;
        for (index, tr) in b.trajectories.iter().enumerate() {
            if tr.len() != TRAJ_LEN
                || !tr.is_finite()
                || !crate::verify::verify_trajectory(tr, &task)
            {
                return Err(Error::UnsuccessfulTrajectory {
                    task_id: *id,
                    index,
                });
            }
        }
    }
    Ok(buffer)
}

pub fn save_val_set(val: &ValSet, path: &Path) -> Result<()> {
    save_buffer(val.as_buffer(), path)
}

pub fn load_val_set(path: &Path) -> Result<ValSet> {
    ValSet::from_buffer(load_buffer(path)?)
}

// ---------------------------------------------------------------------------
// Demonstration frame arrays

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrameArray {
    pub grid: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width × 3`.
    pub image: Vec<u8>,
    pub source_indices: Vec<usize>,
}

/// Tile `m·n` frames (always including the first and last) in raster order.
pub fn make_demo_array(
    traj: &Trajectory,
    m: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<DemoFrameArray> {
    let cells = m * n;
    let len = traj.len();
    if cells < 2 {
        return Err(Error::InvalidArgument(format!(
            "demo grid {m}x{n} needs at least 2 cells"
        )));
    }
    if cells > len {
        return Err(Error::InvalidArgument(format!(
            "demo grid {m}x{n} exceeds trajectory length {len}"
        )));
    }
    let mut indices: Vec<usize> = index::sample(rng, len - 2, cells - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    indices.push(0);
    indices.push(len - 1);
    indices.sort_unstable();

    let (height, width) = (m * IMG, n * IMG);
    let mut image = vec![0u8; height * width * 3];
    for (k, &t) in indices.iter().enumerate() {
        let (gr, gc) = (k / n, k % n);
        let frame = traj.frame(t);
        for r in 0..IMG {
            let dst = ((gr * IMG + r) * width + gc * IMG) * 3;
            image[dst..dst + IMG * 3].copy_from_slice(&frame[r * IMG * 3..(r + 1) * IMG * 3]);
        }
    }
    Ok(DemoFrameArray {
        grid: (m, n),
        height,
        width,
        image,
        source_indices: indices,
    })
}

/// Pad by `pad` (edge replicate) and take a random crop of the original size.
pub fn random_crop(
    image: &[u8],
    height: usize,
    width: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Vec<u8> {
    if pad == 0 {
        return image.to_vec();
    }
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0u8; image.len()];
    for r in 0..height {
        let sr = (r as isize + dy).clamp(0, height as isize - 1) as usize;
        for c in 0..width {
            let sc = (c as isize + dx).clamp(0, width as isize - 1) as usize;
            let (d, s) = ((r * width + c) * 3, (sr * width + sc) * 3);
            out[d..d + 3].copy_from_slice(&image[s..s + 3]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Batch sampling

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub tasks_per_batch: usize,
    pub samples_per_task: usize,
    pub upsample_color_shape: bool,
    pub demo_grid: (usize, usize),
    /// Random-crop padding; 0 disables augmentation.
    pub crop_pad: usize,
}

/// `k` tasks × `b` transitions, plus one conditioning demo per task.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tasks: Vec<usize>,
    pub per_task: usize,
    /// `k·b` observations, each 48×48×3.
    pub obs: Vec<u8>,
    pub proprio: Vec<[f32; PROPRIO_DIM]>,
    pub actions: Vec<[f32; 3]>,
    pub grippers: Vec<f32>,
    pub demos: Vec<DemoFrameArray>,
    pub instructions: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.proprio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proprio.is_empty()
    }
}

/// Choose `k` distinct tasks. With `upsample`, the number of color/shape
/// tasks is Binomial(k, 1/2) (capped by pool sizes).
pub fn choose_tasks(
    ids: &[usize],
    k: usize,
    upsample: bool,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot choose {k} of {} tasks",
            ids.len()
        )));
    }
    if !upsample {
        return Ok(ids.choose_multiple(rng, k).copied().collect());
    }
    let (cs, names): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&id| {
        taskspace::task(id)
            .map(|t| t.is_color_or_shape())
            .unwrap_or(false)
    });
    let mut n_cs = (0..k).filter(|_| rng.random_bool(0.5)).count();
    n_cs = n_cs.min(cs.len()).max(k.saturating_sub(names.len()));
    let mut out: Vec<usize> = cs.choose_multiple(rng, n_cs).copied().collect();
    out.extend(names.choose_multiple(rng, k - n_cs).copied());
    Ok(out)
}

pub fn sample_task_batch(buffer: &Buffer, cfg: &SampleConfig, rng: &mut impl Rng) -> Result<Batch> {
    let ids = buffer.task_ids();
    let (k, b) = (cfg.tasks_per_batch, cfg.samples_per_task);
    let tasks = choose_tasks(&ids, k, cfg.upsample_color_shape, rng)?;
    let mut batch = Batch {
        tasks: tasks.clone(),
        per_task: b,
        obs: Vec::with_capacity(k * b * OBS_BYTES),
        proprio: Vec::with_capacity(k * b),
        actions: Vec::with_capacity(k * b),
        grippers: Vec::with_capacity(k * b),
        demos: Vec::with_capacity(k),
        instructions: Vec::with_capacity(k),
    };
    for &id in &tasks {
        let bucket = &buffer.tasks[&id];
        let trajs = &bucket.trajectories;
        if trajs.is_empty() {
            return Err(Error::EmptyBucket(id));
        }
        let pairs = trajs.len() * TRAJ_LEN;
        for _ in 0..b {
            let flat = rng.random_range(0..pairs);
            let (tr, t) = (&trajs[flat / TRAJ_LEN], flat % TRAJ_LEN);
            batch
                .obs
                .extend(random_crop(tr.frame(t), IMG, IMG, cfg.crop_pad, rng));
            batch.proprio.push(tr.proprio[t]);
            batch.actions.push(tr.actions[t]);
            batch.grippers.push(tr.grippers[t]);
        }
        let demo_src = trajs.choose(rng).expect("non-empty");
        let mut demo = make_demo_array(demo_src, cfg.demo_grid.0, cfg.demo_grid.1, rng)?;
        demo.image = random_crop(&demo.image, demo.height, demo.width, cfg.crop_pad, rng);
        batch.demos.push(demo);
        batch.instructions.push(bucket.instruction.clone());
    }
    Ok(batch)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A synthetic trajectory whose frame `t` is filled with byte `t`.
    pub fn numbered_trajectory(task_id: usize) -> Trajectory {
        let mut frames = Vec::with_capacity(TRAJ_LEN * OBS_BYTES);
        for t in 0..TRAJ_LEN {
            frames.extend(std::iter::repeat_n(t as u8, OBS_BYTES));
        }
        Trajectory {
            task_id,
            frames,
            proprio: (0..TRAJ_LEN)
                .map(|t| [t as f32 / 30.0, 0.5, 0.1, 0.0])
                .collect(),
            actions: (0..TRAJ_LEN)
                .map(|t| [0.01 * t as f32, -0.02, 0.0])
                .collect(),
            grippers: (0..TRAJ_LEN)
                .map(|t| if t > 10 { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::numbered_trajectory;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic_buffer(ids: &[usize], per_task: usize) -> Buffer {
        let mut buf = Buffer::default();
        for &id in ids {
            let text = taskspace::instruction(id).unwrap().text;
            buf.insert(
                id,
                text,
                (0..per_task).map(|_| numbered_trajectory(id)).collect(),
            );
        }
        buf
    }

    #[test]
    fn demo_array_first_and_last() {
        let tr = numbered_trajectory(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = make_demo_array(&tr, 1, 2, &mut rng).unwrap();
        assert_eq!(d.source_indices, vec![0, 29]);
        assert_eq!((d.height, d.width), (48, 96));
        assert_eq!(d.image.len(), 48 * 96 * 3);
        assert_eq!(d.image[0], 0);
        assert_eq!(d.image[(96 - 1) * 3], 29);

        let d = make_demo_array(&tr, 2, 2, &mut rng).unwrap();
        assert_eq!((d.height, d.width), (96, 96));
        let s = &d.source_indices;
        assert!(s[0] == 0 && 0 < s[1] && s[1] < s[2] && s[2] < 29 && s[3] == 29);
        // raster order: bottom-left cell holds the third frame
        assert_eq!(d.image[(48 * 96) * 3], s[2] as u8);
    }

    #[test]
    fn demo_array_is_seed_deterministic() {
        let tr = numbered_trajectory(0);
        let a = make_demo_array(&tr, 3, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_demo_array(&tr, 3, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
    }

    #[test]
    fn demo_array_errors() {
        let tr = numbered_trajectory(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_demo_array(&tr, 1, 1, &mut rng).is_err());
        assert!(make_demo_array(&tr, 4, 8, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn demo_array_invariants(m in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
            prop_assume!(m * n >= 2 && m * n <= 30);
            let tr = numbered_trajectory(0);
            let d = make_demo_array(&tr, m, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let s = &d.source_indices;
            prop_assert_eq!(s.len(), m * n);
            prop_assert_eq!(s[0], 0);
            prop_assert_eq!(*s.last().unwrap(), 29);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            for (k, &t) in s.iter().enumerate() {
                let (gr, gc) = (k / n, k % n);
                let px = ((gr * 48) * d.width + gc * 48) * 3;
                prop_assert_eq!(d.image[px], t as u8);
            }
        }
    }

    #[test]
    fn batch_shapes() {
        let ids: Vec<usize> = (0..20).collect();
        let buf = synthetic_buffer(&ids, 2);
        let cfg = SampleConfig {
            tasks_per_batch: 16,
            samples_per_task: 64,
            upsample_color_shape: false,
            demo_grid: (1, 2),
            crop_pad: 4,
        };
        let b = sample_task_batch(&buf, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 1024);
        assert_eq!(b.obs.len(), 1024 * OBS_BYTES);
        assert_eq!(b.demos.len(), 16);
        let mut t = b.tasks.clone();
        t.sort();
        t.dedup();
        assert_eq!(t.len(), 16);
    }

    #[test]
    fn all_tasks_once_when_k_is_everything() {
        let ids: Vec<usize> = (0..10).collect();
        let buf = synthetic_buffer(&ids, 1);
        let cfg = SampleConfig {
            tasks_per_batch: 10,
            samples_per_task: 1,
            upsample_color_shape: false,
            demo_grid: (1, 2),
            crop_pad: 0,
        };
        let mut b = sample_task_batch(&buf, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.tasks.sort();
        assert_eq!(b.tasks, ids);
    }

    #[test]
    fn upsampling_balances_color_and_shape_tasks() {
        let ids: Vec<usize> = taskspace::split(taskspace::Scenario::B)
            .train_ids
            .into_iter()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut cs, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let chosen = choose_tasks(&ids, 16, true, &mut rng).unwrap();
            cs += chosen
                .iter()
                .filter(|&&i| taskspace::task(i).unwrap().is_color_or_shape())
                .count();
            total += chosen.len();
        }
        let frac = cs as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn empty_bucket_is_an_error() {
        let mut buf = synthetic_buffer(&[0, 1], 1);
        buf.tasks.get_mut(&1).unwrap().trajectories.clear();
        let cfg = SampleConfig {
            tasks_per_batch: 2,
            samples_per_task: 1,
            upsample_color_shape: false,
            demo_grid: (1, 2),
            crop_pad: 0,
        };
        assert!(matches!(
            sample_task_batch(&buf, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyBucket(1))
        ));
    }

    #[test]
    fn buffer_round_trip_and_corruption() {
        let buf = synthetic_buffer(&[3, 7], 2);
        let mut bytes = Vec::new();
        write_buffer(&buf, &mut bytes).unwrap();
        let p = Path::new("mem");
        assert_eq!(read_buffer(bytes.as_slice(), p).unwrap(), buf);

        let mut corrupt = bytes.clone();
        corrupt[200] ^= 0xFF;
        assert!(matches!(
            read_buffer(corrupt.as_slice(), p),
            Err(Error::Checksum { .. })
        ));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            read_buffer(truncated, p),
            Err(Error::Truncated { .. })
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_buffer(bad_magic.as_slice(), p),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            read_buffer(bad_version.as_slice(), p),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn empty_buffer_file() {
        let mut bytes = Vec::new();
        write_buffer(&Buffer::default(), &mut bytes).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(
            read_buffer(bytes.as_slice(), Path::new("mem")).unwrap(),
            Buffer::default()
        );
    }

    #[test]
    fn rotated_instructions_keep_demos() {
        let v = ValSet::from_buffer(synthetic_buffer(&[1, 2, 3], 1)).unwrap();
        let r = v.with_instructions_rotated(1);
        assert_eq!(r.entry(1).unwrap().0, v.entry(1).unwrap().0);
        assert_eq!(r.entry(1).unwrap().1, v.entry(2).unwrap().1);
        assert!(ValSet::from_buffer(synthetic_buffer(&[1], 2)).is_err());
    }
}
