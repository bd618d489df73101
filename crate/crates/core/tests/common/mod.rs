#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasklab::encoders::{DemoEncoderDims, EMBED_DIM, NUM_TASK_SLOTS};
use tasklab::policy::{Arch, ConditioningMode, ModelConfig, PolicyDims};
use tasklab::render::IMG;
use tasklab::trainer::LossInputs;

/// 8×8 observations, 8×16 demo grids, 6-dim embeddings.
pub fn tiny_model(mode: ConditioningMode, arch: Arch) -> ModelConfig {
    let policy = PolicyDims {
        obs_size: 8,
        stem_kernel: 7,
        stem_channels: 3,
        stage_channels: vec![3, 4],
        trunk: vec![8],
        embed_dim: 6,
        proprio_dim: 4,
        num_task_slots: 5,
        temperature: 1.0,
    };
    let demo = mode.uses_demo().then(|| DemoEncoderDims {
        height: 8,
        width: 16,
        kernel: 3,
        channels: vec![2, 2],
        pools: vec![2, 1],
        fc: vec![8],
        out_dim: 6,
    });
    ModelConfig {
        mode,
        arch,
        policy,
        demo,
    }
}

/// Full-resolution inputs with narrow layers, for pipeline tests.
pub fn small_model(mode: ConditioningMode, arch: Arch) -> ModelConfig {
    let policy = PolicyDims {
        obs_size: IMG,
        stem_kernel: 7,
        stem_channels: 4,
        stage_channels: vec![4, 8],
        trunk: vec![16],
        embed_dim: EMBED_DIM,
        proprio_dim: 4,
        num_task_slots: NUM_TASK_SLOTS,
        temperature: 1.0,
    };
    let demo = mode.uses_demo().then(|| DemoEncoderDims {
        height: IMG,
        width: 2 * IMG,
        kernel: 3,
        channels: vec![4, 4, 4],
        pools: vec![2, 2, 1],
        fc: vec![16],
        out_dim: EMBED_DIM,
    });
    ModelConfig {
        mode,
        arch,
        policy,
        demo,
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor {
    let t = uniform(rng, &[k, d], -1.0, 1.0);
    let norm = t.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap();
    t.broadcast_div(&norm).unwrap()
}

/// Random f64 inputs for a model built by [`tiny_model`]: `tasks` tasks with
/// `per_task` transitions each.
pub fn tiny_inputs(cfg: &ModelConfig, tasks: usize, per_task: usize, seed: u64) -> LossInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tasks * per_task;
    let s = cfg.policy.obs_size;
    let e = cfg.policy.embed_dim;
    let grippers: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let rows: Vec<u32> = (0..n).map(|i| (i / per_task) as u32).collect();
    let slots = cfg.policy.num_task_slots;
    let one_hot = Tensor::eye(slots, DType::F64, &Device::Cpu)
        .unwrap()
        .narrow(0, 0, tasks)
        .unwrap();
    LossInputs {
        obs: uniform(&mut rng, &[n, s, s, 3], 0.0, 1.0),
        proprio: uniform(&mut rng, &[n, 4], -0.5, 0.5),
        actions: uniform(&mut rng, &[n, 3], -0.05, 0.05),
        grippers: Tensor::from_vec(grippers, (n, 1), &Device::Cpu).unwrap(),
        rows: Tensor::from_vec(rows, n, &Device::Cpu).unwrap(),
        demo_images: cfg
            .demo
            .as_ref()
            .map(|d| uniform(&mut rng, &[tasks, d.height, d.width, 3], 0.0, 1.0)),
        z_lang: Some(unit_rows(&mut rng, tasks, e)),
        one_hot: Some(one_hot),
    }
}
