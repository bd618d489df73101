//! FiLM-conditioned visuomotor policy and its losses.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{DemoEncoder, DemoEncoderDims, EMBED_DIM, NUM_TASK_SLOTS};
use crate::nn::{self, Conv, Linear, ParamStore};
use crate::ops;
use crate::render::IMG;
use crate::simenv::Action;
use crate::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    OneHot,
    LanguageOnly,
    DemoOnly,
    Deltaco,
    Bcz,
    Mcil,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 6] = [
        Self::OneHot,
        Self::LanguageOnly,
        Self::DemoOnly,
        Self::Deltaco,
        Self::Bcz,
        Self::Mcil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::OneHot => "one_hot",
            Self::LanguageOnly => "language_only",
            Self::DemoOnly => "demo_only",
            Self::Deltaco => "deltaco",
            Self::Bcz => "bcz",
            Self::Mcil => "mcil",
        }
    }

    pub fn uses_demo(self) -> bool {
        matches!(
            self,
            Self::DemoOnly | Self::Deltaco | Self::Bcz | Self::Mcil
        )
    }

    pub fn uses_language(self) -> bool {
        matches!(
            self,
            Self::LanguageOnly | Self::Deltaco | Self::Bcz | Self::Mcil
        )
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conditioning mode {s:?}")))
    }
}

/// Where the two embeddings enter the network in the bimodal mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    FilmDemoConcatLang,
    FilmLangConcatDemo,
    FilmJoint,
    ConcatOnly,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Self::FilmDemoConcatLang,
        Self::FilmLangConcatDemo,
        Self::FilmJoint,
        Self::ConcatOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FilmDemoConcatLang => "film_demo_concat_lang",
            Self::FilmLangConcatDemo => "film_lang_concat_demo",
            Self::FilmJoint => "film_joint",
            Self::ConcatOnly => "concat_only",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyDims {
    pub obs_size: usize,
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub trunk: Vec<usize>,
    pub embed_dim: usize,
    pub proprio_dim: usize,
    pub num_task_slots: usize,
    pub temperature: f64,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            obs_size: IMG,
            stem_kernel: 7,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            trunk: vec![1024, 512, 256],
            embed_dim: EMBED_DIM,
            proprio_dim: 4,
            num_task_slots: NUM_TASK_SLOTS,
            temperature: 1.0,
        }
    }
}

/// Per-sample task inputs; rows align with the observation batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskInputs<'a> {
    pub z_demo: Option<&'a Tensor>,
    pub z_lang: Option<&'a Tensor>,
    pub one_hot: Option<&'a Tensor>,
}

/// Output heads for a batch: `mu` and `sigma` are `N × 3`, `gripper` is `N × 1`.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub gripper: Tensor,
}

/// One row of a [`PolicyOutput`] as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub mu: [f32; 3],
    pub sigma: [f32; 3],
    pub gripper: f32,
}

impl PolicyOutput {
    pub fn rows(&self) -> Result<Vec<ActionDistribution>> {
        let f =
            |t: &Tensor| -> Result<Vec<Vec<f32>>> { Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?) };
        let (mu, sigma, g) = (f(&self.mu)?, f(&self.sigma)?, f(&self.gripper)?);
        Ok((0..mu.len())
            .map(|i| ActionDistribution {
                mu: [mu[i][0], mu[i][1], mu[i][2]],
                sigma: [sigma[i][0], sigma[i][1], sigma[i][2]],
                gripper: g[i][0],
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Per-channel affine modulation `gamma[c]·x[c] + beta[c]` of an `N × H × W × C` map.
pub fn film(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, _, _, c) = features.dims4()?;
    for t in [gamma, beta] {
        if t.dims2()? != (n, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{c}"),
                got: format!("{:?}", t.dims()),
            });
        }
    }
    Ok(ops::film(features, gamma, beta)?)
}

/// Expected `(x, y)` image coordinates in [−1, 1] of each channel's softmax
/// over locations, interleaved as `x0, y0, x1, y1, …`.
pub fn spatial_softmax(features: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(ops::spatial_softmax(features, temperature)?)
}

/// Residual convolutional policy with FiLM conditioning and a Gaussian head.
#[derive(Debug, Clone)]
pub struct Policy {
    pub dims: PolicyDims,
    pub mode: ConditioningMode,
    pub arch: Arch,
    stem: Conv,
    stages: Vec<ResBlock>,
    film_gen: Vec<Linear>,
    one_hot_adapter: Option<Linear>,
    trunk: Vec<Linear>,
    mu_head: Linear,
    log_sigma: Var,
    gripper_head: Linear,
}

impl Policy {
    pub fn new(
        ps: &mut ParamStore,
        dims: PolicyDims,
        mode: ConditioningMode,
        arch: Arch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.stage_channels.is_empty()
            || dims.trunk.is_empty()
            || !dims.obs_size.is_multiple_of(2)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid policy dims {dims:?}"
            )));
        }
        let stem = Conv::new(
            ps,
            "pi.stem",
            3,
            dims.stem_channels,
            dims.stem_kernel,
            dims.stem_kernel / 2,
            rng,
        )?;
        let mut stages = Vec::new();
        let mut c_in = dims.stem_channels;
        for (i, &c) in dims.stage_channels.iter().enumerate() {
            let name = format!("pi.stage{i}");
            stages.push(ResBlock {
                conv1: Conv::new(ps, &format!("{name}.conv1"), c_in, c, 3, 1, rng)?,
                conv2: Conv::new(ps, &format!("{name}.conv2"), c, c, 3, 1, rng)?,
                proj: if c_in != c {
                    Some(Conv::new(ps, &format!("{name}.proj"), c_in, c, 1, 0, rng)?)
                } else {
                    None
                },
            });
            c_in = c;
        }
        let e = dims.embed_dim;
        let (film_dim, concat_dim) = match (mode, arch) {
            (ConditioningMode::Deltaco, Arch::FilmDemoConcatLang | Arch::FilmLangConcatDemo) => {
                (Some(e), e)
            }
            (ConditioningMode::Deltaco, Arch::FilmJoint) => (Some(2 * e), 0),
            (ConditioningMode::Deltaco, Arch::ConcatOnly) => (None, 2 * e),
            _ => (Some(e), 0),
        };
        let mut film_gen = Vec::new();
        if let Some(d) = film_dim {
            for (i, &c) in dims.stage_channels.iter().enumerate() {
                let name = format!("pi.film{i}");
                let bound = 1.0 / (d as f64).sqrt();
                let w = ps.uniform(&format!("{name}.w"), &[d, 2 * c], bound, rng)?;
                let mut bias = vec![1.0; c];
                bias.extend(std::iter::repeat_n(0.0, c));
                let b = ps.from_values(&format!("{name}.b"), bias, &[2 * c])?;
                film_gen.push(Linear { w, b });
            }
        }
        let one_hot_adapter = if mode == ConditioningMode::OneHot {
            Some(Linear::new(ps, "pi.one_hot", dims.num_task_slots, e, rng)?)
        } else {
            None
        };
        let mut trunk = Vec::new();
        let mut d = 2 * c_in + concat_dim + dims.proprio_dim;
        for (i, &h) in dims.trunk.iter().enumerate() {
            trunk.push(Linear::new(ps, &format!("pi.fc{i}"), d, h, rng)?);
            d = h;
        }
        let mu_head = Linear::new(ps, "pi.mu", d, 3, rng)?;
        let log_sigma = ps.constant("pi.log_sigma", &[3], 0.0)?;
        let gripper_head = Linear::new(ps, "pi.gripper", d, 1, rng)?;
        Ok(Self {
            dims,
            mode,
            arch,
            stem,
            stages,
            film_gen,
            one_hot_adapter,
            trunk,
            mu_head,
            log_sigma,
            gripper_head,
        })
    }

    fn require<'a>(
        &self,
        pass: ConditioningMode,
        t: Option<&'a Tensor>,
        what: &'static str,
    ) -> Result<&'a Tensor> {
        t.ok_or_else(|| Error::MissingEmbedding {
            mode: pass.to_string(),
            what,
        })
    }

    /// FiLM input and trunk-concatenated embedding for a forward pass in `pass` mode.
    pub fn conditioning(
        &self,
        pass: ConditioningMode,
        inp: &TaskInputs<'_>,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        use ConditioningMode as M;
        let demo = || self.require(pass, inp.z_demo, "demo");
        let lang = || self.require(pass, inp.z_lang, "language");
        Ok(match pass {
            M::OneHot => {
                let adapter = self.one_hot_adapter.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "policy trained as {} has no one-hot adapter",
                        self.mode
                    ))
                })?;
                (
                    Some(adapter.forward(self.require(pass, inp.one_hot, "one-hot")?)?),
                    None,
                )
            }
            M::LanguageOnly => (Some(lang()?.clone()), None),
            M::DemoOnly | M::Bcz => (Some(demo()?.clone()), None),
            M::Deltaco => match self.arch {
                Arch::FilmDemoConcatLang => (Some(demo()?.clone()), Some(lang()?.clone())),
                Arch::FilmLangConcatDemo => (Some(lang()?.clone()), Some(demo()?.clone())),
                Arch::FilmJoint => (Some(Tensor::cat(&[demo()?, lang()?], 1)?), None),
                Arch::ConcatOnly => (None, Some(Tensor::cat(&[demo()?, lang()?], 1)?)),
            },
            M::Mcil => {
                return Err(Error::InvalidArgument(
                    "mcil passes run as demo_only or language_only".into(),
                ));
            }
        })
    }

    /// Spatial-softmax keypoints of the backbone, FiLM-modulated when
    /// `film_input` is given.
    pub fn features(&self, obs: &Tensor, film_input: Option<&Tensor>) -> Result<Tensor> {
        let (n, h, w, c) = obs.dims4()?;
        let s = self.dims.obs_size;
        if (h, w, c) != (s, s, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("{s}x{s}x3"),
                got: format!("{h}x{w}x{c}"),
            });
        }
        let params = match film_input {
            Some(z) => {
                if z.dims2()?.0 != n {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{n} conditioning rows"),
                        got: format!("{:?}", z.dims()),
                    });
                }
                Some(
                    self.film_gen
                        .iter()
                        .map(|g| g.forward(z))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        let mut y = nn::max_pool(&self.stem.forward(obs)?.relu()?, 2)?;
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.forward(&y)?;
            if let Some(p) = &params {
                let ch = self.dims.stage_channels[i];
                y = film(&y, &p[i].narrow(1, 0, ch)?, &p[i].narrow(1, ch, ch)?)?;
            }
        }
        spatial_softmax(&y, self.dims.temperature)
    }

    /// Forward pass conditioned as `pass` (the training mode, or one of the
    /// unimodal modes for a multi-pass policy).
    pub fn forward(
        &self,
        obs: &Tensor,
        proprio: &Tensor,
        inp: &TaskInputs<'_>,
        pass: ConditioningMode,
    ) -> Result<PolicyOutput> {
        let (film_in, concat) = self.conditioning(pass, inp)?;
        if film_in.is_some() && self.film_gen.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "arch {} has no FiLM layers",
                self.arch
            )));
        }
        let keypoints = self.features(obs, film_in.as_ref())?;
        let mut parts = vec![keypoints];
        parts.extend(concat);
        parts.push(proprio.clone());
        let mut x = Tensor::cat(&parts, 1)?;
        let expected = self.trunk[0].in_dim();
        if x.dim(1)? != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("trunk input {expected}"),
                got: x.dim(1)?.to_string(),
            });
        }
        for fc in &self.trunk {
            x = fc.forward(&x)?.relu()?;
        }
        let n = x.dim(0)?;
        let mu = self.mu_head.forward(&x)?;
        let sigma = (self.log_sigma.as_tensor().exp()? + SIGMA_FLOOR)?
            .reshape((1, 3))?
            .broadcast_as((n, 3))?;
        let gripper = nn::sigmoid(&self.gripper_head.forward(&x)?)?;
        Ok(PolicyOutput { mu, sigma, gripper })
    }
}

/// Mean over the batch of `−log N(a; μ, σ²I) + alpha_g·(g − π_g)²`.
pub fn policy_loss(
    out: &PolicyOutput,
    actions: &Tensor,
    grippers: &Tensor,
    alpha_g: f64,
) -> Result<Tensor> {
    let z = (actions - &out.mu)?.div(&out.sigma)?;
    let nll = ((z.sqr()? * 0.5)? + out.sigma.log()?)?.sum(1)?;
    let nll = (nll + 1.5 * (2.0 * std::f64::consts::PI).ln())?;
    let grip = (grippers - &out.gripper)?.sqr()?.sum(1)?;
    Ok((nll + (grip * alpha_g)?)?.mean_all()?)
}

pub fn joint_loss(policy_loss: &Tensor, task_loss: &Tensor, alpha_d: f64) -> Result<Tensor> {
    Ok((policy_loss + (task_loss * alpha_d)?)?)
}

/// Turn one output row into an environment action.
pub fn act(dist: &ActionDistribution, rng: &mut impl Rng, deterministic: bool) -> Action {
    let delta = std::array::from_fn(|d| {
        if deterministic {
            dist.mu[d]
        } else {
            let eps: f32 = rng.sample(StandardNormal);
            dist.mu[d] + dist.sigma[d] * eps
        }
    });
    Action {
        delta,
        gripper: if dist.gripper >= 0.5 { 1.0 } else { 0.0 },
    }
}

// ---------------------------------------------------------------------------
// Agent: policy + demonstration encoder sharing one parameter store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    pub arch: Arch,
    pub policy: PolicyDims,
    pub demo: Option<DemoEncoderDims>,
}

impl ModelConfig {
    pub fn new(mode: ConditioningMode, arch: Arch, demo_grid: (usize, usize)) -> Self {
        let demo = mode
            .uses_demo()
            .then(|| DemoEncoderDims::for_grid(demo_grid.0, demo_grid.1));
        Self {
            mode,
            arch,
            policy: PolicyDims::default(),
            demo,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub policy: Policy,
    pub demo_encoder: Option<DemoEncoder>,
}

impl Agent {
    pub fn new(cfg: ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        if cfg.mode.uses_demo() != cfg.demo.is_some() {
            return Err(Error::InvalidArgument(format!(
                "mode {} and demo encoder presence disagree",
                cfg.mode
            )));
        }
        let mut params = ParamStore::new(dtype);
        let demo_encoder = match &cfg.demo {
            Some(d) => {
                if d.out_dim != cfg.policy.embed_dim {
                    return Err(Error::ShapeMismatch {
                        expected: format!("demo embedding {}", cfg.policy.embed_dim),
                        got: d.out_dim.to_string(),
                    });
                }
                Some(DemoEncoder::new(&mut params, d.clone(), rng)?)
            }
            None => None,
        };
        let policy = Policy::new(&mut params, cfg.policy.clone(), cfg.mode, cfg.arch, rng)?;
        Ok(Self {
            cfg,
            params,
            policy,
            demo_encoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn film_examples() {
        let x = Tensor::ones((1, 3, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let id = film(&x, &t2(&[&[1.0, 1.0]]), &t2(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(
            id.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0; 18]
        );
        let zero = film(&x, &t2(&[&[0.0, 0.0]]), &t2(&[&[0.5, -2.0]])).unwrap();
        let v = zero.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.chunks(2).all(|px| px == [0.5, -2.0]));
        let two = film(&x, &t2(&[&[2.0, 2.0]]), &t2(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(
            two.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![2.0; 18]
        );
        assert!(film(&x, &t2(&[&[1.0, 1.0, 1.0]]), &t2(&[&[0.0, 0.0, 0.0]])).is_err());
    }

    fn ss(values: Vec<f64>, h: usize, w: usize, temp: f64) -> Vec<f64> {
        let x = Tensor::from_vec(values, (1, h, w, 1), &Device::Cpu).unwrap();
        spatial_softmax(&x, temp)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
    }

    #[test]
    fn spatial_softmax_examples() {
        let mut v = vec![0.0; 25];
        v[12] = 50.0;
        let c = ss(v, 5, 5, 1.0);
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        let u = ss(vec![0.3; 20], 4, 5, 1.0);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
        let mut corner = vec![0.0; 16];
        corner[0] = 1.0;
        let k = ss(corner, 4, 4, 1e-3);
        assert!(
            (k[0] + 1.0).abs() < 1e-9 && (k[1] + 1.0).abs() < 1e-9,
            "{k:?}"
        );
        let x = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(spatial_softmax(&x, 0.0).is_err());
    }

    #[test]
    fn spatial_softmax_x_is_column() {
        let mut v = vec![0.0; 12];
        v[3] = 40.0;
        let k = ss(v, 3, 4, 1.0);
        assert!(
            (k[0] - 1.0).abs() < 1e-9 && (k[1] + 1.0).abs() < 1e-9,
            "{k:?}"
        );
    }

    fn out(mu: &[f64], sigma: &[f64], g: f64) -> PolicyOutput {
        PolicyOutput {
            mu: t2(&[mu]),
            sigma: t2(&[sigma]),
            gripper: t2(&[&[g]]),
        }
    }

    #[test]
    fn policy_loss_closed_form() {
        let a = t2(&[&[0.1, -0.2, 0.3]]);
        let g = t2(&[&[1.0]]);
        let base = 1.5 * (2.0 * std::f64::consts::PI).ln();
        let l = |o: &PolicyOutput, ag: f64| {
            policy_loss(o, &a, &g, ag)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let at_mean = out(&[0.1, -0.2, 0.3], &[1.0; 3], 1.0);
        assert!((l(&at_mean, 30.0) - base).abs() < 1e-12);
        let off = out(&[0.1, -0.2, 0.3], &[1.0; 3], 0.0);
        assert!((l(&off, 30.0) - (base + 30.0)).abs() < 1e-12);
        assert!((l(&off, 60.0) - (base + 60.0)).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_examples() {
        let lp = Tensor::new(2.5f64, &Device::Cpu).unwrap();
        let ld = Tensor::new(0.1f64, &Device::Cpu).unwrap();
        let f = |a: f64| joint_loss(&lp, &ld, a).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(f(0.0), 2.5);
        assert!((f(10.0) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn act_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ActionDistribution {
            mu: [0.01, -0.02, 0.03],
            sigma: [0.5; 3],
            gripper: 0.7,
        };
        let a = act(&d, &mut rng, true);
        assert_eq!(a.delta, d.mu);
        assert_eq!(a.gripper, 1.0);
        let tight = ActionDistribution {
            sigma: [1e-7; 3],
            gripper: 0.2,
            ..d
        };
        let s = act(&tight, &mut rng, false);
        for k in 0..3 {
            assert!((s.delta[k] - d.mu[k]).abs() < 1e-5);
        }
        assert_eq!(s.gripper, 0.0);
        assert_ne!(act(&d, &mut rng, false).delta, d.mu);
    }

    #[test]
    fn mode_and_arch_names_round_trip() {
        for m in ConditioningMode::ALL {
            assert_eq!(m.as_str().parse::<ConditioningMode>().unwrap(), m);
        }
        for a in Arch::ALL {
            assert_eq!(a.as_str().parse::<Arch>().unwrap(), a);
        }
        assert!("both".parse::<ConditioningMode>().is_err());
    }

    #[test]
    fn default_policy_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = Agent::new(
            ModelConfig::new(ConditioningMode::Deltaco, Arch::default(), (1, 2)),
            DType::F32,
            &mut rng,
        )
        .unwrap();
        let dev = Device::Cpu;
        let obs = Tensor::rand(0f32, 1.0, (2, 48, 48, 3), &dev).unwrap();
        let proprio = Tensor::zeros((2, 4), DType::F32, &dev).unwrap();
        let z = Tensor::ones((2, EMBED_DIM), DType::F32, &dev).unwrap();
        let o = agent
            .policy
            .forward(
                &obs,
                &proprio,
                &TaskInputs {
                    z_demo: Some(&z),
                    z_lang: Some(&z),
                    one_hot: None,
                },
                ConditioningMode::Deltaco,
            )
            .unwrap();
        assert_eq!(o.mu.dims(), &[2, 3]);
        for r in o.rows().unwrap() {
            assert!(r.sigma.iter().all(|&s| s >= SIGMA_FLOOR as f32));
            assert!((0.0..=1.0).contains(&r.gripper));
        }
        let missing = agent.policy.forward(
            &obs,
            &proprio,
            &TaskInputs {
                z_demo: Some(&z),
                ..Default::default()
            },
            ConditioningMode::Deltaco,
        );
        assert!(matches!(missing, Err(Error::MissingEmbedding { .. })));
    }
}
