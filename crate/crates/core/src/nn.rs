//! Parameter storage, basic layers and the Adam optimizer on top of candle.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::ops;
use crate::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// New parameter with explicit initial values.
    pub fn from_values(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// New parameter drawn from U(−bound, bound).
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.from_values(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter as `(name, shape, f32 values)`.
    pub fn export(&self) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(k, v)| NamedArray::from_tensor(k, v.as_tensor()))
            .collect()
    }

    /// Overwrite parameters from a snapshot; names and shapes must match exactly.
    pub fn import(&self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.vars.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.vars.len()),
                got: format!("{} parameters", arrays.len()),
            });
        }
        for a in arrays {
            let var = self.vars.get(&a.name).ok_or_else(|| Error::ShapeMismatch {
                expected: "known parameter name".into(),
                got: a.name.clone(),
            })?;
            var.set(&a.to_tensor(self.dtype, &self.device, var.dims())?)?;
        }
        Ok(())
    }
}

/// A named f32 array, the unit of checkpoint storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(Self {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device, expect: &[usize]) -> Result<Tensor> {
        if self.shape != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{}{:?}", self.name, expect),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// Fully connected layer; weight stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: ps.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound, rng)?,
            b: ps.uniform(&format!("{name}.b"), &[fan_out], bound, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.w.as_tensor())?
            .broadcast_add(self.b.as_tensor())?)
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[0]
    }
}

/// Square-kernel stride-1 convolution on `N×H×W×C` maps; weight stored as
/// `k × k × C_in × C_out`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Var,
    pub b: Var,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if 2 * pad + 1 != kernel {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel} with padding {pad} changes the map size"
            )));
        }
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            w: ps.uniform(
                &format!("{name}.w"),
                &[kernel, kernel, c_in, c_out],
                bound,
                rng,
            )?,
            b: ps.uniform(&format!("{name}.b"), &[c_out], bound, rng)?,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let &[k, _, c_in, c_out] = self.w.dims() else {
            unreachable!("conv weight is rank 4")
        };
        if c != c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("{c_in} channels"),
                got: c.to_string(),
            });
        }
        let cols = ops::patches(x, k, self.pad)?;
        let wm = self.w.as_tensor().reshape((k * k * c_in, c_out))?;
        let wb = Tensor::cat(&[&wm, &self.b.as_tensor().reshape((1, c_out))?], 0)?;
        Ok(cols.matmul(&wb)?.reshape((n, h, w, c_out))?)
    }
}

/// Non-overlapping `p×p` max pooling of an `N×H×W×C` map.
pub fn max_pool(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial size divisible by {p}"),
            got: format!("{h}x{w}"),
        });
    }
    Ok(x.reshape((n, h / p, p, w / p, p, c))?.max(4)?.max(2)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Row-wise L2 normalization of a `k × d` matrix.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Detached gradients of `loss` for every parameter it depends on.
pub fn param_grads(ps: &ParamStore, loss: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let grads = loss.backward()?;
    // Detached so callers holding gradients do not keep the graph alive.
    Ok(ps
        .iter()
        .filter_map(|(name, var)| {
            grads
                .get(var.as_tensor())
                .map(|g| (name.to_string(), g.detach()))
        })
        .collect())
}

/// First-order adaptive-moment optimizer with bias correction.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in ps.iter() {
            m.insert(name.to_string(), var.zeros_like()?);
            v.insert(name.to_string(), var.zeros_like()?);
        }
        Ok(Self { cfg, t: 0, m, v })
    }

    /// Apply one update from the gradients of `loss`.
    pub fn step(&mut self, ps: &ParamStore, loss: &Tensor) -> Result<()> {
        let grads = param_grads(ps, loss)?;
        self.apply(ps, &grads)
    }

    /// Apply one update from per-parameter gradients keyed by name.
    pub fn apply(&mut self, ps: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in ps.iter() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?.detach();
            let v = self.v.get_mut(name).expect("moment for every parameter");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn export(&self) -> Result<(Vec<NamedArray>, Vec<NamedArray>)> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<Vec<NamedArray>> {
            map.iter()
                .map(|(k, t)| NamedArray::from_tensor(k, t))
                .collect()
        };
        Ok((dump(&self.m)?, dump(&self.v)?))
    }

    pub fn import(&mut self, t: u64, m: &[NamedArray], v: &[NamedArray]) -> Result<()> {
        for (map, arrays) in [(&mut self.m, m), (&mut self.v, v)] {
            if arrays.len() != map.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} moment arrays", map.len()),
                    got: arrays.len().to_string(),
                });
            }
            for a in arrays {
                let slot = map.get_mut(&a.name).ok_or_else(|| Error::ShapeMismatch {
                    expected: "known parameter name".into(),
                    got: a.name.clone(),
                })?;
                *slot = a.to_tensor(slot.dtype(), slot.device(), slot.dims())?;
            }
        }
        self.t = t;
        Ok(())
    }
}
