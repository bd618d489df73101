//! Language and demonstration encoders and the task-encoder losses.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::DemoFrameArray;
use crate::nn::{self, Conv, Linear, ParamStore};
use crate::render::IMG;
use crate::seeds;
use crate::{Error, Result};

pub const EMBED_DIM: usize = 768;
pub const NUM_TASK_SLOTS: usize = 300;
pub const CACHE_MAGIC: [u8; 4] = *b"DLEC";

const STUB_SEED: u64 = 0x6c61_6e67_7374_7562;

// ---------------------------------------------------------------------------
// Language

/// Frozen sentence encoder.
#[derive(Debug, Clone)]
pub enum LanguageBackend {
    /// Mean of per-token pseudo-random unit vectors.
    Stub,
    /// Exact-string lookup in a precomputed embedding file.
    Cache {
        path: PathBuf,
        table: HashMap<String, Vec<f32>>,
    },
}

fn token_vector(token: &str) -> Vec<f64> {
    let keys: Vec<u64> = std::iter::once(seeds::stream::TOKEN)
        .chain(token.bytes().map(u64::from))
        .collect();
    let mut rng = seeds::rng_for(STUB_SEED, &keys);
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn normalized(v: impl IntoIterator<Item = f64>) -> Vec<f32> {
    let v: Vec<f64> = v.into_iter().collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

impl LanguageBackend {
    pub fn from_cache_file(path: &Path) -> Result<Self> {
        let table = read_embedding_cache(path)?;
        Ok(Self::Cache {
            path: path.to_path_buf(),
            table,
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f32>> {
        match self {
            Self::Stub => {
                let lower = text.to_lowercase();
                let tokens: Vec<&str> = lower.split_whitespace().collect();
                if tokens.is_empty() {
                    return Err(Error::InvalidArgument("cannot encode empty text".into()));
                }
                let mut sum = vec![0.0f64; EMBED_DIM];
                for tok in &tokens {
                    for (s, x) in sum.iter_mut().zip(token_vector(tok)) {
                        *s += x;
                    }
                }
                Ok(normalized(sum.into_iter().map(|s| s / tokens.len() as f64)))
            }
            Self::Cache { table, .. } => {
                if text.trim().is_empty() {
                    return Err(Error::InvalidArgument("cannot encode empty text".into()));
                }
                let v = table
                    .get(text)
                    .ok_or_else(|| Error::CacheMiss(text.to_string()))?;
                Ok(normalized(v.iter().map(|&x| f64::from(x))))
            }
        }
    }

    /// `k × 768` matrix of encoded texts.
    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S], dtype: DType) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(texts.len() * EMBED_DIM);
        for t in texts {
            flat.extend(self.encode(t.as_ref())?);
        }
        Ok(Tensor::from_vec(flat, (texts.len(), EMBED_DIM), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn write_embedding_cache(entries: &[(String, Vec<f32>)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (text, v) in entries {
        if v.len() != EMBED_DIM {
            return Err(Error::ShapeMismatch {
                expected: EMBED_DIM.to_string(),
                got: v.len().to_string(),
            });
        }
        let len = u16::try_from(text.len()).map_err(|_| {
            Error::InvalidArgument(format!("text too long for cache: {} bytes", text.len()))
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_cache(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let truncated = |e: std::io::Error| -> Error {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != CACHE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: CACHE_MAGIC,
        });
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(truncated)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut table = HashMap::with_capacity(count);
    let mut vec_bytes = vec![0u8; EMBED_DIM * 4];
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b).map_err(truncated)?;
        let mut text = vec![0u8; u16::from_le_bytes(u16b) as usize];
        r.read_exact(&mut text).map_err(truncated)?;
        let text = String::from_utf8(text).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            msg: "non-UTF-8 cache key".into(),
        })?;
        r.read_exact(&mut vec_bytes).map_err(truncated)?;
        let v: Vec<f32> = vec_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !v.iter().all(|x| x.is_finite()) || v.iter().all(|&x| x == 0.0) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("degenerate vector for {text:?}"),
            });
        }
        if table.insert(text.clone(), v).is_some() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("duplicate key {text:?}"),
            });
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Demonstrations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoEncoderDims {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub pools: Vec<usize>,
    pub fc: Vec<usize>,
    pub out_dim: usize,
}

impl DemoEncoderDims {
    /// Encoder for a `(m, n)` grid of 48×48 frames.
    pub fn for_grid(m: usize, n: usize) -> Self {
        Self {
            height: m * IMG,
            width: n * IMG,
            kernel: 3,
            channels: vec![16, 16, 16],
            pools: vec![2, 2, 1],
            fc: vec![1024, 512, 256],
            out_dim: EMBED_DIM,
        }
    }

    fn flat_dim(&self) -> usize {
        let shrink: usize = self.pools.iter().product();
        (self.height / shrink) * (self.width / shrink) * self.channels.last().copied().unwrap_or(3)
    }
}

impl Default for DemoEncoderDims {
    fn default() -> Self {
        Self::for_grid(1, 2)
    }
}

/// Convolutional demonstration encoder with L2-normalized output.
#[derive(Debug, Clone)]
pub struct DemoEncoder {
    pub dims: DemoEncoderDims,
    convs: Vec<Conv>,
    fcs: Vec<Linear>,
    out: Linear,
}

impl DemoEncoder {
    pub fn new(ps: &mut ParamStore, dims: DemoEncoderDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.channels.len() != dims.pools.len() {
            return Err(Error::InvalidArgument(
                "one pool size per conv layer".into(),
            ));
        }
        let shrink: usize = dims.pools.iter().product();
        if !dims.height.is_multiple_of(shrink) || !dims.width.is_multiple_of(shrink) {
            return Err(Error::InvalidArgument(format!(
                "demo input {}x{} not divisible by pooling factor {shrink}",
                dims.height, dims.width
            )));
        }
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in dims.channels.iter().enumerate() {
            convs.push(Conv::new(
                ps,
                &format!("demo.conv{i}"),
                c_in,
                c,
                dims.kernel,
                dims.kernel / 2,
                rng,
            )?);
            c_in = c;
        }
        let mut fcs = Vec::new();
        let mut d = dims.flat_dim();
        for (i, &h) in dims.fc.iter().enumerate() {
            fcs.push(Linear::new(ps, &format!("demo.fc{i}"), d, h, rng)?);
            d = h;
        }
        let out = Linear::new(ps, "demo.out", d, dims.out_dim, rng)?;
        Ok(Self {
            dims,
            convs,
            fcs,
            out,
        })
    }

    /// `x`: `k × H × W × 3` in [0, 1]. Returns `k × out_dim`, unit rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if (h, w, c) != (self.dims.height, self.dims.width, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x3", self.dims.height, self.dims.width),
                got: format!("{h}x{w}x{c}"),
            });
        }
        let mut y = x.clone();
        for (conv, &pool) in self.convs.iter().zip(&self.dims.pools) {
            y = conv.forward(&y)?.relu()?;
            if pool > 1 {
                y = nn::max_pool(&y, pool)?;
            }
        }
        let mut y = y.flatten_from(1)?;
        for fc in &self.fcs {
            y = fc.forward(&y)?.relu()?;
        }
        nn::l2_normalize(&self.out.forward(&y)?)
    }

    pub fn encode_arrays(&self, demos: &[&DemoFrameArray], dtype: DType) -> Result<Tensor> {
        for d in demos {
            if (d.height, d.width) != (self.dims.height, self.dims.width) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", self.dims.height, self.dims.width),
                    got: format!("{}x{}", d.height, d.width),
                });
            }
        }
        let images: Vec<&[u8]> = demos.iter().map(|d| d.image.as_slice()).collect();
        let x = images_to_tensor(&images, self.dims.height, self.dims.width, dtype)?;
        self.forward(&x)
    }
}

/// Stack row-major `H × W × 3` byte images into an `N × H × W × 3` tensor in [0, 1].
pub fn images_to_tensor(
    images: &[&[u8]],
    height: usize,
    width: usize,
    dtype: DType,
) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(images.len() * height * width * 3);
    for img in images {
        if img.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x3 bytes"),
                got: format!("{} bytes", img.len()),
            });
        }
        flat.extend(img.iter().map(|&b| f32::from(b) / 255.0));
    }
    let t = Tensor::from_vec(flat, (images.len(), height, width, 3), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

// ---------------------------------------------------------------------------
// Losses and baseline embeddings

fn row_log_softmax_diag(logits: &Tensor) -> Result<Tensor> {
    let k = logits.dim(0)?;
    let max = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + &max)?;
    let eye = Tensor::eye(k, logits.dtype(), logits.device())?;
    let diag = (logits * eye)?.sum_keepdim(1)?;
    Ok((lse - diag)?.mean_all()?)
}

/// Cross-entropy of `Z_demo Z_langᵀ / β` against the identity target,
/// averaged over rows (and over columns too when `symmetric`).
pub fn contrastive_loss(
    z_demo: &Tensor,
    z_lang: &Tensor,
    beta: f64,
    symmetric: bool,
) -> Result<Tensor> {
    let (k, d) = z_demo.dims2()?;
    if z_lang.dims2()? != (k, d) {
        return Err(Error::ShapeMismatch {
            expected: format!("{k}x{d}"),
            got: format!("{:?}", z_lang.dims()),
        });
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 tasks, got {k}"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {beta}"
        )));
    }
    let logits = (z_demo.matmul(&z_lang.t()?)? / beta)?;
    let rows = row_log_softmax_diag(&logits)?;
    if symmetric {
        let cols = row_log_softmax_diag(&logits.t()?.contiguous()?)?;
        Ok(((rows + cols)? * 0.5)?)
    } else {
        Ok(rows)
    }
}

/// Mean over rows of `1 − z_demo·z_lang`.
pub fn cosine_loss(z_demo: &Tensor, z_lang: &Tensor) -> Result<Tensor> {
    if z_demo.dims() != z_lang.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z_demo.dims()),
            got: format!("{:?}", z_lang.dims()),
        });
    }
    let dots = (z_demo * z_lang)?.sum(1)?;
    Ok(dots.affine(-1.0, 1.0)?.mean_all()?)
}

pub fn one_hot_embedding(task_id: usize, total: usize) -> Result<Vec<f32>> {
    if task_id >= total {
        return Err(Error::UnknownTask(task_id));
    }
    let mut v = vec![0.0; total];
    v[task_id] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_demo_array;
    use crate::datasets::testutil::numbered_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum()
    }

    #[test]
    fn stub_single_token_and_repeats() {
        let lb = LanguageBackend::Stub;
        let a = lb.encode("a").unwrap();
        assert_eq!(a.len(), EMBED_DIM);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-6);
        assert_eq!(lb.encode("a a").unwrap(), a);
        assert_eq!(lb.encode("A").unwrap(), a);
        assert_eq!(
            lb.encode("put it in").unwrap(),
            lb.encode("put it in").unwrap()
        );
        assert!(lb.encode("   ").is_err());
    }

    #[test]
    fn stub_shared_word_overlap() {
        let lb = LanguageBackend::Stub;
        let x = lb.encode("alpha beta green").unwrap();
        let y = lb.encode("gamma delta green").unwrap();
        let z = lb.encode("epsilon zeta eta").unwrap();
        assert!(dot(&x, &y) > dot(&x, &z) + 0.2);
    }

    #[test]
    fn cache_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.dlec");
        let mut v = vec![0.0f32; EMBED_DIM];
        v[0] = 3.0;
        v[1] = 4.0;
        write_embedding_cache(&[("Put it in green bin.".into(), v)], &path).unwrap();
        let lb = LanguageBackend::from_cache_file(&path).unwrap();
        let e = lb.encode("Put it in green bin.").unwrap();
        assert!((e[0] - 0.6).abs() < 1e-7 && (e[1] - 0.8).abs() < 1e-7);
        match lb.encode("Put it in red bin.") {
            Err(Error::CacheMiss(s)) => assert_eq!(s, "Put it in red bin."),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cache_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.dlec");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(matches!(
            read_embedding_cache(&path),
            Err(Error::BadMagic { .. })
        ));
        std::fs::write(&path, b"DLEC\x01\0\0\0\x02\0ab").unwrap();
        assert!(matches!(
            read_embedding_cache(&path),
            Err(Error::Truncated { .. })
        ));
    }

    fn unit_rows(rows: &[&[f64]]) -> Tensor {
        let k = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (k, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn contrastive_uniform_is_ln_k() {
        let row = [0.5, 0.5, 0.5, 0.5];
        let z = unit_rows(&[&row, &row, &row, &row]);
        let l = contrastive_loss(&z, &z, 0.1, false)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn contrastive_orthonormal_pair() {
        let z = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = contrastive_loss(&z, &z, 0.1, false)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let oracle = (1.0 + (-10f64).exp()).ln();
        assert!((l - oracle).abs() < 1e-12, "{l}");
        let l1 = contrastive_loss(&z, &z, 1.0, true)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l1 - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_argument_checks() {
        let z = unit_rows(&[&[1.0, 0.0]]);
        assert!(contrastive_loss(&z, &z, 0.1, false).is_err());
        let z2 = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(contrastive_loss(&z2, &z2, 0.0, false).is_err());
        assert!(contrastive_loss(&z2, &z2.narrow(1, 0, 1).unwrap(), 1.0, false).is_err());
    }

    #[test]
    fn cosine_triple() {
        let a = unit_rows(&[&[1.0, 0.0]]);
        let b = unit_rows(&[&[0.0, 1.0]]);
        let c = unit_rows(&[&[-1.0, 0.0]]);
        let f = |x: &Tensor, y: &Tensor| cosine_loss(x, y).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(f(&a, &a), 0.0);
        assert_eq!(f(&a, &b), 1.0);
        assert_eq!(f(&a, &c), 2.0);
    }

    #[test]
    fn one_hot_basis() {
        let e = one_hot_embedding(5, NUM_TASK_SLOTS).unwrap();
        assert_eq!(e[5], 1.0);
        assert_eq!(e.iter().sum::<f32>(), 1.0);
        assert_eq!(dot(&e, &one_hot_embedding(6, NUM_TASK_SLOTS).unwrap()), 0.0);
        assert!(matches!(
            one_hot_embedding(300, NUM_TASK_SLOTS),
            Err(Error::UnknownTask(300))
        ));
    }

    #[test]
    fn demo_encoder_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new(DType::F32);
        let enc = DemoEncoder::new(&mut ps, DemoEncoderDims::for_grid(1, 2), &mut rng).unwrap();
        let a = make_demo_array(&numbered_trajectory(1), 1, 2, &mut rng).unwrap();
        let mut other = numbered_trajectory(2);
        other
            .frames
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = (i % 251) as u8);
        let b = make_demo_array(&other, 1, 2, &mut rng).unwrap();
        let z = enc.encode_arrays(&[&a, &b], DType::F32).unwrap();
        assert_eq!(z.dims(), &[2, EMBED_DIM]);
        let rows = z.to_vec2::<f32>().unwrap();
        assert_ne!(rows[0], rows[1]);
        assert!((dot(&rows[0], &rows[0]) - 1.0).abs() < 1e-5);
        let again = enc
            .encode_arrays(&[&a, &b], DType::F32)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(rows, again);
        let sq = make_demo_array(&numbered_trajectory(1), 2, 2, &mut rng).unwrap();
        assert!(matches!(
            enc.encode_arrays(&[&sq], DType::F32),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
