//! Fused CPU kernels with hand-written gradients for the hot paths of the
//! convolutional networks: patch extraction, FiLM and spatial softmax. All
//! maps are `N × H × W × C`, row-major.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

trait Real: WithDType + Float {}
impl Real for f32 {}
impl Real for f64 {}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused kernel needs a contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

fn values<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn unsupported<R>(op: &str, dtype: DType) -> CResult<R> {
    candle_core::bail!("{op} supports f32 and f64 only, got {dtype:?}")
}

// ---------------------------------------------------------------------------
// Patch extraction

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    /// Patch row length: `k·k·C` entries plus a trailing constant 1.
    fn row(&self) -> usize {
        self.k * self.k * self.c + 1
    }

    /// Visit every (patch offset, image offset) pair of `c` contiguous values.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let Geometry { n, h, w, c, k, pad } = *self;
        let row = self.row();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let o = ((b * h + y) * w + x) * row;
                    for dy in 0..k {
                        let sy = (y + dy).wrapping_sub(pad);
                        if sy >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = (x + dx).wrapping_sub(pad);
                            if sx >= w {
                                continue;
                            }
                            f(o + (dy * k + dx) * c, ((b * h + sy) * w + sx) * c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let (c, row) = (self.c, self.row());
        let mut out = vec![T::zero(); self.n * self.h * self.w * row];
        for r in out.chunks_exact_mut(row) {
            r[row - 1] = T::one();
        }
        self.for_each(|col, img| out[col..col + c].copy_from_slice(&src[img..img + c]));
        out
    }

    fn col2im<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let c = self.c;
        let mut out = vec![T::zero(); self.n * self.h * self.w * c];
        self.for_each(|col, img| {
            for (o, &v) in out[img..img + c].iter_mut().zip(&src[col..col + c]) {
                *o += v;
            }
        });
        out
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.n * g.h * g.w, g.row()));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(g.im2col(slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(g.im2col(slice::<f64>(s, l)?)),
            _ => return unsupported("im2col", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.n, g.h, g.w, g.c));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(g.col2im(slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(g.col2im(slice::<f64>(s, l)?)),
            _ => return unsupported("col2im", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Same-size `k×k` patches of an `N×H×W×C` map with zero padding `pad`, as
/// an `(N·H·W) × (k·k·C + 1)` matrix. Patch entries are ordered `(dy, dx, c)`
/// and each row ends with a constant 1 so a bias row can ride in the matmul.
pub fn patches(x: &Tensor, k: usize, pad: usize) -> CResult<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    x.contiguous()?
        .apply_op1(Im2Col(Geometry { n, h, w, c, k, pad }))
}

// ---------------------------------------------------------------------------
// FiLM

struct Film;

fn film_fwd<T: Real>(x: &[T], g: &[T], b: &[T], c: usize) -> Vec<T> {
    let plane = x.len() / (g.len() / c);
    let mut out = Vec::with_capacity(x.len());
    for (n, xs) in x.chunks_exact(plane).enumerate() {
        let (gn, bn) = (&g[n * c..(n + 1) * c], &b[n * c..(n + 1) * c]);
        for px in xs.chunks_exact(c) {
            out.extend(
                px.iter()
                    .zip(gn)
                    .zip(bn)
                    .map(|((&v, &gg), &bb)| v * gg + bb),
            );
        }
    }
    out
}

fn film_bwd<T: Real>(x: &[T], g: &[T], grad: &[T], c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = x.len() / (g.len() / c);
    let mut dx = Vec::with_capacity(x.len());
    let mut dg = vec![T::zero(); g.len()];
    let mut db = vec![T::zero(); g.len()];
    for (n, (xs, gs)) in x
        .chunks_exact(plane)
        .zip(grad.chunks_exact(plane))
        .enumerate()
    {
        let r = n * c..(n + 1) * c;
        let gn = &g[r.clone()];
        let (dgn, dbn) = (&mut dg[r.clone()], &mut db[r]);
        for (px, gpx) in xs.chunks_exact(c).zip(gs.chunks_exact(c)) {
            for i in 0..c {
                dx.push(gpx[i] * gn[i]);
                dgn[i] += gpx[i] * px[i];
                dbn[i] += gpx[i];
            }
        }
    }
    (dx, dg, db)
}

impl CustomOp3 for Film {
    fn name(&self) -> &'static str {
        "film"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let c = *l1.dims().last().expect("rank-4 input");
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(film_fwd(
                slice::<f32>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                c,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(film_fwd(
                slice::<f64>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                c,
            )),
            _ => return unsupported("film", s1.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(
            x: &Tensor,
            gamma: &Tensor,
            grad: &Tensor,
        ) -> CResult<(Tensor, Tensor, Tensor)> {
            let c = gamma.dim(1)?;
            let (dx, dg, db) = film_bwd(
                &values::<T>(x)?,
                &values::<T>(gamma)?,
                &values::<T>(grad)?,
                c,
            );
            Ok((
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dg, gamma.shape(), x.device())?,
                Tensor::from_vec(db, gamma.shape(), x.device())?,
            ))
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run::<f32>(x, gamma, grad)?,
            DType::F64 => run::<f64>(x, gamma, grad)?,
            d => return unsupported("film", d),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// `x[n, h, w, c]·gamma[n, c] + beta[n, c]`.
pub fn film(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, Film)
}

// ---------------------------------------------------------------------------
// Spatial softmax

struct SpatialSoftmax {
    h: usize,
    w: usize,
    temperature: f64,
}

impl SpatialSoftmax {
    fn grid(k: usize) -> Vec<f64> {
        (0..k)
            .map(|i| {
                if k == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (k - 1) as f64
                }
            })
            .collect()
    }

    /// Per-image softmax weights (location-major) and expected coordinates.
    fn probs<T: Real>(&self, xs: &[T], c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let inv_t = T::from_f64(1.0 / self.temperature);
        let (gx, gy) = (Self::grid(self.w), Self::grid(self.h));
        let mut max = vec![T::neg_infinity(); c];
        for px in xs.chunks_exact(c) {
            for (m, &v) in max.iter_mut().zip(px) {
                *m = Float::max(*m, v * inv_t);
            }
        }
        let mut p = Vec::with_capacity(xs.len());
        let mut z = vec![T::zero(); c];
        for px in xs.chunks_exact(c) {
            for i in 0..c {
                let e = (px[i] * inv_t - max[i]).exp();
                z[i] += e;
                p.push(e);
            }
        }
        let (mut ex, mut ey) = (vec![T::zero(); c], vec![T::zero(); c]);
        for (loc, pp) in p.chunks_exact_mut(c).enumerate() {
            let (cx, cy) = (T::from_f64(gx[loc % self.w]), T::from_f64(gy[loc / self.w]));
            for i in 0..c {
                pp[i] /= z[i];
                ex[i] += pp[i] * cx;
                ey[i] += pp[i] * cy;
            }
        }
        (p, ex, ey)
    }

    fn fwd<T: Real>(&self, x: &[T], c: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(2 * x.len() / (self.h * self.w));
        for xs in x.chunks_exact(self.h * self.w * c) {
            let (_, ex, ey) = self.probs(xs, c);
            for i in 0..c {
                out.push(ex[i]);
                out.push(ey[i]);
            }
        }
        out
    }

    fn bwd<T: Real>(&self, x: &[T], grad: &[T], c: usize) -> Vec<T> {
        let inv_t = T::from_f64(1.0 / self.temperature);
        let (gx, gy) = (Self::grid(self.w), Self::grid(self.h));
        let mut dx = Vec::with_capacity(x.len());
        for (xs, gs) in x
            .chunks_exact(self.h * self.w * c)
            .zip(grad.chunks_exact(2 * c))
        {
            let (p, ex, ey) = self.probs(xs, c);
            for (loc, pp) in p.chunks_exact(c).enumerate() {
                let (cx, cy) = (T::from_f64(gx[loc % self.w]), T::from_f64(gy[loc / self.w]));
                for i in 0..c {
                    dx.push(
                        pp[i] * inv_t * (gs[2 * i] * (cx - ex[i]) + gs[2 * i + 1] * (cy - ey[i])),
                    );
                }
            }
        }
        dx
    }
}

impl CustomOp1 for SpatialSoftmax {
    fn name(&self) -> &'static str {
        "spatial-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (n, _, _, c) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.fwd(slice::<f32>(s, l)?, c)),
            CpuStorage::F64(_) => CpuStorage::F64(self.fwd(slice::<f64>(s, l)?, c)),
            _ => return unsupported("spatial softmax", s.dtype()),
        };
        Ok((out, Shape::from((n, 2 * c))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let c = x.dim(3)?;
        let dx = match x.dtype() {
            DType::F32 => Tensor::from_vec(
                self.bwd(&values::<f32>(x)?, &values::<f32>(grad)?, c),
                x.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                self.bwd(&values::<f64>(x)?, &values::<f64>(grad)?, c),
                x.shape(),
                x.device(),
            )?,
            d => return unsupported("spatial softmax", d),
        };
        Ok(Some(dx))
    }
}

/// Softmax over locations per channel, reduced to expected `(x, y)` in
/// [−1, 1] (`x` along columns), interleaved as `x0, y0, x1, y1, …`.
pub fn spatial_softmax(x: &Tensor, temperature: f64) -> CResult<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    x.contiguous()?
        .apply_op1(SpatialSoftmax { h, w, temperature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Finite-difference check of `d/dx <f(x), u>` against autograd.
    fn check_grad(shape: &[usize], f: impl Fn(&Tensor) -> Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let x0 = rand_vec(&mut rng, n);
        let x = Var::from_vec(x0.clone(), shape, &Device::Cpu).unwrap();
        let y = f(x.as_tensor());
        let u =
            Tensor::from_vec(rand_vec(&mut rng, y.elem_count()), y.shape(), &Device::Cpu).unwrap();
        let g = (&y * &u).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let eval = |v: Vec<f64>| {
            let t = Tensor::from_vec(v, shape, &Device::Cpu).unwrap();
            (f(&t) * &u)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let h = 1e-6;
        for i in 0..n {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn patches_layout() {
        let x = Tensor::arange(0f64, 8.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 2, 2))
            .unwrap();
        let p = patches(&x, 3, 1).unwrap();
        assert_eq!(p.dims(), &[4, 19]);
        let rows = p.to_vec2::<f64>().unwrap();
        // Top-left output pixel: only (dy, dx) in {1, 2}² fall inside the image.
        let mut expect = vec![0.0; 19];
        expect[8..10].copy_from_slice(&[0.0, 1.0]);
        expect[10..12].copy_from_slice(&[2.0, 3.0]);
        expect[14..16].copy_from_slice(&[4.0, 5.0]);
        expect[16..18].copy_from_slice(&[6.0, 7.0]);
        expect[18] = 1.0;
        assert_eq!(rows[0], expect);
    }

    #[test]
    fn patches_gradient() {
        check_grad(&[2, 3, 4, 2], |x| patches(x, 3, 1).unwrap(), 1);
        check_grad(&[1, 3, 3, 3], |x| patches(x, 1, 0).unwrap(), 2);
    }

    fn film_reference(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let (n, _, _, c) = x.dims4().unwrap();
        x.broadcast_mul(&g.reshape((n, 1, 1, c)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((n, 1, 1, c)).unwrap())
            .unwrap()
    }

    #[test]
    fn film_matches_broadcast_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dev = Device::Cpu;
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 3 * 2 * 4), (2, 3, 2, 4), &dev).unwrap();
        let g = Tensor::from_vec(rand_vec(&mut rng, 8), (2, 4), &dev).unwrap();
        let b = Tensor::from_vec(rand_vec(&mut rng, 8), (2, 4), &dev).unwrap();
        let d = (film(&x, &g, &b).unwrap() - film_reference(&x, &g, &b)).unwrap();
        assert!(
            d.abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                < 1e-15
        );
        check_grad(&[2, 3, 2, 4], |x| film(x, &g, &b).unwrap(), 4);
        check_grad(&[2, 4], |g| film(&x, g, &b).unwrap(), 5);
        check_grad(&[2, 4], |b| film(&x, &g, b).unwrap(), 6);
    }

    fn softmax_reference(x: &Tensor, t: f64) -> Tensor {
        let (n, h, w, c) = x.dims4().unwrap();
        let flat = (x.reshape((n, h * w, c)).unwrap() / t).unwrap();
        let e = flat
            .broadcast_sub(&flat.max_keepdim(1).unwrap())
            .unwrap()
            .exp()
            .unwrap();
        let p = e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap();
        let (gx, gy) = (SpatialSoftmax::grid(w), SpatialSoftmax::grid(h));
        let px: Vec<f64> = (0..h * w).map(|i| gx[i % w]).collect();
        let py: Vec<f64> = (0..h * w).map(|i| gy[i / w]).collect();
        let px = Tensor::from_vec(px, (1, h * w, 1), &Device::Cpu).unwrap();
        let py = Tensor::from_vec(py, (1, h * w, 1), &Device::Cpu).unwrap();
        let ex = p.broadcast_mul(&px).unwrap().sum(1).unwrap();
        let ey = p.broadcast_mul(&py).unwrap().sum(1).unwrap();
        Tensor::stack(&[ex, ey], 2)
            .unwrap()
            .reshape((n, 2 * c))
            .unwrap()
    }

    #[test]
    fn spatial_softmax_matches_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(
            rand_vec(&mut rng, 2 * 3 * 4 * 5),
            (2, 3, 4, 5),
            &Device::Cpu,
        )
        .unwrap();
        for t in [1.0, 0.3] {
            let d = (spatial_softmax(&x, t).unwrap() - softmax_reference(&x, t)).unwrap();
            assert!(
                d.abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
                    < 1e-14
            );
            check_grad(&[2, 3, 4, 5], |x| spatial_softmax(x, t).unwrap(), 8);
        }
    }
}
