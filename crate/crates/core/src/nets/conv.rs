//! 2-D convolution as an explicit im2col + GEMM custom op.
//!
//! candle's CPU backward for conv2d computes the kernel gradient as another
//! convolution whose kernel is the whole output map, which is several times
//! slower than the forward pass. Here both directions are plain matrix
//! products over unfolded patches.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, LinalgScalar};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let [n, c, h, w] = *x else {
            candle_core::bail!("conv2d input must be rank 4, got {x:?}")
        };
        let [co, ci, k, k2] = *wt else {
            candle_core::bail!("conv2d kernel must be rank 4, got {wt:?}")
        };
        if ci != c || k != k2 || stride == 0 {
            candle_core::bail!("conv2d: input {x:?} incompatible with kernel {wt:?} (stride {stride})")
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv2d: input {x:?} smaller than kernel {k} with padding {pad}")
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Geometry {
            n,
            c,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits every (row, column, input offset) triple of the unfolded matrix
    /// whose input position lies inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for ci in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            f(row, oy * g.wo + ox, (ci * g.h + iy as usize) * g.w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: LinalgScalar>(g: &Geometry, image: &[T]) -> Array2<T> {
    let mut cols = Array2::zeros((g.rows(), g.cols()));
    let width = g.cols();
    let buf = cols.as_slice_mut().expect("fresh array is contiguous");
    g.for_each_tap(|r, c, i| buf[r * width + c] = image[i]);
    cols
}

fn col2im<T: LinalgScalar>(g: &Geometry, cols: ArrayView2<T>, image: &mut [T]) {
    g.for_each_tap(|r, c, i| image[i] = image[i] + cols[[r, c]]);
}

fn forward<T: LinalgScalar>(g: &Geometry, x: &[T], wt: &[T]) -> Vec<T> {
    let w = ArrayView2::from_shape((g.co, g.rows()), wt).expect("kernel size checked");
    let per_in = g.c * g.h * g.w;
    let per_out = g.co * g.cols();
    let mut out = vec![T::zero(); g.n * per_out];
    for b in 0..g.n {
        let cols = im2col(g, &x[b * per_in..(b + 1) * per_in]);
        let y = w.dot(&cols);
        out[b * per_out..(b + 1) * per_out].copy_from_slice(y.as_slice().expect("dot result is contiguous"));
    }
    out
}

fn backward<T: LinalgScalar>(g: &Geometry, x: &[T], wt: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let w = ArrayView2::from_shape((g.co, g.rows()), wt).expect("kernel size checked");
    let per_in = g.c * g.h * g.w;
    let per_out = g.co * g.cols();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = Array2::<T>::zeros((g.co, g.rows()));
    let mut gcols = Array2::<T>::zeros((g.rows(), g.cols()));
    for b in 0..g.n {
        let cols = im2col(g, &x[b * per_in..(b + 1) * per_in]);
        let gyb = ArrayView2::from_shape((g.co, g.cols()), &gy[b * per_out..(b + 1) * per_out]).expect("output size");
        general_mat_mul(T::one(), &gyb, &cols.t(), T::one(), &mut gw);
        general_mat_mul(T::one(), &w.t(), &gyb, T::zero(), &mut gcols);
        col2im(g, gcols.view(), &mut gx[b * per_in..(b + 1) * per_in]);
    }
    (gx, gw.into_raw_vec_and_offset().0)
}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(&g, slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(&g, slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.n, g.co, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), wt.dims(), self.stride, self.pad)?;
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let v = |t: &Tensor| t.flatten_all()?.to_vec1::<f32>();
                let (gx, gw) = backward(&g, &v(x)?, &v(wt)?, &v(grad)?);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?)
            }
            DType::F64 => {
                let v = |t: &Tensor| t.flatten_all()?.to_vec1::<f64>();
                let (gx, gw) = backward(&g, &v(x)?, &v(wt)?, &v(grad)?);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, wt.shape(), dev)?)
            }
            other => candle_core::bail!("conv2d does not support {other:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Cross-correlation of `x` (N×C×H×W) with `weight` (Co×C×k×k), zero padding
/// `pad` on every side.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    const CASES: [(usize, usize, usize, usize, usize); 4] = [(1, 1, 3, 7, 9), (2, 1, 4, 10, 8), (1, 0, 7, 12, 12), (2, 1, 3, 9, 6)];

    #[test]
    fn matches_candle_forward_and_backward() {
        for (i, (stride, pad, k, h, w)) in CASES.into_iter().enumerate() {
            let x = Var::from_tensor(&rand(&[2, 3, h, w], 1)).unwrap();
            let wt = Var::from_tensor(&rand(&[4, 3, k, k], 2)).unwrap();
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
            let theirs = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_diff(&ours, &theirs) < 1e-12);
            // candle's own backward fails when the stride leaves a remainder
            if i == 3 {
                continue;
            }
            let probe = rand(ours.dims(), 3);
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                let a = ga.get(v.as_tensor()).unwrap();
                let b = gb.get(v.as_tensor()).unwrap();
                assert!(max_diff(a, b) < 1e-10, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (stride, pad, k, h, w) in CASES {
            let x0 = rand(&[2, 3, h, w], 4);
            let w0 = rand(&[4, 3, k, k], 5);
            let probe = rand(conv2d(&x0, &w0, stride, pad).unwrap().dims(), 6);
            let f = |x: &Tensor, wt: &Tensor| -> f64 {
                (conv2d(x, wt, stride, pad).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let xv = Var::from_tensor(&x0).unwrap();
            let wv = Var::from_tensor(&w0).unwrap();
            let grads = (conv2d(xv.as_tensor(), wv.as_tensor(), stride, pad).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let gx: Vec<f64> = grads.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let gw: Vec<f64> = grads.get(wv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let bump = |t: &Tensor, i: usize, d: f64| {
                let mut v: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
                v[i] += d;
                Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap()
            };
            let h = 1e-6;
            for i in (0..gx.len()).step_by(7) {
                let fd = (f(&bump(&x0, i, h), &w0) - f(&bump(&x0, i, -h), &w0)) / (2.0 * h);
                assert!((fd - gx[i]).abs() < 1e-6, "input {i}: {fd} vs {}", gx[i]);
            }
            for i in (0..gw.len()).step_by(5) {
                let fd = (f(&x0, &bump(&w0, i, h)) - f(&x0, &bump(&w0, i, -h))) / (2.0 * h);
                assert!((fd - gw[i]).abs() < 1e-6, "kernel {i}: {fd} vs {}", gw[i]);
            }
        }
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let x = rand(&[1, 2, 6, 6], 4);
        let wt = rand(&[3, 2, 3, 3], 5);
        let a = conv2d(&x, &wt, 1, 1).unwrap();
        let b = conv2d(&x.to_dtype(DType::F32).unwrap(), &wt.to_dtype(DType::F32).unwrap(), 1, 1)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        assert!(max_diff(&a, &b) < 1e-5);
    }

    #[test]
    fn incompatible_shapes_are_errors() {
        assert!(conv2d(&rand(&[1, 2, 5, 5], 0), &rand(&[3, 4, 3, 3], 0), 1, 1).is_err());
        assert!(conv2d(&rand(&[1, 2, 2, 2], 0), &rand(&[3, 2, 5, 5], 0), 1, 0).is_err());
    }
}
