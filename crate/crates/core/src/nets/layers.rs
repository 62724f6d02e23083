use candle_core::{DType, Device, Module, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Const(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Const(v) => vec![v; n],
        }
    }
}

/// A flat tensor exported for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Trainable parameters plus non-trainable buffers of one network, in
/// registration order. Parameters are initialized from a seeded stream so a
/// network is a pure function of its config and seed.
#[derive(Debug)]
pub struct Params {
    dtype: DType,
    vars: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl Params {
    pub fn new(dtype: DType) -> Self {
        Params {
            dtype,
            vars: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, rng: &mut Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let t = Tensor::from_vec(init.sample(n, rng), shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    pub fn add_buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.push((name, var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn export_list(list: &[(String, Var)]) -> Result<Vec<NamedArray>> {
        list.iter()
            .map(|(name, v)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                })
            })
            .collect()
    }

    fn import_list(list: &[(String, Var)], arrays: &[NamedArray], dtype: DType) -> Result<()> {
        if list.len() != arrays.len() {
            return Err(Error::Shape {
                expected: format!("{} tensors", list.len()),
                got: format!("{} tensors", arrays.len()),
            });
        }
        for ((name, var), arr) in list.iter().zip(arrays) {
            if *name != arr.name || var.dims() != arr.shape.as_slice() {
                return Err(Error::Shape {
                    expected: format!("{name} {:?}", var.dims()),
                    got: format!("{} {:?}", arr.name, arr.shape),
                });
            }
            let t = Tensor::from_slice(&arr.data, arr.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn export(&self) -> Result<(Vec<NamedArray>, Vec<NamedArray>)> {
        Ok((Self::export_list(&self.vars)?, Self::export_list(&self.buffers)?))
    }

    pub fn import(&self, params: &[NamedArray], buffers: &[NamedArray]) -> Result<()> {
        Self::import_list(&self.vars, params, self.dtype)?;
        Self::import_list(&self.buffers, buffers, self.dtype)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init, rng)?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), &[c_out], Init::Const(0.0), rng)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), &[d_out, d_in], Init::Uniform(bound), rng)?;
        let bias = params.add(format!("{name}.bias"), &[d_out], Init::Uniform(bound), rng)?;
        Ok(Linear { weight, bias })
    }
}

impl Module for Linear {
    /// Applies to the last axis of a rank-2 or rank-3 input.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            3 => {
                let (n, t, d) = x.dims3()?;
                x.reshape((n * t, d))?.matmul(&w)?.reshape((n, t, ()))?
            }
            _ => x.matmul(&w)?,
        };
        y.broadcast_add(&self.bias)
    }
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape((n, c, h, w))?)
}

/// How batch normalization treats statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Use running statistics.
    Eval,
    /// Use batch statistics and update the running averages.
    Train,
    /// Use batch statistics without touching the running averages.
    TrainNoUpdate,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(params: &mut Params, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: params.add(format!("{name}.weight"), &[channels], Init::Const(1.0), rng)?,
            beta: params.add(format!("{name}.bias"), &[channels], Init::Const(0.0), rng)?,
            running_mean: params.add_buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: params.add_buffer(format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        // channels first so every statistic is a reduction over one
        // contiguous trailing axis
        let xc = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
        let (mean, var) = match mode {
            BnMode::Eval => (
                self.running_mean.as_tensor().reshape((c, 1))?,
                self.running_var.as_tensor().reshape((c, 1))?,
            ),
            BnMode::Train | BnMode::TrainNoUpdate => {
                let mean = xc.mean_keepdim(1)?;
                let var = xc.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
                if mode == BnMode::Train {
                    let count = (n * h * w) as f64;
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let m = mean.detach().flatten_all()?;
                    let v = (var.detach().flatten_all()? * unbiased)?;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (v * BN_MOMENTUM)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                (mean, var)
            }
        };
        // fold normalization and the affine map into one scale and shift
        let scale = self.gamma.reshape((c, 1))?.div(&(var + NORM_EPS)?.sqrt()?)?;
        let shift = (self.beta.reshape((c, 1))? - mean.mul(&scale)?)?;
        let y = xc.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        Ok(y.reshape((c, n, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

fn reflect_indices(len: usize, pad: usize) -> Vec<u32> {
    (0..len + 2 * pad)
        .map(|i| {
            let j = i as i64 - pad as i64;
            let j = if j < 0 {
                -j
            } else if j >= len as i64 {
                2 * (len as i64 - 1) - j
            } else {
                j
            };
            j as u32
        })
        .collect()
}

/// Reflection padding of the two spatial axes (edge pixel not repeated).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::Shape {
            expected: format!("spatial size > {pad} for reflection padding"),
            got: format!("{h}x{w}"),
        });
    }
    let rows = Tensor::new(reflect_indices(h, pad).as_slice(), x.device())?;
    let cols = Tensor::new(reflect_indices(w, pad).as_slice(), x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Non-overlapping max pooling with window = stride = `(kh, kw)`.
///
/// Expressed as reshape + max reductions: candle's fused max-pool backward
/// scales the gradient by the window's mask average instead of routing it
/// to the arg-max.
pub fn max_pool(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % kh != 0 || w % kw != 0 {
        return Err(Error::Shape {
            expected: format!("spatial dims divisible by {kh}x{kw}"),
            got: format!("{h}x{w}"),
        });
    }
    Ok(x
        .reshape((n * c, h / kh, kh, w / kw, kw))?
        .max(4)?
        .max(2)?
        .reshape((n, c, h / kh, w / kw))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// One direction of an LSTM layer with PyTorch gate ordering (i, f, g, o).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(params: &mut Params, name: &str, d_in: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let init = Init::Uniform(1.0 / (hidden as f64).sqrt());
        Ok(LstmCell {
            w_ih: params.add(format!("{name}.weight_ih"), &[4 * hidden, d_in], init, rng)?,
            w_hh: params.add(format!("{name}.weight_hh"), &[4 * hidden, hidden], init, rng)?,
            b_ih: params.add(format!("{name}.bias_ih"), &[4 * hidden], init, rng)?,
            b_hh: params.add(format!("{name}.bias_hh"), &[4 * hidden], init, rng)?,
            hidden,
        })
    }

    /// Runs over `x` (N×T×D) in forward or reverse time order and returns the
    /// hidden states (N×T×H) in the original time order.
    pub fn run(&self, x: &Tensor, reverse: bool) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        let hs = self.hidden;
        let pre = x
            .reshape((n * t, d))?
            .matmul(&self.w_ih.t()?)?
            .broadcast_add(&(&self.b_ih + &self.b_hh)?)?
            .reshape((n, t, 4 * hs))?;
        let w_hh = self.w_hh.t()?;
        let mut h = Tensor::zeros((n, hs), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gates = (pre.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&w_hh)?)?;
            let i = sigmoid(&gates.narrow(1, 0, hs)?)?;
            let f = sigmoid(&gates.narrow(1, hs, hs)?)?;
            let g = gates.narrow(1, 2 * hs, hs)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * hs, hs)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outs[step] = Some(h.clone());
        }
        let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outs, 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn reflect_pad_matches_definition() {
        let x = Tensor::arange(0f32, 12.0, &Device::Cpu).unwrap().reshape((1, 1, 3, 4)).unwrap();
        let y = reflect_pad(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 7, 8]);
        let rows: Vec<Vec<f32>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // row index 2 is original row 0 = [0,1,2,3]; reflected columns are 2,1 | 0..3 | 2,1
        assert_eq!(rows[2], vec![2., 1., 0., 1., 2., 3., 2., 1.]);
        assert_eq!(rows[0], rows[4]);
        assert!(reflect_pad(&x, 3).is_err());
    }

    #[test]
    fn max_pool_values_and_gradient() {
        let x = Var::from_vec((0..16).map(|v| v as f64).collect::<Vec<_>>(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let y = max_pool(x.as_tensor(), 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![4., 5., 6., 7., 12., 13., 14., 15.]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let expect: Vec<f64> = (0..16).map(|i| if (4..8).contains(&i) || i >= 12 { 1.0 } else { 0.0 }).collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut r = rng::stream(1, "t", 0);
        let data: Vec<f32> = (0..2 * 3 * 5 * 5).map(|_| r.random_range(-4.0..9.0)).collect();
        let x = Tensor::from_vec(data, (2, 3, 5, 5), &Device::Cpu).unwrap();
        let y = instance_norm(&x).unwrap();
        let m: Vec<f32> = y.mean((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let v: Vec<f32> = y.sqr().unwrap().mean((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|m| m.abs() < 1e-5));
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn batch_norm_modes() {
        let mut r = rng::stream(2, "t", 0);
        let mut p = Params::new(DType::F32);
        let bn = BatchNorm2d::new(&mut p, "bn", 2, &mut r).unwrap();
        let x = (Tensor::ones((4, 2, 3, 3), DType::F32, &Device::Cpu).unwrap() * 5.0).unwrap();
        bn.forward(&x, BnMode::TrainNoUpdate).unwrap();
        let rm: Vec<f32> = p.buffers()[0].1.as_tensor().to_vec1().unwrap();
        assert_eq!(rm, vec![0.0, 0.0]);
        bn.forward(&x, BnMode::Train).unwrap();
        let rm: Vec<f32> = p.buffers()[0].1.as_tensor().to_vec1().unwrap();
        assert!((rm[0] - 0.5).abs() < 1e-6);
        let y = bn.forward(&x, BnMode::Eval).unwrap();
        let expect = (5.0 - 0.5) / (0.9f32 + 1e-5).sqrt();
        let got: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!((got[0] - expect).abs() < 1e-4);
    }

    #[test]
    fn params_round_trip() {
        let mut r = rng::stream(3, "t", 0);
        let mut p = Params::new(DType::F32);
        Conv2d::new(&mut p, "c", 2, 3, 3, 1, 1, true, Init::Normal(0.02), &mut r).unwrap();
        let (vars, bufs) = p.export().unwrap();
        assert_eq!(p.count(), 2 * 3 * 9 + 3);
        let mut r2 = rng::stream(4, "t", 0);
        let mut q = Params::new(DType::F32);
        Conv2d::new(&mut q, "c", 2, 3, 3, 1, 1, true, Init::Normal(0.02), &mut r2).unwrap();
        q.import(&vars, &bufs).unwrap();
        assert_eq!(q.export().unwrap().0, vars);
        let mut bad = vars.clone();
        bad[0].shape = vec![1];
        assert!(q.import(&bad, &bufs).is_err());
    }
}
