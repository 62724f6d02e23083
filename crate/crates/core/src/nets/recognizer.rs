use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{max_pool, BatchNorm2d, BnMode, Conv2d, Init, Linear, LstmCell, Params};
use crate::corpus::{CROP_HEIGHT, CROP_WIDTH};
use crate::rng::Rng;
use crate::{Error, Result};

/// Channel multipliers of the ten convolutions.
const WIDTH_PLAN: [usize; 10] = [1, 1, 2, 2, 4, 4, 4, 6, 6, 6];

/// Pooling (height, width) applied after the convolution with the same index.
fn pool_after(layer: usize) -> Option<(usize, usize)> {
    match layer {
        1 | 3 => Some((2, 2)),
        5 | 7 | 9 => Some((2, 1)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub width: usize,
    pub hidden: usize,
    /// Output classes, blank included.
    pub classes: usize,
}

impl RecognizerConfig {
    pub fn paper(classes: usize) -> Self {
        RecognizerConfig {
            width: 64,
            hidden: 256,
            classes,
        }
    }

    /// Time steps emitted for a crop of the standard width.
    pub fn steps() -> usize {
        CROP_WIDTH / 4
    }
}

#[derive(Debug, Clone)]
struct Bilstm {
    fwd: LstmCell,
    bwd: LstmCell,
}

/// Convolutional recurrent recognizer: ten conv+BN+ReLU layers reduce a
/// 1×32×128 crop to a 1×32 feature sequence, two bidirectional LSTM layers
/// contextualize it, and a linear layer emits per-step class logits.
#[derive(Debug)]
pub struct Recognizer {
    config: RecognizerConfig,
    params: Params,
    convs: Vec<(Conv2d, BatchNorm2d)>,
    lstm: Vec<Bilstm>,
    out: Linear,
}

impl Recognizer {
    pub fn new(config: RecognizerConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::InvalidArgument("recognizer needs at least one symbol class".into()));
        }
        let mut p = Params::new(dtype);
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, m) in WIDTH_PLAN.iter().enumerate() {
            let c_out = m * config.width;
            let fan_in = (c_in * 9) as f64;
            let init = Init::Normal((2.0 / fan_in).sqrt());
            let conv = Conv2d::new(&mut p, &format!("conv{i}"), c_in, c_out, 3, 1, 1, false, init, rng)?;
            let bn = BatchNorm2d::new(&mut p, &format!("bn{i}"), c_out, rng)?;
            convs.push((conv, bn));
            c_in = c_out;
        }
        let mut d_in = c_in;
        let mut lstm = Vec::new();
        for layer in 0..2 {
            lstm.push(Bilstm {
                fwd: LstmCell::new(&mut p, &format!("lstm{layer}.fwd"), d_in, config.hidden, rng)?,
                bwd: LstmCell::new(&mut p, &format!("lstm{layer}.bwd"), d_in, config.hidden, rng)?,
            });
            d_in = 2 * config.hidden;
        }
        let out = Linear::new(&mut p, "out", d_in, config.classes, rng)?;
        Ok(Recognizer {
            config,
            params: p,
            convs,
            lstm,
            out,
        })
    }

    pub fn config(&self) -> RecognizerConfig {
        self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Copy of this recognizer with `classes` output rows. Existing rows keep
    /// their weights; extra rows come from a fresh initialization.
    pub fn with_classes(&self, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < self.config.classes {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink output from {} to {classes} classes",
                self.config.classes
            )));
        }
        let fresh = Recognizer::new(RecognizerConfig { classes, ..self.config }, self.params.dtype(), rng)?;
        let (old, buffers) = self.params.export()?;
        let (mut merged, _) = fresh.params.export()?;
        for (dst, src) in merged.iter_mut().zip(&old) {
            if dst.shape == src.shape {
                dst.data.clone_from(&src.data);
            } else {
                // output layer: old rows occupy the leading block
                dst.data[..src.data.len()].copy_from_slice(&src.data);
            }
        }
        fresh.params.import(&merged, &buffers)?;
        Ok(fresh)
    }

    /// N×1×32×128 crops to N×32×classes logits.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != CROP_HEIGHT || dims[3] != CROP_WIDTH {
            return Err(Error::Shape {
                expected: format!("N×1×{CROP_HEIGHT}×{CROP_WIDTH}"),
                got: format!("{dims:?}"),
            });
        }
        let mut y = x.clone();
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            y = bn.forward(&conv.forward(&y)?, mode)?.relu()?;
            if let Some(k) = pool_after(i) {
                y = max_pool(&y, k.0, k.1)?;
            }
        }
        // N×C×1×T -> N×T×C
        let mut seq = y.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        for layer in &self.lstm {
            let f = layer.fwd.run(&seq, false)?;
            let b = layer.bwd.run(&seq, true)?;
            seq = Tensor::cat(&[f, b], 2)?;
        }
        Ok(self.out.forward(&seq)?)
    }
}
