use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, leaky_relu, Conv2d, Init, Params};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_width: 64,
            channels: 3,
        }
    }
}

/// Five 4×4 convolutions: three stride-2 and two stride-1, giving a 70×70
/// receptive field per output score. A 256 input yields a 30×30 map.
#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: Params,
    convs: Vec<Conv2d>,
}

const SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let mut p = Params::new(dtype);
        let w = config.base_width;
        let init = Init::Normal(0.02);
        let plan = [
            (config.channels, w, 2),
            (w, 2 * w, 2),
            (2 * w, 4 * w, 2),
            (4 * w, 8 * w, 1),
            (8 * w, 1, 1),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(&mut p, &format!("conv{i}"), ci, co, 4, s, 1, true, init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Discriminator {
            config,
            params: p,
            convs,
        })
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Output side length for a square input of side `n`.
    pub fn output_side(n: usize) -> usize {
        let after_strided = (0..3).fold(n, |s, _| (s + 2 - 4) / 2 + 1);
        after_strided - 2
    }

    /// Scores N×C×H×W into an unbounded N×1×h×w patch map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.config.channels || dims[2] < 24 || dims[3] < 24 {
            return Err(Error::Shape {
                expected: format!("N×{}×H×W with H, W ≥ 24", self.config.channels),
                got: format!("{dims:?}"),
            });
        }
        let last = self.convs.len() - 1;
        let mut y = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i == last {
                break;
            }
            if i > 0 {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, SLOPE)?;
        }
        Ok(y)
    }
}

/// Receptive field of the stack, computed back from one output unit.
pub fn receptive_field() -> usize {
    let strides = [2usize, 2, 2, 1, 1];
    strides.iter().rev().fold(1, |rf, s| (rf - 1) * s + 4)
}
