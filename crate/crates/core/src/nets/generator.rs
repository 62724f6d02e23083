use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{instance_norm, reflect_pad, sigmoid, Conv2d, Init, Params};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub residual_blocks: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_width: 64,
            residual_blocks: 9,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct Residual {
    a: Conv2d,
    b: Conv2d,
}

/// Residual image-to-image translation network: a 7×7 stem, two stride-2
/// downsamplings, residual blocks at 4× width, two nearest-neighbour
/// upsamplings each followed by a 3×3 convolution, and a 7×7 head squashed
/// into [0, 1].
#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: Params,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<Residual>,
    up: [Conv2d; 2],
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let mut p = Params::new(dtype);
        let w = config.base_width;
        let c = config.channels;
        let init = Init::Normal(0.02);
        let stem = Conv2d::new(&mut p, "stem", c, w, 7, 1, 0, true, init, rng)?;
        let down = [
            Conv2d::new(&mut p, "down0", w, 2 * w, 3, 2, 1, true, init, rng)?,
            Conv2d::new(&mut p, "down1", 2 * w, 4 * w, 3, 2, 1, true, init, rng)?,
        ];
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                Ok(Residual {
                    a: Conv2d::new(&mut p, &format!("res{i}.a"), 4 * w, 4 * w, 3, 1, 0, true, init, rng)?,
                    b: Conv2d::new(&mut p, &format!("res{i}.b"), 4 * w, 4 * w, 3, 1, 0, true, init, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = [
            Conv2d::new(&mut p, "up0", 4 * w, 2 * w, 3, 1, 1, true, init, rng)?,
            Conv2d::new(&mut p, "up1", 2 * w, w, 3, 1, 1, true, init, rng)?,
        ];
        let head = Conv2d::new(&mut p, "head", w, c, 7, 1, 0, true, init, rng)?;
        Ok(Generator {
            config,
            params: p,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Maps N×C×H×W in [0,1] to the same shape in [0,1]. H and W must be
    /// multiples of 4 and large enough for the reflection padding.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(|_| Error::Shape {
            expected: "N×C×H×W".into(),
            got: format!("{:?}", x.dims()),
        })?;
        if c != self.config.channels || h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
            return Err(Error::Shape {
                expected: format!("N×{}×H×W with H, W multiples of 4 and at least 16", self.config.channels),
                got: format!("{:?}", x.dims()),
            });
        }
        let mut y = instance_norm(&self.stem.forward(&reflect_pad(x, 3)?)?)?.relu()?;
        for conv in &self.down {
            y = instance_norm(&conv.forward(&y)?)?.relu()?;
        }
        for block in &self.blocks {
            let r = instance_norm(&block.a.forward(&reflect_pad(&y, 1)?)?)?.relu()?;
            let r = instance_norm(&block.b.forward(&reflect_pad(&r, 1)?)?)?;
            y = (y + r)?;
        }
        for conv in &self.up {
            let (_, _, h, w) = y.dims4()?;
            y = y.upsample_nearest2d(2 * h, 2 * w)?;
            y = instance_norm(&conv.forward(&y)?)?.relu()?;
        }
        sigmoid(&self.head.forward(&reflect_pad(&y, 3)?)?)
    }
}
