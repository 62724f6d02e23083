//! The six networks: two generators, two patch discriminators and two word
//! recognizers, plus the bundle that ties them to a shared alphabet.

mod conv;
mod discriminator;
mod generator;
pub mod layers;
mod recognizer;

use std::collections::BTreeMap;

use candle_core::{DType, Var};
use serde::{Deserialize, Serialize};

pub use discriminator::{receptive_field, Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use layers::{BnMode, NamedArray, Params};
pub use recognizer::{Recognizer, RecognizerConfig};

use crate::ctc::Alphabet;
use crate::{rng, Error, Result};

/// Named size presets. `Paper` matches the published budgets; `Tiny` keeps
/// the same topology at a fraction of the width for CPU experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Paper,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub recognizer_width: usize,
    pub recognizer_hidden: usize,
}

impl ModelPreset {
    pub fn config(self) -> BundleConfig {
        match self {
            ModelPreset::Paper => BundleConfig {
                generator: GeneratorConfig::default(),
                discriminator: DiscriminatorConfig::default(),
                recognizer_width: 64,
                recognizer_hidden: 256,
            },
            ModelPreset::Tiny => BundleConfig {
                generator: GeneratorConfig {
                    base_width: 8,
                    residual_blocks: 2,
                    channels: 3,
                },
                discriminator: DiscriminatorConfig {
                    base_width: 8,
                    channels: 3,
                },
                recognizer_width: 16,
                recognizer_hidden: 64,
            },
        }
    }
}

/// Network roles inside a bundle.
pub const ROLES: [&str; 6] = ["G", "F", "D_x", "D_y", "T", "T_prime"];

/// G: X→Y, F: Y→X, discriminators for each domain and one recognizer per
/// generator output. Both recognizers share the alphabet.
#[derive(Debug)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub t: Recognizer,
    pub t_prime: Recognizer,
    pub alphabet: Alphabet,
}

impl ModelBundle {
    pub fn new(config: BundleConfig, alphabet: Alphabet, seed: u64) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::InvalidArgument("alphabet must not be empty".into()));
        }
        let dtype = DType::F32;
        let rec = RecognizerConfig {
            width: config.recognizer_width,
            hidden: config.recognizer_hidden,
            classes: alphabet.classes(),
        };
        let s = |role: &str| rng::stream(seed, &format!("init-{role}"), 0);
        Ok(ModelBundle {
            config,
            g: Generator::new(config.generator, dtype, &mut s("G"))?,
            f: Generator::new(config.generator, dtype, &mut s("F"))?,
            d_x: Discriminator::new(config.discriminator, dtype, &mut s("D_x"))?,
            d_y: Discriminator::new(config.discriminator, dtype, &mut s("D_y"))?,
            t: Recognizer::new(rec, dtype, &mut s("T"))?,
            t_prime: Recognizer::new(rec, dtype, &mut s("T_prime"))?,
            alphabet,
        })
    }

    pub fn params(&self, role: &str) -> Option<&Params> {
        Some(match role {
            "G" => self.g.params(),
            "F" => self.f.params(),
            "D_x" => self.d_x.params(),
            "D_y" => self.d_y.params(),
            "T" => self.t.params(),
            "T_prime" => self.t_prime.params(),
            _ => return None,
        })
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        let mut v = self.g.params().trainable();
        v.extend(self.f.params().trainable());
        v
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        let mut v = self.d_x.params().trainable();
        v.extend(self.d_y.params().trainable());
        v
    }

    pub fn recognizer_vars(&self) -> Vec<Var> {
        let mut v = self.t.params().trainable();
        v.extend(self.t_prime.params().trainable());
        v
    }

    /// All parameters and buffers keyed by role.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<NamedArray>, Vec<NamedArray>)>> {
        ROLES
            .iter()
            .map(|&r| Ok((r.to_string(), self.params(r).expect("known role").export()?)))
            .collect()
    }

    pub fn import(&self, state: &BTreeMap<String, (Vec<NamedArray>, Vec<NamedArray>)>) -> Result<()> {
        for role in ROLES {
            let (p, b) = state
                .get(role)
                .ok_or_else(|| Error::InvalidArgument(format!("state is missing network {role}")))?;
            self.params(role).expect("known role").import(p, b)?;
        }
        Ok(())
    }
}
