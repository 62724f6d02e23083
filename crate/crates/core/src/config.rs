//! TOML configuration files. Unknown keys are rejected; missing keys take
//! their defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::forge::LayoutSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Canonical TOML text for a config value.
pub fn dump<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let config: TrainConfig = load(path)?;
    config.validate()?;
    Ok(config)
}

/// Loads a layout; a relative `font_source` is resolved against the
/// directory holding the file.
pub fn load_layout(path: impl AsRef<Path>) -> Result<LayoutSpec> {
    let path = path.as_ref();
    let mut spec: LayoutSpec = load(path)?;
    if spec.font_source.is_relative() {
        if let Some(dir) = path.parent() {
            spec.font_source = dir.join(&spec.font_source);
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelPreset;

    #[test]
    fn empty_config_gives_paper_defaults() {
        let c: TrainConfig = parse("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.epochs, 200);
        assert_eq!(c.lr0, 2e-4);
        assert_eq!(c.decay_start_epoch, 100);
        assert_eq!(c.weight_decay, 5e-5);
        assert_eq!(c.betas, [0.5, 0.999]);
        assert_eq!(c.noise_sigma, 0.05);
        assert_eq!(
            (c.weights.lambda_cyc, c.weights.lambda_id, c.weights.lambda_read),
            (10.0, 5.0, 1.0)
        );
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse::<TrainConfig>("epochz = 5").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = parse::<TrainConfig>("[weights]\nlambda_cyk = 1.0").unwrap_err().to_string();
        assert!(err.contains("lambda_cyk"), "{err}");
    }

    #[test]
    fn type_mismatch_is_an_error() {
        assert!(parse::<TrainConfig>("epochs = \"many\"").is_err());
        assert!(parse::<TrainConfig>("model = \"huge\"").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: TrainConfig = parse("epochs = 4\ndecay_start_epoch = 2\nmodel = \"tiny\"\n[weights]\nlambda_read = 0.0").unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.model, ModelPreset::Tiny);
        assert_eq!(c.weights.lambda_read, 0.0);
        assert_eq!(c.weights.lambda_cyc, 10.0);
    }

    #[test]
    fn dump_of_load_is_canonical() {
        let text = "seed = 3\nepochs = 10\ndecay_start_epoch = 5\n[weights]\nlambda_id = 0.5\n";
        let a: TrainConfig = parse(text).unwrap();
        let canonical = dump(&a).unwrap();
        let b: TrainConfig = parse(&canonical).unwrap();
        assert_eq!(a, b);
        assert_eq!(dump(&b).unwrap(), canonical);
    }

    #[test]
    fn layout_font_resolves_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.toml");
        fs::write(&path, "font_source = \"fonts/x.ttf\"\npage_width_px = 600\npage_height_px = 800\n[margins_px]\ntop = 20\nbottom = 20\nleft = 20\nright = 20\n").unwrap();
        let spec = load_layout(&path).unwrap();
        assert_eq!(spec.font_source, dir.path().join("fonts/x.ttf"));
        fs::write(&path, "font_source = \"a.ttf\"\npage_widht_px = 3").unwrap();
        assert!(load_layout(&path).unwrap_err().to_string().contains("page_widht_px"));
    }
}
