//! Noise injection on g(x) should leave F less sensitive to tiny
//! perturbations of its input than training without noise does.

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;

use scriptorium::corpus::{random_patch, DocumentSample, Domain};
use scriptorium::forge::generate_corpus;
use scriptorium::forge::presets::{desk_layout, DeskStyle, LATIN};
use scriptorium::manifest::Manifest;
use scriptorium::nets::{ModelBundle, ModelPreset};
use scriptorium::rng::stream;
use scriptorium::trainer::{fit, TrainConfig};

fn corpus(dir: &Path, style: DeskStyle, seed: u64, name: &str) -> Manifest {
    let text = dir.join("latin.txt");
    fs::write(&text, LATIN).unwrap();
    let out = generate_corpus(&desk_layout(style, 160, 160, 13), &text, 6, seed, dir.join(name)).unwrap();
    Manifest::load(out.manifest_path).unwrap()
}

fn train(src: &Manifest, tgt: &Manifest, sigma: f64, out: &Path) -> ModelBundle {
    let config = TrainConfig {
        epochs: 1,
        decay_start_epoch: 0,
        steps_per_epoch: Some(60),
        patch_size: 64,
        model: ModelPreset::Tiny,
        noise_sigma: sigma,
        seed: 3,
        ..TrainConfig::default()
    };
    fit(src, tgt, &config, out, None).unwrap().trainer.bundle
}

/// Median over probes of mean |F(G(x)+δ) − F(G(x))| with |δ| = 0.01.
fn sensitivity(bundle: &ModelBundle, probes: &[Tensor]) -> f64 {
    let mut rng = stream(17, "probe-delta", 0);
    let mut scores: Vec<f64> = probes
        .iter()
        .map(|x| {
            let fake = bundle.g.forward(x).unwrap();
            let signs: Vec<f32> = (0..fake.elem_count())
                .map(|_| if rng.random::<bool>() { 0.01 } else { -0.01 })
                .collect();
            let delta = Tensor::from_vec(signs, fake.shape(), &Device::Cpu).unwrap();
            let base = bundle.f.forward(&fake).unwrap();
            let moved = bundle.f.forward(&(&fake + delta).unwrap()).unwrap();
            (moved - base).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap() as f64
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    scores[scores.len() / 2]
}

#[test]
fn noise_training_reduces_reconstruction_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let src = corpus(dir.path(), DeskStyle::Source, 1, "src");
    let tgt = corpus(dir.path(), DeskStyle::Target, 2, "tgt");
    let mut rng = stream(5, "probe-patches", 0);
    let probes: Vec<Tensor> = (0..9)
        .map(|i| {
            let doc = DocumentSample::load(&src, i % src.len(), Domain::Source).unwrap();
            let patch = random_patch(&doc, 64, &mut rng);
            patch.image.to_tensor(&Device::Cpu).unwrap().unsqueeze(0).unwrap()
        })
        .collect();
    let noisy = sensitivity(&train(&src, &tgt, 0.05, &dir.path().join("noisy")), &probes);
    let clean = sensitivity(&train(&src, &tgt, 0.0, &dir.path().join("clean")), &probes);
    assert!(noisy < clean, "sensitivity with noise {noisy:.5} vs without {clean:.5}");
}
