//! Joint training of the six networks.
//!
//! One step updates, in order, the generators on the full objective, the
//! discriminators on their least-squares terms (against detached fakes), and
//! the recognizers on the reading terms (against detached crops). Every
//! random draw of step `s` comes from streams derived from `(seed, s)`, so a
//! run resumed from a checkpoint continues exactly like an uninterrupted one.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{add_gaussian_noise, crop_words, random_patch, DocumentSample, Domain, ImageF32, PatchSample};
use crate::ctc::{Alphabet, LabelSeq};
use crate::forge::WordGT;
use crate::losses::{
    adversarial_disc, adversarial_gen, combine, encode_words, l1, mean_ctc, reading_terms, scalar, LossReport,
    LossWeights,
};
use crate::manifest::Manifest;
use crate::nets::{BnMode, ModelBundle, ModelPreset};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Defaults to the number of source pages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<u64>,
    pub lr0: f64,
    pub decay_start_epoch: u64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub patch_size: usize,
    pub model: ModelPreset,
    /// Update T and T' on the reading terms. Off freezes them.
    pub train_recognizers: bool,
    /// T reads the noisy fake (true) or the clean one (false); F always
    /// receives the noisy fake.
    pub noise_on_reading: bool,
    pub exclude_drop_caps: bool,
    /// Optional recognizer warm-up on clean source crops before joint training.
    pub pretrain_recognizer_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            steps_per_epoch: None,
            lr0: 2e-4,
            decay_start_epoch: 100,
            weight_decay: 5e-5,
            betas: [0.5, 0.999],
            batch_size: 1,
            noise_sigma: 0.05,
            weights: LossWeights::default(),
            seed: 0,
            patch_size: 256,
            model: ModelPreset::Paper,
            train_recognizers: true,
            noise_on_reading: true,
            exclude_drop_caps: true,
            pretrain_recognizer_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.decay_start_epoch >= self.epochs {
            return fail(format!(
                "decay_start_epoch ({}) must be below epochs ({})",
                self.decay_start_epoch, self.epochs
            ));
        }
        if self.batch_size != 1 {
            return fail(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.weight_decay >= 0.0) {
            return fail("lr0 must be positive and weight_decay non-negative".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return fail(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.patch_size < 32 || self.patch_size % 4 != 0 {
            return fail(format!("patch_size must be a multiple of 4 and >= 32, got {}", self.patch_size));
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive".into());
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate for `epoch`: constant `lr0` before the decay start, then
/// linear to exactly zero at the last epoch.
pub fn lr_at(config: &TrainConfig, epoch: u64) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..={}",
            config.epochs
        )));
    }
    if epoch < config.decay_start_epoch {
        return Ok(config.lr0);
    }
    let remaining = (config.epochs - epoch) as f64;
    let span = (config.epochs - config.decay_start_epoch) as f64;
    Ok(config.lr0 * (remaining / span))
}

/// Everything the generator phase produces that later phases reuse.
struct GeneratorPass {
    total: Tensor,
    report: LossReport,
    fake_y: Tensor,
    fake_x: Tensor,
    read_input: Tensor,
    recovered_x: Tensor,
    words: Vec<WordGT>,
    targets: Vec<LabelSeq>,
}

pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    opt_gen: Adam,
    opt_disc: Adam,
    opt_rec: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

fn image_tensor(img: &ImageF32) -> Result<Tensor> {
    img.to_three_channels().to_tensor(&Device::Cpu)?.unsqueeze(0)
        .map_err(Error::from)
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let lr = lr_at(&config, 0)?;
        Ok(Trainer {
            opt_gen: Adam::new(bundle.generator_vars(), config.adam(lr))?,
            opt_disc: Adam::new(bundle.discriminator_vars(), config.adam(lr))?,
            opt_rec: Adam::new(bundle.recognizer_vars(), config.adam(lr))?,
            bundle,
            config,
            step: 0,
        })
    }

    pub fn set_epoch(&mut self, epoch: u64) -> Result<f64> {
        let lr = lr_at(&self.config, epoch)?;
        for opt in [&mut self.opt_gen, &mut self.opt_disc, &mut self.opt_rec] {
            opt.set_lr(lr);
        }
        Ok(lr)
    }

    pub fn lr(&self) -> f64 {
        self.opt_gen.lr()
    }

    fn usable_words(&self, patch: &PatchSample) -> (Vec<WordGT>, Vec<LabelSeq>) {
        let words: Vec<WordGT> = patch
            .contained_words
            .iter()
            .filter(|w| !(self.config.exclude_drop_caps && w.drop_cap))
            .cloned()
            .collect();
        encode_words(&self.bundle.alphabet, &words)
    }

    fn generator_pass(&self, x_patch: &PatchSample, y: &Tensor, noise_rng: &mut Rng) -> Result<GeneratorPass> {
        let b = &self.bundle;
        let w = self.config.weights;
        let x = image_tensor(&x_patch.image)?;

        let fake_y = b.g.forward(&x)?;
        let noisy = add_gaussian_noise(&fake_y, self.config.noise_sigma, noise_rng)?;
        let recovered_x = b.f.forward(&noisy)?;
        let fake_x = b.f.forward(y)?;
        let recovered_y = b.g.forward(&fake_x)?;

        let adv_g = adversarial_gen(&b.d_y, &fake_y)?;
        let adv_f = adversarial_gen(&b.d_x, &fake_x)?;
        let cyc = (l1(&recovered_x, &x)? + l1(&recovered_y, y)?)?;
        let id = if w.lambda_id > 0.0 {
            (l1(&b.g.forward(y)?, y)? + l1(&b.f.forward(&x)?, &x)?)?
        } else {
            Tensor::zeros((), x.dtype(), x.device())?
        };

        let (words, targets) = self.usable_words(x_patch);
        let read_input = if self.config.noise_on_reading { noisy } else { fake_y.clone() };
        let t = (&b.t, BnMode::TrainNoUpdate);
        let tp = (&b.t_prime, BnMode::TrainNoUpdate);
        let reading = reading_terms(&t, &tp, &read_input, &recovered_x, &words, &targets)?;

        let total = ((((&adv_g + &adv_f)? + (&cyc * w.lambda_cyc)?)? + (&id * w.lambda_id)?)?
            + ((&reading.read + &reading.read_recovered)? * w.lambda_read)?)?;

        let mut report = LossReport {
            adv_g: scalar(&adv_g)?,
            adv_f: scalar(&adv_f)?,
            cyc: scalar(&cyc)?,
            id: scalar(&id)?,
            read: scalar(&reading.read)?,
            read_recovered: scalar(&reading.read_recovered)?,
            words_seen: reading.words_seen,
            skipped_inf: reading.skipped_inf,
            ..LossReport::default()
        };
        report.total = combine(&report.parts(), &w);
        Ok(GeneratorPass {
            total,
            report,
            fake_y,
            fake_x,
            read_input,
            recovered_x,
            words,
            targets,
        })
    }

    /// Generator-side objective of one batch, without updating anything.
    pub fn generator_objective(&self, x_patch: &PatchSample, y: &ImageF32, noise_seed: u64) -> Result<LossReport> {
        let mut rng = stream(noise_seed, "objective", 0);
        Ok(self.generator_pass(x_patch, &image_tensor(y)?, &mut rng)?.report)
    }

    /// One optimizer step for each of {G, F}, {D_x, D_y} and {T, T'}.
    pub fn train_step(&mut self, x_patch: &PatchSample, y_image: &ImageF32, rng: &mut Rng) -> Result<LossReport> {
        let y = image_tensor(y_image)?;
        let x = image_tensor(&x_patch.image)?;
        let pass = self.generator_pass(x_patch, &y, rng)?;
        let mut report = pass.report;
        if !report.total.is_finite() {
            tracing::warn!(step = self.step, total = report.total, "non-finite generator objective, step skipped");
            self.step += 1;
            return Ok(report);
        }
        self.generator_update(&pass)?;
        (report.disc_x, report.disc_y) = self.discriminator_update(&x, &y, &pass)?;
        if self.config.train_recognizers {
            self.recognizer_update(&pass)?;
        }
        self.step += 1;
        Ok(report)
    }

    fn generator_update(&mut self, pass: &GeneratorPass) -> Result<()> {
        self.opt_gen.step(&pass.total.backward()?)
    }

    fn discriminator_update(&mut self, x: &Tensor, y: &Tensor, pass: &GeneratorPass) -> Result<(f64, f64)> {
        let b = &self.bundle;
        let disc_y = adversarial_disc(&b.d_y, y, &pass.fake_y)?;
        let disc_x = adversarial_disc(&b.d_x, x, &pass.fake_x)?;
        let values = (scalar(&disc_x)?, scalar(&disc_y)?);
        if values.0.is_finite() && values.1.is_finite() {
            self.opt_disc.step(&(disc_x + disc_y)?.backward()?)?;
        } else {
            tracing::warn!(step = self.step, "non-finite discriminator loss, update skipped");
        }
        Ok(values)
    }

    fn recognizer_update(&mut self, pass: &GeneratorPass) -> Result<()> {
        if pass.words.is_empty() {
            return Ok(());
        }
        let b = &self.bundle;
        let crops_fake = crop_words(&pass.read_input.detach().squeeze(0)?, &pass.words)?;
        let crops_rec = crop_words(&pass.recovered_x.detach().squeeze(0)?, &pass.words)?;
        let t = mean_ctc(&(&b.t, BnMode::Train), &crops_fake, &pass.targets)?;
        let tp = mean_ctc(&(&b.t_prime, BnMode::Train), &crops_rec, &pass.targets)?;
        if t.used + tp.used > 0 {
            let loss = (t.loss + tp.loss)?;
            if scalar(&loss)?.is_finite() {
                self.opt_rec.step(&loss.backward()?)?;
            }
        }
        Ok(())
    }

    /// One supervised recognizer step on clean crops of `patch`.
    pub fn pretrain_recognizers_step(&mut self, patch: &PatchSample) -> Result<Option<f64>> {
        let (words, targets) = self.usable_words(patch);
        if words.is_empty() {
            return Ok(None);
        }
        let crops = crop_words(&image_tensor(&patch.image)?.squeeze(0)?, &words)?;
        let t = mean_ctc(&(&self.bundle.t, BnMode::Train), &crops, &targets)?;
        let tp = mean_ctc(&(&self.bundle.t_prime, BnMode::Train), &crops, &targets)?;
        if t.used + tp.used == 0 {
            return Ok(None);
        }
        let loss = (t.loss + tp.loss)?;
        let value = scalar(&loss)?;
        self.opt_rec.step(&loss.backward()?)?;
        Ok(Some(value))
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_bundle(&self.bundle, self.step, epoch, self.config.seed)?;
        for (name, opt) in [("gen", &self.opt_gen), ("disc", &self.opt_disc), ("rec", &self.opt_rec)] {
            let (arrays, steps) = opt.export()?;
            ck.push(&format!("opt/{name}"), arrays);
            ck.meta.counters.insert(format!("opt/{name}"), steps);
        }
        Ok(ck)
    }

    /// Rebuilds a trainer, including optimizer moments, from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        if ck.meta.seed != config.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained with seed {} but the config says {}",
                ck.meta.seed, config.seed
            )));
        }
        if ck.meta.bundle != config.model.config() {
            return Err(Error::InvalidArgument("checkpoint architecture differs from the config's model".into()));
        }
        let mut trainer = Trainer::new(ck.to_bundle()?, config)?;
        for (name, opt) in [
            ("gen", &mut trainer.opt_gen),
            ("disc", &mut trainer.opt_disc),
            ("rec", &mut trainer.opt_rec),
        ] {
            let key = format!("opt/{name}");
            let steps = ck
                .meta
                .counters
                .get(&key)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no {key} state")))?;
            opt.import(&ck.take(&key), steps)?;
        }
        trainer.step = ck.meta.step;
        Ok(trainer)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub disc_x: f64,
    pub disc_y: f64,
    pub cyc: f64,
    pub id: f64,
    pub read: f64,
    pub read_rec: f64,
    pub total: f64,
    pub words_seen: usize,
    pub skipped_inf: usize,
}

impl MetricsRow {
    fn new(step: u64, epoch: u64, lr: f64, r: &LossReport) -> Self {
        MetricsRow {
            step,
            epoch,
            lr,
            adv_g: r.adv_g,
            adv_f: r.adv_f,
            disc_x: r.disc_x,
            disc_y: r.disc_y,
            cyc: r.cyc,
            id: r.id,
            read: r.read,
            read_rec: r.read_recovered,
            total: r.total,
            words_seen: r.words_seen,
            skipped_inf: r.skipped_inf,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        if rows.is_empty() {
            w.write_record([
                "step", "epoch", "lr", "adv_g", "adv_f", "disc_x", "disc_y", "cyc", "id", "read", "read_rec",
                "total", "words_seen", "skipped_inf",
            ])?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The patches consumed by global step `step`, derived only from the seed.
pub struct StepSampler {
    source: Manifest,
    target: Manifest,
    seed: u64,
    patch_size: usize,
    steps_per_epoch: u64,
    cache: HashMap<(Domain, usize), DocumentSample>,
    cache_pixels: usize,
}

const CACHE_PIXEL_BUDGET: usize = 64 << 20;

impl StepSampler {
    pub fn new(source: Manifest, target: Manifest, seed: u64, patch_size: usize, steps_per_epoch: u64) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidArgument("source and target manifests must not be empty".into()));
        }
        Ok(StepSampler {
            source,
            target,
            seed,
            patch_size,
            steps_per_epoch,
            cache: HashMap::new(),
            cache_pixels: 0,
        })
    }

    fn doc(&mut self, domain: Domain, index: usize) -> Result<DocumentSample> {
        if let Some(d) = self.cache.get(&(domain, index)) {
            return Ok(d.clone());
        }
        let manifest = match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        };
        let doc = DocumentSample::load(manifest, index, domain)?;
        let px = doc.image.data.len();
        if self.cache_pixels + px <= CACHE_PIXEL_BUDGET {
            self.cache_pixels += px;
            self.cache.insert((domain, index), doc.clone());
        }
        Ok(doc)
    }

    pub fn sample(&mut self, step: u64, tag: &str) -> Result<(PatchSample, ImageF32)> {
        let epoch = step / self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        order.shuffle(&mut stream(self.seed, &format!("{tag}-source-order"), epoch));
        let src = order[((step % self.steps_per_epoch) as usize) % order.len()];
        let tgt = stream(self.seed, &format!("{tag}-target-pick"), step).random_range(0..self.target.len());
        let x_doc = self.doc(Domain::Source, src)?;
        let y_doc = self.doc(Domain::Target, tgt)?;
        let x = random_patch(&x_doc, self.patch_size, &mut stream(self.seed, &format!("{tag}-x-patch"), step));
        let y = random_patch(&y_doc, self.patch_size, &mut stream(self.seed, &format!("{tag}-y-patch"), step));
        Ok((x, y.image))
    }
}

type Batch = Result<(u64, PatchSample, ImageF32)>;

/// Runs `sampler` for `steps` on a producer thread behind a bounded queue.
fn spawn_producer(mut sampler: StepSampler, steps: std::ops::Range<u64>, tag: &'static str) -> mpsc::Receiver<Batch> {
    let (tx, rx) = mpsc::sync_channel(8);
    thread::spawn(move || {
        for s in steps {
            let item = sampler.sample(s, tag).map(|(x, y)| (s, x, y));
            let failed = item.is_err();
            if tx.send(item).is_err() || failed {
                break;
            }
        }
    });
    rx
}

pub struct FitOutcome {
    pub trainer: Trainer,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub rows: Vec<MetricsRow>,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains for `epochs × steps_per_epoch` steps, checkpointing after every
/// epoch into `out_dir`. With `resume`, continues from that checkpoint.
pub fn fit(
    source: &Manifest,
    target: &Manifest,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let steps_per_epoch = config.steps_per_epoch.unwrap_or(source.len() as u64).max(1);
    let total_steps = config.epochs * steps_per_epoch;
    let metrics_path = out_dir.join("metrics.csv");

    let (mut trainer, start_epoch) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let start = ck.meta.epoch;
            if ck.meta.step != start * steps_per_epoch {
                return Err(Error::checkpoint(path, "step counter does not match the configured epoch length"));
            }
            (Trainer::from_checkpoint(&ck, config.clone())?, start)
        }
        None => {
            let alphabet = Alphabet::from_chars(source.charset());
            let bundle = ModelBundle::new(config.model.config(), alphabet, config.seed)?;
            (Trainer::new(bundle, config.clone())?, 0)
        }
    };

    let mut rows = if resume.is_some() && metrics_path.exists() {
        let start = trainer.step;
        read_metrics(&metrics_path)?.into_iter().filter(|r| r.step < start).collect()
    } else {
        Vec::new()
    };

    if resume.is_none() && config.pretrain_recognizer_steps > 0 {
        let sampler = StepSampler::new(source.clone(), target.clone(), config.seed, config.patch_size, steps_per_epoch)?;
        let rx = spawn_producer(sampler, 0..config.pretrain_recognizer_steps, "pretrain");
        for item in rx {
            let (_, x, _) = item?;
            trainer.pretrain_recognizers_step(&x)?;
        }
        tracing::info!(steps = config.pretrain_recognizer_steps, "recognizer warm-up finished");
    }

    let sampler = StepSampler::new(source.clone(), target.clone(), config.seed, config.patch_size, steps_per_epoch)?;
    let rx = spawn_producer(sampler, trainer.step..total_steps, "train");
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut checkpoints = Vec::new();

    let mut epoch = start_epoch;
    let mut lr = trainer.set_epoch(epoch)?;
    for item in rx {
        let (s, x, y) = item?;
        debug_assert_eq!(s, trainer.step);
        let mut rng = stream(config.seed, "train-noise", s);
        let report = trainer.train_step(&x, &y, &mut rng)?;
        rows.push(MetricsRow::new(s, epoch, lr, &report));
        if (s + 1) % steps_per_epoch == 0 {
            epoch += 1;
            let path = ckpt_dir.join(checkpoint_name(epoch));
            trainer.to_checkpoint(epoch)?.save(&path)?;
            write_metrics(&metrics_path, &rows)?;
            tracing::info!(epoch, step = s + 1, total = report.total, cyc = report.cyc, "epoch finished");
            checkpoints.push(path);
            if epoch < config.epochs {
                lr = trainer.set_epoch(epoch)?;
            }
        }
    }
    if trainer.step != total_steps {
        return Err(Error::InvalidArgument(format!(
            "training stopped at step {} of {total_steps}",
            trainer.step
        )));
    }
    write_metrics(&metrics_path, &rows)?;
    Ok(FitOutcome {
        trainer,
        checkpoints,
        metrics: metrics_path,
        rows,
    })
}
