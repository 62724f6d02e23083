//! Downstream evaluation: pretrain a recognizer on synthetic words,
//! fine-tune it on growing subsets of a labeled corpus, and compare its
//! CER/WER against a randomly initialized and an externally pretrained
//! recognizer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use plotters::prelude::*;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container};
use crate::corpus::{crop_word_tensor, DocumentSample, Domain};
use crate::ctc::{cer_wer, greedy_decode, Alphabet, LabelSeq, MetricPair};
use crate::losses::{mean_ctc, scalar};
use crate::manifest::Manifest;
use crate::nets::{BnMode, Recognizer, RecognizerConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::stream;
use crate::{Error, Result};

pub const SUBSET_GRID: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

/// `syn`: pretrained on synthetic words; `base`: random initialization;
/// `ext`: pretrained on an external labeled corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Syn,
    Base,
    Ext,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Syn => "syn",
            ModelTag::Base => "base",
            ModelTag::Ext => "ext",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub model_tag: ModelTag,
    pub subset_frac: f64,
    pub split: Split,
    pub metrics: MetricPair,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub recognizer_width: usize,
    pub recognizer_hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_max_epochs: usize,
    pub pretrain_patience: usize,
    pub finetune_max_epochs: usize,
    pub finetune_patience: usize,
    /// Caps optimizer steps per epoch; `None` walks the whole training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps_per_epoch: Option<usize>,
    pub subsets: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recognizer_width: 16,
            recognizer_hidden: 64,
            batch_size: 8,
            lr: 1e-3,
            pretrain_max_epochs: 40,
            pretrain_patience: 5,
            finetune_max_epochs: 30,
            finetune_patience: 5,
            max_steps_per_epoch: None,
            subsets: SUBSET_GRID.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.recognizer_width == 0 || self.recognizer_hidden == 0 {
            return Err(Error::Config("batch size and recognizer sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.pretrain_patience == 0 || self.finetune_patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(f) = self.subsets.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("subset fraction {f} outside (0, 1]")));
        }
        Ok(())
    }

    fn recognizer(&self, classes: usize) -> RecognizerConfig {
        RecognizerConfig {
            width: self.recognizer_width,
            hidden: self.recognizer_hidden,
            classes,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Identity of one word instance: its record and box index in a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordId {
    pub record: usize,
    pub word: usize,
}

#[derive(Debug, Clone)]
pub struct WordSample {
    pub id: WordId,
    /// `1×32×128` in `[0,1]`.
    pub image: Tensor,
    pub text: String,
}

/// Crops every non-drop-cap word box of `manifest`. Works for page
/// manifests and for word manifests whose single box spans the crop.
pub fn load_word_samples(manifest: &Manifest) -> Result<Vec<WordSample>> {
    let mut out = Vec::new();
    for record in 0..manifest.len() {
        let doc = DocumentSample::load(manifest, record, Domain::Source)?;
        let page = doc.image.to_tensor(&candle_core::Device::Cpu)?;
        for (word, w) in doc.words.iter().enumerate() {
            if w.drop_cap {
                continue;
            }
            out.push(WordSample {
                id: WordId { record, word },
                image: crop_word_tensor(&page, &w.bbox)?,
                text: w.text.clone(),
            });
        }
    }
    Ok(out)
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into `floor(val·n)` validation,
/// `floor(test·n)` test and the remaining training indices.
pub fn split_indices(n: usize, val: f64, test: f64, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "word-split", 0));
    let nv = (val * n as f64).floor() as usize;
    let nt = (test * n as f64).floor() as usize;
    let mut validation = order[..nv].to_vec();
    let mut test = order[nv..nv + nt].to_vec();
    let mut train = order[nv + nt..].to_vec();
    for v in [&mut train, &mut validation, &mut test] {
        v.sort_unstable();
    }
    Splits {
        train,
        validation,
        test,
    }
}

/// Fails unless the three splits share no word instance.
pub fn check_disjoint(samples: &[WordSample], splits: &Splits) -> Result<()> {
    let ids = |v: &[usize]| -> BTreeSet<WordId> { v.iter().map(|&i| samples[i].id).collect() };
    let (a, b, c) = (ids(&splits.train), ids(&splits.validation), ids(&splits.test));
    let sizes = a.len() + b.len() + c.len();
    if sizes != splits.train.len() + splits.validation.len() + splits.test.len()
        || !a.is_disjoint(&b)
        || !a.is_disjoint(&c)
        || !b.is_disjoint(&c)
    {
        return Err(Error::InvalidArgument("train, validation and test splits overlap".into()));
    }
    Ok(())
}

/// A labeled word corpus with its 70/15/15 split.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub samples: Vec<WordSample>,
    pub splits: Splits,
}

impl LabeledData {
    pub fn new(samples: Vec<WordSample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("labeled corpus has no words".into()));
        }
        let splits = split_indices(samples.len(), 0.15, 0.15, seed);
        check_disjoint(&samples, &splits)?;
        Ok(LabeledData { samples, splits })
    }

    pub fn from_manifest(manifest: &Manifest, seed: u64) -> Result<Self> {
        LabeledData::new(load_word_samples(manifest)?, seed)
    }

    fn pick(&self, idx: &[usize]) -> Vec<&WordSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// Patience rule on a score where lower is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
            epochs: 0,
        }
    }

    /// Records one epoch's score; returns whether it is the new best.
    pub fn observe(&mut self, score: f64) -> bool {
        self.epochs += 1;
        if score < self.best || self.best_epoch.is_none() {
            self.best = score;
            self.best_epoch = Some(self.epochs - 1);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Best-path transcriptions of `samples`.
pub fn transcribe(rec: &Recognizer, alphabet: &Alphabet, samples: &[&WordSample], batch: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let crops = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>(), 0)?
            .to_dtype(rec.params().dtype())?;
        let logits = rec.forward(&crops, BnMode::Eval)?.to_dtype(DType::F32)?;
        for i in 0..chunk.len() {
            let rows: Vec<Vec<f32>> = logits.get(i)?.to_vec2()?;
            let t = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            let arr = ndarray::Array2::from_shape_vec((t, c), rows.concat()).expect("rectangular logits");
            out.push(alphabet.decode(&greedy_decode(arr.view())));
        }
    }
    Ok(out)
}

pub fn evaluate(rec: &Recognizer, alphabet: &Alphabet, samples: &[&WordSample], batch: usize) -> Result<MetricPair> {
    let hyps = transcribe(rec, alphabet, samples, batch)?;
    let refs: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    cer_wer(&refs, &hyps)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub steps: usize,
    pub best_validation: MetricPair,
    /// Validation CER after every epoch.
    pub history: Vec<f64>,
}

/// CTC training with per-epoch validation, early stopping and restoration of
/// the best-scoring weights.
#[allow(clippy::too_many_arguments)]
fn train_recognizer(
    rec: &Recognizer,
    alphabet: &Alphabet,
    train: &[&WordSample],
    validation: &[&WordSample],
    cfg: &EvalConfig,
    max_epochs: usize,
    patience: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let usable: Vec<(&WordSample, LabelSeq)> = train
        .iter()
        .filter_map(|s| alphabet.encode(&s.text).ok().map(|l| (*s, l)))
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no trainable words".into()));
    }
    let mut opt = Adam::new(rec.params().trainable(), cfg.adam())?;
    let mut stopper = EarlyStopping::new(patience);
    let mut best_state = rec.params().export()?;
    let mut best_metrics = None;
    let mut history = Vec::new();
    let mut steps = 0;
    for epoch in 0..max_epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut stream(seed, "recognizer-order", epoch as u64));
        let batches = order.chunks(cfg.batch_size);
        let limit = cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        for chunk in batches.take(limit) {
            let crops = Tensor::stack(&chunk.iter().map(|&i| usable[i].0.image.clone()).collect::<Vec<_>>(), 0)?
                .to_dtype(rec.params().dtype())?;
            let targets: Vec<LabelSeq> = chunk.iter().map(|&i| usable[i].1.clone()).collect();
            let term = mean_ctc(&(rec, BnMode::Train), &crops, &targets)?;
            if term.used > 0 && scalar(&term.loss)?.is_finite() {
                opt.step(&term.loss.backward()?)?;
            }
            steps += 1;
        }
        let metrics = evaluate(rec, alphabet, validation, cfg.batch_size.max(16))?;
        history.push(metrics.cer);
        if stopper.observe(metrics.cer) {
            best_state = rec.params().export()?;
            best_metrics = Some(metrics);
        }
        tracing::debug!(epoch, cer = metrics.cer, best = stopper.best(), "validation");
        if stopper.should_stop() {
            break;
        }
    }
    rec.params().import(&best_state.0, &best_state.1)?;
    Ok(TrainOutcome {
        epochs: history.len(),
        steps,
        best_validation: best_metrics.expect("at least one epoch"),
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerMeta {
    pub config: RecognizerConfig,
    pub alphabet: Alphabet,
    pub validation_cer: f64,
    pub seed: u64,
}

/// A standalone recognizer with its alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerCheckpoint {
    pub meta: RecognizerMeta,
    pub arrays: Vec<crate::nets::NamedArray>,
}

impl RecognizerCheckpoint {
    pub fn from_recognizer(rec: &Recognizer, alphabet: &Alphabet, validation_cer: f64, seed: u64) -> Result<Self> {
        let (params, buffers) = rec.params().export()?;
        let arrays = params
            .into_iter()
            .map(|a| crate::nets::NamedArray { name: format!("param/{}", a.name), ..a })
            .chain(buffers.into_iter().map(|a| crate::nets::NamedArray { name: format!("buffer/{}", a.name), ..a }))
            .collect();
        Ok(RecognizerCheckpoint {
            meta: RecognizerMeta {
                config: rec.config(),
                alphabet: alphabet.clone(),
                validation_cer,
                seed,
            },
            arrays,
        })
    }

    pub fn to_recognizer(&self) -> Result<Recognizer> {
        let rec = Recognizer::new(self.meta.config, DType::F32, &mut stream(0, "restore", 0))?;
        let strip = |prefix: &str| -> Vec<crate::nets::NamedArray> {
            self.arrays
                .iter()
                .filter_map(|a| {
                    a.name.strip_prefix(prefix).map(|n| crate::nets::NamedArray { name: n.to_string(), ..a.clone() })
                })
                .collect()
        };
        rec.params().import(&strip("param/"), &strip("buffer/"))?;
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path.as_ref(), &self.meta, &self.arrays)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, arrays) = read_container(path.as_ref())?;
        Ok(RecognizerCheckpoint { meta, arrays })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: RecognizerCheckpoint,
    pub train: TrainOutcome,
}

/// Trains a fresh recognizer on a word corpus, keeping the weights with the
/// best validation CER (85/15 split of the words).
pub fn pretrain_recognizer(samples: &[WordSample], cfg: &EvalConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus has no words".into()));
    }
    let alphabet = Alphabet::from_texts(&samples.iter().map(|s| s.text.as_str()).collect::<Vec<_>>());
    let split = split_indices(samples.len(), 0.15, 0.0, seed);
    let train: Vec<&WordSample> = split.train.iter().map(|&i| &samples[i]).collect();
    let mut validation: Vec<&WordSample> = split.validation.iter().map(|&i| &samples[i]).collect();
    if validation.is_empty() {
        validation = train.clone();
    }
    let rec = Recognizer::new(cfg.recognizer(alphabet.classes()), DType::F32, &mut stream(seed, "pretrain-init", 0))?;
    let outcome = train_recognizer(&rec, &alphabet, &train, &validation, cfg, cfg.pretrain_max_epochs, cfg.pretrain_patience, seed)?;
    tracing::info!(epochs = outcome.epochs, cer = outcome.best_validation.cer, "pretraining finished");
    Ok(PretrainOutcome {
        checkpoint: RecognizerCheckpoint::from_recognizer(&rec, &alphabet, outcome.best_validation.cer, seed)?,
        train: outcome,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub validation: EvalRecord,
    pub test: EvalRecord,
    pub subset_size: usize,
    /// Symbols added to the base alphabet for this subset.
    pub new_symbols: Vec<char>,
    pub train: TrainOutcome,
}

/// `floor(frac·n)` without float noise pushing exact products below an integer.
pub fn subset_size(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Fine-tunes `base` (or a fresh recognizer) on a seeded subset of the
/// training split and evaluates the best-on-validation weights.
pub fn finetune_and_eval(
    base: Option<&RecognizerCheckpoint>,
    data: &LabeledData,
    subset_frac: f64,
    seed: u64,
    tag: ModelTag,
    cfg: &EvalConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !cfg.subsets.iter().any(|&f| f == subset_frac) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {subset_frac} is not in the configured grid {:?}",
            cfg.subsets
        )));
    }
    check_disjoint(&data.samples, &data.splits)?;
    let n = subset_size(subset_frac, data.splits.train.len());
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "subset {subset_frac} of {} training words is empty",
            data.splits.train.len()
        )));
    }
    let mut rng = stream(seed, "finetune-subset", 0);
    let mut chosen: Vec<usize> = index::sample(&mut rng, data.splits.train.len(), n)
        .into_iter()
        .map(|k| data.splits.train[k])
        .collect();
    chosen.sort_unstable();
    let train = data.pick(&chosen);
    let subset_chars: BTreeSet<char> = train.iter().flat_map(|s| s.text.chars()).collect();

    let mut init_rng = stream(seed, "finetune-init", 0);
    let (rec, alphabet, new_symbols) = match base {
        Some(ck) => {
            let mut alphabet = ck.meta.alphabet.clone();
            let added = alphabet.extend(subset_chars);
            let rec = ck.to_recognizer()?;
            let rec = if added.is_empty() {
                rec
            } else {
                tracing::info!(symbols = ?added, "extending recognizer output for new symbols");
                rec.with_classes(alphabet.classes(), &mut init_rng)?
            };
            (rec, alphabet, added)
        }
        None => {
            let alphabet = Alphabet::from_chars(subset_chars);
            let rec = Recognizer::new(cfg.recognizer(alphabet.classes()), DType::F32, &mut init_rng)?;
            (rec, alphabet, Vec::new())
        }
    };
    let validation = data.pick(&data.splits.validation);
    let validation = if validation.is_empty() { train.clone() } else { validation };
    let outcome = train_recognizer(&rec, &alphabet, &train, &validation, cfg, cfg.finetune_max_epochs, cfg.finetune_patience, seed)?;
    let test = evaluate(&rec, &alphabet, &data.pick(&data.splits.test), 32)?;
    let record = |split, metrics| EvalRecord {
        model_tag: tag,
        subset_frac,
        split,
        metrics,
        seed,
    };
    Ok(FinetuneOutcome {
        validation: record(Split::Validation, outcome.best_validation),
        test: record(Split::Test, test),
        subset_size: n,
        new_symbols,
        train: outcome,
    })
}

/// Every (tag, subset, seed) cell of the protocol; two records per cell.
pub fn run_protocol(
    synthetic: Option<&RecognizerCheckpoint>,
    external: Option<&RecognizerCheckpoint>,
    data: &LabeledData,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    let mut models: Vec<(ModelTag, Option<&RecognizerCheckpoint>)> = Vec::new();
    if let Some(s) = synthetic {
        models.push((ModelTag::Syn, Some(s)));
    }
    models.push((ModelTag::Base, None));
    if let Some(e) = external {
        models.push((ModelTag::Ext, Some(e)));
    }
    let mut records = Vec::new();
    for &(tag, base) in &models {
        for &frac in &cfg.subsets {
            for &seed in &cfg.seeds {
                let out = finetune_and_eval(base, data, frac, seed, tag, cfg)?;
                tracing::info!(
                    tag = tag.as_str(),
                    subset = frac,
                    seed,
                    cer = out.test.metrics.cer,
                    wer = out.test.metrics.wer,
                    "cell finished"
                );
                records.push(out.validation);
                records.push(out.test);
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    model_tag: ModelTag,
    subset_frac: f64,
    seed: u64,
    split: Split,
    cer: f64,
    wer: f64,
    ref_chars: usize,
    ref_words: usize,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub csv: PathBuf,
    pub charts: Vec<PathBuf>,
    pub series: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Writes `results.csv` plus CER and WER line charts (median over seeds of
/// the test split, one series per model tag).
pub fn report(records: &[EvalRecord], out_dir: &Path) -> Result<ReportOutcome> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in records {
        w.serialize(ReportRow {
            model_tag: r.model_tag,
            subset_frac: r.subset_frac,
            seed: r.seed,
            split: r.split,
            cer: r.metrics.cer,
            wer: r.metrics.wer,
            ref_chars: r.metrics.ref_chars,
            ref_words: r.metrics.ref_words,
        })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let plotted: Vec<&EvalRecord> = if records.iter().any(|r| r.split == Split::Test) {
        records.iter().filter(|r| r.split == Split::Test).collect()
    } else {
        records.iter().collect()
    };
    let mut charts = Vec::new();
    let mut series = 0;
    for (name, pick) in [("cer", (|m: &MetricPair| m.cer) as fn(&MetricPair) -> f64), ("wer", |m| m.wer)] {
        let mut cells: BTreeMap<ModelTag, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for r in &plotted {
            // subset fractions keyed in millionths so they sort and group exactly
            let key = (r.subset_frac * 1e6).round() as u64;
            cells.entry(r.model_tag).or_default().entry(key).or_default().push(pick(&r.metrics));
        }
        let lines: Vec<(ModelTag, Vec<(f64, f64)>)> = cells
            .into_iter()
            .map(|(tag, by_frac)| {
                let pts = by_frac.into_iter().map(|(k, mut v)| (k as f64 / 1e6, median(&mut v))).collect();
                (tag, pts)
            })
            .collect();
        let path = out_dir.join(format!("{name}_vs_subset.svg"));
        draw_chart(&path, &name.to_uppercase(), &lines).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
        series = lines.len();
        charts.push(path);
    }
    Ok(ReportOutcome {
        csv: csv_path,
        charts,
        series,
    })
}

fn draw_chart(path: &Path, metric: &str, lines: &[(ModelTag, Vec<(f64, f64)>)]) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let ymax = lines
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(0.0f64, f64::max)
        .max(0.05)
        * 1.1;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("test {metric} vs. labeled subset"), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..1.05f64, 0f64..ymax)?;
    chart
        .configure_mesh()
        .x_desc("fraction of labeled training words")
        .y_desc(metric)
        .draw()?;
    let palette = [RGBColor(34, 139, 34), RGBColor(30, 90, 200), RGBColor(200, 60, 40)];
    for (tag, pts) in lines {
        let color = palette[*tag as usize % palette.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(tag.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 18, y + 4)], color.filled()));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Reads a report CSV back into records.
pub fn read_report(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ReportRow = row?;
        let edits = |rate: f64, n: usize| (rate * n as f64).round() as usize;
        out.push(EvalRecord {
            model_tag: r.model_tag,
            subset_frac: r.subset_frac,
            split: r.split,
            metrics: MetricPair::from_counts(edits(r.cer, r.ref_chars), r.ref_chars, edits(r.wer, r.ref_words), r.ref_words),
            seed: r.seed,
        });
    }
    Ok(out)
}
