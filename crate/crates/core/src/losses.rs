//! Loss terms of the reading-aware cycle-consistent objective.
//!
//! Every function returns scalar tensors so callers can backpropagate; the
//! `*_value` helpers and [`combine`] work on plain numbers for reporting.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{add_gaussian_noise, crop_words, PatchSample};
use crate::ctc::{ctc_loss_tensor, Alphabet, LabelSeq};
use crate::forge::WordGT;
use crate::nets::{BnMode, Discriminator, Generator, Recognizer};
use crate::{Error, Result};

/// Anything that maps an `N×3×H×W` image batch to another one.
pub trait ImageTranslator {
    fn translate(&self, x: &Tensor) -> Result<Tensor>;
}

impl ImageTranslator for Generator {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> ImageTranslator for F {
    fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Anything that scores an image batch with a patch map.
pub trait PatchCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor>;
}

impl PatchCritic for Discriminator {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> PatchCritic for F {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Anything that turns `N×1×32×128` crops into `N×T×C` logits.
pub trait WordReader {
    fn read(&self, crops: &Tensor) -> Result<Tensor>;
}

impl WordReader for (&Recognizer, BnMode) {
    fn read(&self, crops: &Tensor) -> Result<Tensor> {
        self.0.forward(crops, self.1)
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> WordReader for F {
    fn read(&self, crops: &Tensor) -> Result<Tensor> {
        self(crops)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_read: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            lambda_read: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("lambda_read", self.lambda_read),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The generator-side terms that enter the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub id: f64,
    pub read: f64,
    pub read_recovered: f64,
}

pub fn combine(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.adv_g
        + parts.adv_f
        + w.lambda_cyc * parts.cyc
        + w.lambda_id * parts.id
        + w.lambda_read * (parts.read + parts.read_recovered)
}

/// One row of training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_f: f64,
    pub disc_x: f64,
    pub disc_y: f64,
    pub cyc: f64,
    pub id: f64,
    pub read: f64,
    pub read_recovered: f64,
    pub total: f64,
    pub words_seen: usize,
    pub skipped_inf: usize,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            adv_g: self.adv_g,
            adv_f: self.adv_f,
            cyc: self.cyc,
            id: self.id,
            read: self.read,
            read_recovered: self.read_recovered,
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.adv_g,
            self.adv_f,
            self.disc_x,
            self.disc_y,
            self.cyc,
            self.id,
            self.read,
            self.read_recovered,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute error.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.dims()),
            got: format!("{:?}", b.dims()),
        });
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `L1(G(y), y) + L1(F(x), x)`: each generator applied to its own output domain.
pub fn identity_loss(g: &impl ImageTranslator, f: &impl ImageTranslator, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok((l1(&g.translate(y)?, y)? + l1(&f.translate(x)?, x)?)?)
}

/// `L1(F(G(x)), x) + L1(G(F(y)), y)`.
pub fn cycle_loss(g: &impl ImageTranslator, f: &impl ImageTranslator, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let fwd = l1(&f.translate(&g.translate(x)?)?, x)?;
    let bwd = l1(&g.translate(&f.translate(y)?)?, y)?;
    Ok((fwd + bwd)?)
}

/// Least-squares generator term `mean((D(fake) - 1)^2)`.
pub fn adversarial_gen(d: &impl PatchCritic, fake: &Tensor) -> Result<Tensor> {
    Ok((d.score(fake)? - 1.0)?.sqr()?.mean_all()?)
}

/// Least-squares critic term `mean((D(real) - 1)^2) + mean(D(fake)^2)` with
/// the fake detached from the generator.
pub fn adversarial_disc(d: &impl PatchCritic, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (d.score(real)? - 1.0)?.sqr()?.mean_all()?;
    let f = d.score(&fake.detach())?.sqr()?.mean_all()?;
    Ok((r + f)?)
}

/// `(gen_term, disc_term)` for one critic.
pub fn adversarial_losses(d: &impl PatchCritic, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((adversarial_gen(d, fake)?, adversarial_disc(d, real, fake)?))
}

/// Mean CTC loss over one crop batch and the number of infinite instances
/// that were excluded from it.
pub struct ReadTerm {
    pub loss: Tensor,
    pub used: usize,
    pub skipped_inf: usize,
}

/// Mean finite CTC loss of `reader` over `crops` against `targets`. With no
/// finite instance the term is a zero tensor that still depends on nothing.
pub fn mean_ctc(reader: &impl WordReader, crops: &Tensor, targets: &[LabelSeq]) -> Result<ReadTerm> {
    let logits = reader.read(crops)?;
    let losses = ctc_loss_tensor(&logits, targets)?;
    let values: Vec<f64> = losses.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let keep: Vec<u32> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, _)| i as u32)
        .collect();
    let skipped_inf = values.len() - keep.len();
    if keep.is_empty() {
        return Ok(ReadTerm {
            loss: Tensor::zeros((), logits.dtype(), logits.device())?,
            used: 0,
            skipped_inf,
        });
    }
    let idx = Tensor::new(keep.as_slice(), logits.device())?;
    Ok(ReadTerm {
        loss: losses.index_select(&idx, 0)?.mean(D::Minus1)?,
        used: keep.len(),
        skipped_inf,
    })
}

/// Both reading terms for one patch.
pub struct ReadingOutcome {
    pub read: Tensor,
    pub read_recovered: Tensor,
    pub words_seen: usize,
    pub skipped_inf: usize,
}

impl ReadingOutcome {
    fn empty(like: &Tensor) -> Result<Self> {
        let z = Tensor::zeros((), like.dtype(), like.device())?;
        Ok(ReadingOutcome {
            read: z.clone(),
            read_recovered: z,
            words_seen: 0,
            skipped_inf: 0,
        })
    }
}

/// Encodes words for CTC, dropping those with symbols outside the alphabet.
pub fn encode_words(alphabet: &Alphabet, words: &[WordGT]) -> (Vec<WordGT>, Vec<LabelSeq>) {
    words
        .iter()
        .filter_map(|w| alphabet.encode(&w.text).ok().map(|l| (w.clone(), l)))
        .unzip()
}

/// Reading terms from already-computed images. `fake` is what `T` reads and
/// `recovered` what `T'` reads, both `1×3×H×W` in patch coordinates.
pub fn reading_terms(
    t: &impl WordReader,
    t_prime: &impl WordReader,
    fake: &Tensor,
    recovered: &Tensor,
    words: &[WordGT],
    targets: &[LabelSeq],
) -> Result<ReadingOutcome> {
    if words.is_empty() {
        return ReadingOutcome::empty(fake);
    }
    let read = mean_ctc(t, &crop_words(&fake.squeeze(0)?, words)?, targets)?;
    let rec = mean_ctc(t_prime, &crop_words(&recovered.squeeze(0)?, words)?, targets)?;
    Ok(ReadingOutcome {
        read: read.loss,
        read_recovered: rec.loss,
        words_seen: words.len(),
        skipped_inf: read.skipped_inf + rec.skipped_inf,
    })
}

/// Reading loss for one source patch: `T` reads the noisy fake `G(x) + η`
/// and `T'` reads the reconstruction `F(G(x) + η)`, both against the patch
/// transcripts. `noise_on_reading = false` lets `T` see the clean fake while
/// `F` still receives the noisy one.
#[allow(clippy::too_many_arguments)]
pub fn reading_loss<R: rand::Rng + ?Sized>(
    t: &impl WordReader,
    t_prime: &impl WordReader,
    patch: &PatchSample,
    alphabet: &Alphabet,
    g: &impl ImageTranslator,
    f: &impl ImageTranslator,
    noise_sigma: f64,
    noise_on_reading: bool,
    rng: &mut R,
) -> Result<ReadingOutcome> {
    let x = patch.image.to_three_channels().to_tensor(&candle_core::Device::Cpu)?.unsqueeze(0)?;
    let (words, targets) = encode_words(alphabet, &patch.contained_words);
    if words.is_empty() {
        return ReadingOutcome::empty(&x);
    }
    let fake = g.translate(&x)?;
    let noisy = add_gaussian_noise(&fake, noise_sigma, rng)?;
    let recovered = f.translate(&noisy)?;
    let seen_by_t = if noise_on_reading { &noisy } else { &fake };
    reading_terms(t, t_prime, seen_by_t, &recovered, &words, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageF32;
    use crate::forge::BBox;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    fn full(v: f64, shape: &[usize]) -> Tensor {
        Tensor::full(v as f32, shape, &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    fn id(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    #[test]
    fn identity_loss_examples() {
        let x = full(0.3, &[1, 3, 8, 8]);
        let y = full(1.0, &[1, 3, 8, 8]);
        assert_eq!(v(&identity_loss(&id, &id, &x, &y).unwrap()), 0.0);
        let zero = |x: &Tensor| Ok(x.zeros_like()?);
        // G(y) = 0 against y = 1 contributes 1; F is exact
        assert_eq!(v(&identity_loss(&zero, &id, &x, &y).unwrap()), 1.0);
    }

    #[test]
    fn adversarial_examples() {
        let real = full(1.0, &[1, 3, 8, 8]);
        let fake = full(0.0, &[1, 3, 8, 8]);
        // critic answers 1 on real (mean 1) and 0 on fake (mean 0)
        let perfect = |x: &Tensor| Ok(x.mean_keepdim(1)?);
        let (g, d) = adversarial_losses(&perfect, &real, &fake).unwrap();
        assert_eq!((v(&g), v(&d)), (1.0, 0.0));
        let half = |x: &Tensor| Ok((x.mean_keepdim(1)?.zeros_like()? + 0.5)?);
        let (g, d) = adversarial_losses(&half, &real, &fake).unwrap();
        assert_eq!((v(&g), v(&d)), (0.25, 0.5));
    }

    #[test]
    fn cycle_loss_examples() {
        let x = full(0.5, &[1, 3, 8, 8]);
        assert_eq!(v(&cycle_loss(&id, &id, &x, &x).unwrap()), 0.0);
        let shift = |t: &Tensor| Ok((t + 0.1)?);
        let back = |t: &Tensor| Ok(t.clone());
        // F∘G and G∘F both off by 0.1
        let c = v(&cycle_loss(&shift, &back, &x, &x).unwrap());
        assert!((c - 0.2).abs() < 1e-6);
        let half = |t: &Tensor| -> Result<Tensor> { Ok((t.zeros_like()? + 0.5)?) };
        assert_eq!(v(&l1(&half(&half(&x).unwrap()).unwrap(), &x).unwrap()), 0.0);
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        let ones = LossParts {
            adv_g: 1.0,
            adv_f: 1.0,
            cyc: 1.0,
            id: 1.0,
            read: 1.0,
            read_recovered: 1.0,
        };
        assert_eq!(combine(&ones, &w), 19.0);
        assert_eq!(combine(&LossParts::default(), &w), 0.0);
        let plain = LossWeights { lambda_read: 0.0, ..w };
        assert_eq!(combine(&LossParts { read: 7.0, ..ones }, &plain), 1.0 + 1.0 + 10.0 + 5.0);
        assert!(LossWeights { lambda_id: -1.0, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn combine_is_linear_in_each_part(base in proptest::array::uniform6(0.0f64..5.0), which in 0usize..6, delta in 0.0f64..3.0) {
            let w = LossWeights::default();
            let mk = |a: [f64; 6]| LossParts { adv_g: a[0], adv_f: a[1], cyc: a[2], id: a[3], read: a[4], read_recovered: a[5] };
            let coef = [1.0, 1.0, 10.0, 5.0, 1.0, 1.0];
            let mut bumped = base;
            bumped[which] += delta;
            let diff = combine(&mk(bumped), &w) - combine(&mk(base), &w);
            prop_assert!((diff - coef[which] * delta).abs() < 1e-9);
        }
    }

    fn word(text: &str, x: u32) -> WordGT {
        WordGT {
            text: text.into(),
            bbox: BBox::new(x, 2, 20, 10),
            line_index: 0,
            order_index: 0,
            drop_cap: false,
        }
    }

    /// A reader whose logits for sample i are fixed, so its CTC loss is known.
    fn scripted(losses_per_sample: Vec<Tensor>) -> impl Fn(&Tensor) -> Result<Tensor> {
        move |crops: &Tensor| {
            let n = crops.dim(0)?;
            Ok(Tensor::stack(&losses_per_sample[..n], 0)?)
        }
    }

    #[test]
    fn reading_term_is_the_mean_over_words() {
        // Uniform logits over 2 classes for T steps: p(path) = 2^-T; the label
        // "a" (index 1) has exactly T alignment paths... computed by the CTC
        // module itself, so compare against its scalar output instead.
        let a = Alphabet::from_chars("ab".chars());
        let patch = full(1.0, &[1, 3, 16, 48]);
        let words = vec![word("a", 0), word("ab", 24)];
        let (words, targets) = encode_words(&a, &words);
        let l0 = Tensor::zeros((32, 3), DType::F32, &Device::Cpu).unwrap();
        let mut l1t = Tensor::zeros((32, 3), DType::F32, &Device::Cpu).unwrap();
        l1t = (l1t + 0.3).unwrap();
        let reader = scripted(vec![l0.clone(), l1t.clone()]);
        let out = reading_terms(&reader, &reader, &patch, &patch, &words, &targets).unwrap();
        let single = |l: &Tensor, t: &LabelSeq| {
            let d: Vec<Vec<f32>> = l.to_vec2().unwrap();
            let arr = ndarray::Array2::from_shape_fn((32, 3), |(i, j)| d[i][j] as f64);
            crate::ctc::ctc_loss(arr.view(), t).unwrap().loss
        };
        let expect = (single(&l0, &targets[0]) + single(&l1t, &targets[1])) / 2.0;
        assert!((v(&out.read) - expect).abs() < 1e-4);
        assert_eq!(out.words_seen, 2);

        // swapping word order does not change the mean
        let rev_reader = scripted(vec![l1t, l0]);
        let words_r: Vec<_> = words.iter().rev().cloned().collect();
        let targets_r: Vec<_> = targets.iter().rev().cloned().collect();
        let out_r = reading_terms(&rev_reader, &rev_reader, &patch, &patch, &words_r, &targets_r).unwrap();
        assert!((v(&out_r.read) - v(&out.read)).abs() < 1e-6);
    }

    #[test]
    fn empty_patch_reads_zero() {
        let a = Alphabet::from_chars("ab".chars());
        let patch = PatchSample {
            image: ImageF32::filled(1, 32, 32, 1.0),
            contained_words: vec![],
            origin: (0, 0, 0),
        };
        let never = |_: &Tensor| -> Result<Tensor> { panic!("reader must not run") };
        let mut r = crate::rng::stream(0, "t", 0);
        let out = reading_loss(&never, &never, &patch, &a, &id, &id, 0.05, true, &mut r).unwrap();
        assert_eq!((v(&out.read), v(&out.read_recovered), out.words_seen), (0.0, 0.0, 0));
    }

    #[test]
    fn infinite_instances_are_excluded_and_counted() {
        let a = Alphabet::from_chars("ab".chars());
        let long = "ab".repeat(20); // 40 symbols > 32 steps
        let words = vec![word("a", 0), word(&long, 24)];
        let (words, targets) = encode_words(&a, &words);
        let patch = full(1.0, &[1, 3, 16, 48]);
        let reader = |c: &Tensor| Ok(Tensor::zeros((c.dim(0)?, 32, 3), DType::F32, &Device::Cpu)?);
        let out = reading_terms(&reader, &reader, &patch, &patch, &words, &targets).unwrap();
        assert!(v(&out.read).is_finite());
        assert_eq!(out.skipped_inf, 2);
        let one = mean_ctc(&reader, &crop_words(&patch.squeeze(0).unwrap(), &words[..1]).unwrap(), &targets[..1]).unwrap();
        assert!((v(&out.read) - v(&one.loss)).abs() < 1e-6);
    }

    #[test]
    fn perfect_reader_has_near_zero_loss() {
        let a = Alphabet::from_chars("ab".chars());
        let (words, targets) = encode_words(&a, &[word("ab", 0)]);
        let patch = full(1.0, &[1, 3, 16, 32]);
        let reader = |_: &Tensor| {
            let mut m = vec![-50f32; 32 * 3];
            m[1] = 50.0;
            for t in 1..32 {
                m[t * 3 + 2] = 50.0;
            }
            Ok(Tensor::from_vec(m, (1, 32, 3), &Device::Cpu)?)
        };
        let out = reading_terms(&reader, &reader, &patch, &patch, &words, &targets).unwrap();
        assert!(v(&out.read) < 1e-6);
    }

    #[test]
    fn disc_term_does_not_reach_the_generator() {
        let w = Var::from_tensor(&full(0.7, &[1])).unwrap();
        let x = full(0.5, &[1, 3, 8, 8]);
        let fake = x.broadcast_mul(w.as_tensor()).unwrap();
        let c = Var::from_tensor(&full(2.0, &[1])).unwrap();
        let critic = |t: &Tensor| Ok(t.mean_keepdim(1)?.broadcast_mul(c.as_tensor())?);
        let (gen, disc) = adversarial_losses(&critic, &x, &fake).unwrap();
        let gd = disc.backward().unwrap();
        assert!(gd.get(w.as_tensor()).is_none());
        assert!(gd.get(c.as_tensor()).is_some());
        let gg = gen.backward().unwrap();
        assert!(gg.get(w.as_tensor()).is_some());
    }
}
