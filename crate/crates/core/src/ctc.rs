//! Connectionist temporal classification and the edit-distance metrics used
//! to score recognizers.
//!
//! Class 0 is the blank; label symbols are `1..=A`. The loss runs the
//! forward-backward recursions over the blank-interleaved label entirely in
//! log space and returns the analytic gradient with respect to the raw
//! (pre-softmax) logits.

use std::collections::BTreeSet;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BLANK: usize = 0;

/// A non-empty target sequence of alphabet indices (blank excluded).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(symbols: Vec<usize>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("label sequence must not be empty".into()));
        }
        if symbols.contains(&BLANK) {
            return Err(Error::InvalidArgument("label sequence must not contain the blank".into()));
        }
        Ok(LabelSeq(symbols))
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum number of time steps any alignment needs: one per symbol plus
    /// one separating blank per adjacent repeat.
    pub fn min_steps(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Ordered symbol set; symbol `i` of the list has class index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.symbols.into_iter().collect()
    }
}

impl From<String> for Alphabet {
    fn from(s: String) -> Alphabet {
        Alphabet::from_chars(s.chars())
    }
}

impl Alphabet {
    /// Sorted, de-duplicated alphabet over `chars`.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Alphabet {
            symbols: set.into_iter().collect(),
        }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::from_chars(texts.iter().flat_map(|t| t.as_ref().chars().collect::<Vec<_>>()))
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Number of symbols, excluding the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Output classes of a recognizer over this alphabet (symbols + blank).
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        let symbols = text
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("symbol {c:?} is not in the alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSeq::new(symbols)
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter_map(|&i| i.checked_sub(1).and_then(|j| self.symbols.get(j)))
            .collect()
    }

    /// Appends symbols not yet present, keeping existing indices stable.
    /// Returns the newly added symbols.
    pub fn extend(&mut self, chars: impl IntoIterator<Item = char>) -> Vec<char> {
        let new: BTreeSet<char> = chars.into_iter().filter(|c| !self.symbols.contains(c)).collect();
        self.symbols.extend(new.iter().copied());
        new.into_iter().collect()
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Loss and gradient for one sequence.
#[derive(Debug, Clone)]
pub struct CtcOutcome {
    /// `-ln p(target | logits)`; `+inf` when no alignment exists.
    pub loss: f64,
    /// `d loss / d logits`, shape `steps×classes`; all zeros when infeasible.
    pub grad: Array2<f64>,
    pub feasible: bool,
}

/// CTC negative log-likelihood of `target` under per-step softmax of `logits`
/// (`steps×classes`, class 0 = blank).
pub fn ctc_loss(logits: ArrayView2<f64>, target: &LabelSeq) -> Result<CtcOutcome> {
    let (steps, classes) = logits.dim();
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least one symbol besides the blank".into()));
    }
    if let Some(&bad) = target.symbols().iter().find(|&&s| s >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if steps < target.min_steps() {
        return Ok(CtcOutcome {
            loss: f64::INFINITY,
            grad: Array2::zeros((steps, classes)),
            feasible: false,
        });
    }

    let lp = log_softmax_rows(logits);
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &s in target.symbols() {
        ext.push(s);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = Array2::from_elem((steps, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    alpha[[0, 1]] = lp[[0, ext[1]]];
    for t in 1..steps {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + lp[[t, ext[s]]];
        }
    }
    let log_likelihood = log_add(alpha[[steps - 1, s_len - 1]], alpha[[steps - 1, s_len - 2]]);
    if !log_likelihood.is_finite() {
        return Ok(CtcOutcome {
            loss: f64::INFINITY,
            grad: Array2::zeros((steps, classes)),
            feasible: false,
        });
    }

    // beta[t][s]: log-probability of emitting the rest of the label after
    // step t given state s at step t (emission at t excluded).
    let mut beta = Array2::from_elem((steps, s_len), f64::NEG_INFINITY);
    beta[[steps - 1, s_len - 1]] = 0.0;
    beta[[steps - 1, s_len - 2]] = 0.0;
    for t in (0..steps - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]] + lp[[t + 1, ext[s]]];
            if s + 1 < s_len {
                b = log_add(b, beta[[t + 1, s + 1]] + lp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[[t + 1, s + 2]] + lp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = b;
        }
    }

    let mut grad = lp.mapv(f64::exp);
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..steps {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[[t, s]] + beta[[t, s]]);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            if occ != f64::NEG_INFINITY {
                grad[[t, k]] -= (occ - log_likelihood).exp();
            }
        }
    }

    Ok(CtcOutcome {
        loss: -log_likelihood,
        grad,
        feasible: true,
    })
}

/// Best-path decoding: per-step argmax, merge repeats, drop blanks.
pub fn greedy_decode<T: PartialOrd + Copy>(logits: ArrayView2<T>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.rows() {
        let mut best = 0usize;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level character and word error rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub cer: f64,
    pub wer: f64,
    pub edits_char: usize,
    pub edits_word: usize,
    pub ref_chars: usize,
    pub ref_words: usize,
}

impl MetricPair {
    pub fn from_counts(edits_char: usize, ref_chars: usize, edits_word: usize, ref_words: usize) -> Self {
        let ratio = |e: usize, n: usize| if n == 0 { 0.0 } else { e as f64 / n as f64 };
        MetricPair {
            cer: ratio(edits_char, ref_chars),
            wer: ratio(edits_word, ref_words),
            edits_char,
            edits_word,
            ref_chars,
            ref_words,
        }
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Micro-averaged CER and WER: total edits over total reference length.
/// Words are the non-empty pieces of a split on single spaces.
pub fn cer_wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<MetricPair> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let (mut ec, mut rc, mut ew, mut rw) = (0, 0, 0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (r.as_ref(), h.as_ref());
        let rch: Vec<char> = r.chars().collect();
        let hch: Vec<char> = h.chars().collect();
        ec += edit_distance(&rch, &hch);
        rc += rch.len();
        let (rwords, hwords) = (words(r), words(h));
        ew += edit_distance(&rwords, &hwords);
        rw += rwords.len();
    }
    if rc == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(MetricPair::from_counts(ec, rc, ew, rw))
}

/// Batched CTC over an `N×T×C` logits tensor, differentiable through candle's
/// autograd. The gradient is the analytic one from [`ctc_loss`].
struct CtcBatchOp {
    targets: Vec<LabelSeq>,
}

impl CtcBatchOp {
    fn outcomes(&self, data: &[f64], n: usize, t: usize, c: usize) -> candle_core::Result<Vec<CtcOutcome>> {
        (0..n)
            .map(|i| {
                let view = ArrayView2::from_shape((t, c), &data[i * t * c..(i + 1) * t * c])
                    .map_err(candle_core::Error::wrap)?;
                ctc_loss(view, &self.targets[i]).map_err(candle_core::Error::wrap)
            })
            .collect()
    }
}

fn storage_to_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("ctc input must be contiguous".into()))?;
    match storage {
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        _ => Err(candle_core::Error::Msg("ctc supports f32 and f64 logits only".into())),
    }
}

impl CustomOp1 for CtcBatchOp {
    fn name(&self) -> &'static str {
        "ctc-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, t, c) = layout.shape().dims3()?;
        let data = storage_to_f64(storage, layout)?;
        let losses: Vec<f64> = self.outcomes(&data, n, t, c)?.iter().map(|o| o.loss).collect();
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(losses.iter().map(|&l| l as f32).collect()),
            _ => CpuStorage::F64(losses),
        };
        Ok((out, Shape::from(n)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, t, c) = arg.dims3()?;
        let data: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let upstream: Vec<f64> = grad_res.to_dtype(DType::F64)?.to_vec1()?;
        let mut grad = Vec::with_capacity(n * t * c);
        for (o, g) in self.outcomes(&data, n, t, c)?.iter().zip(upstream) {
            // excluded (infinite) entries receive a zero upstream gradient and
            // carry an all-zero local gradient, so no inf * 0 arises here
            grad.extend(o.grad.iter().map(|&d| if g == 0.0 { 0.0 } else { d * g }));
        }
        Ok(Some(Tensor::from_vec(grad, (n, t, c), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Per-sample CTC losses (`N`) for `N×T×C` logits; `+inf` marks infeasible
/// targets.
pub fn ctc_loss_tensor(logits: &Tensor, targets: &[LabelSeq]) -> Result<Tensor> {
    let (n, _, _) = logits.dims3()?;
    if n != targets.len() {
        return Err(Error::Shape {
            expected: format!("{} targets", n),
            got: format!("{} targets", targets.len()),
        });
    }
    Ok(logits.contiguous()?.apply_op1(CtcBatchOp {
        targets: targets.to_vec(),
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn probs_to_logits(p: &[&[f64]]) -> Array2<f64> {
        let rows = p.len();
        let cols = p[0].len();
        Array2::from_shape_fn((rows, cols), |(t, k)| p[t][k].ln())
    }

    #[test]
    fn single_step_single_symbol() {
        let logits = probs_to_logits(&[&[0.3, 0.7]]);
        let out = ctc_loss(logits.view(), &LabelSeq::new(vec![1]).unwrap()).unwrap();
        assert!((out.loss - -(0.7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_steps_enumerates_three_alignments() {
        let p = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let logits = probs_to_logits(&[&p[0], &p[1]]);
        let a = 1;
        let expect = p[0][a] * p[1][a] + p[0][a] * p[1][0] + p[0][0] * p[1][a];
        let out = ctc_loss(logits.view(), &LabelSeq::new(vec![a]).unwrap()).unwrap();
        assert!((out.loss + expect.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_symbol_needs_separating_blank() {
        let logits = Array2::zeros((2, 3));
        let out = ctc_loss(logits.view(), &LabelSeq::new(vec![1, 1]).unwrap()).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.loss, f64::INFINITY);
        assert!(out.grad.iter().all(|&g| g == 0.0));
        let logits = Array2::zeros((3, 3));
        assert!(ctc_loss(logits.view(), &LabelSeq::new(vec![1, 1]).unwrap()).unwrap().feasible);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let logits = Array2::zeros((4, 3));
        assert!(ctc_loss(logits.view(), &LabelSeq::new(vec![3]).unwrap()).is_err());
        assert!(LabelSeq::new(vec![]).is_err());
        assert!(LabelSeq::new(vec![0, 1]).is_err());
    }

    /// Independent oracle: sum the probability of every path that collapses to the target.
    fn brute_force(logits: &Array2<f64>, target: &[usize]) -> f64 {
        let (steps, classes) = logits.dim();
        let lp = log_softmax_rows(logits.view());
        let mut total = 0.0;
        let mut path = vec![0usize; steps];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &k in &path {
                if k != prev && k != 0 {
                    collapsed.push(k);
                }
                prev = k;
            }
            if collapsed == target {
                total += path.iter().enumerate().map(|(t, &k)| lp[[t, k]]).sum::<f64>().exp();
            }
            let mut i = 0;
            loop {
                if i == steps {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = rng.random_range(1..=3);
            let steps = rng.random_range(1..=6);
            let len = rng.random_range(1..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=a)).collect();
            let logits = Array2::from_shape_fn((steps, a + 1), |_| rng.random_range(-3.0..3.0));
            let seq = LabelSeq::new(target.clone()).unwrap();
            let out = ctc_loss(logits.view(), &seq).unwrap();
            let oracle = brute_force(&logits, &target);
            if oracle.is_infinite() {
                assert!(!out.feasible);
            } else {
                assert!((out.loss - oracle).abs() <= 1e-9, "{} vs {}", out.loss, oracle);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let steps = rng.random_range(3..=8);
            let classes = rng.random_range(2..=5);
            let target: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..classes)).collect();
            let seq = LabelSeq::new(target).unwrap();
            let logits = Array2::from_shape_fn((steps, classes), |_| rng.random_range(-2.0..2.0));
            let out = ctc_loss(logits.view(), &seq).unwrap();
            if !out.feasible {
                continue;
            }
            let h = 1e-5;
            for t in 0..steps {
                for k in 0..classes {
                    let mut plus = logits.clone();
                    plus[[t, k]] += h;
                    let mut minus = logits.clone();
                    minus[[t, k]] -= h;
                    let fd = (ctc_loss(plus.view(), &seq).unwrap().loss - ctc_loss(minus.view(), &seq).unwrap().loss) / (2.0 * h);
                    assert!((fd - out.grad[[t, k]]).abs() <= 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn confident_correct_path_has_near_zero_loss() {
        // argmax path "a _ b b" decodes to "ab"
        let mut logits = Array2::from_elem((4, 3), -40.0);
        for (t, k) in [1usize, 0, 2, 2].into_iter().enumerate() {
            logits[[t, k]] = 40.0;
        }
        assert_eq!(greedy_decode(logits.view()), vec![1, 2]);
        let out = ctc_loss(logits.view(), &LabelSeq::new(vec![1, 2]).unwrap()).unwrap();
        assert!(out.loss < 1e-20 + 1e-15, "loss {}", out.loss);
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let logits = Array2::from_elem((32, 80), 0.0);
        let out = ctc_loss(logits.view(), &LabelSeq::new((1..=12).collect()).unwrap()).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
    }

    #[test]
    fn greedy_collapse_rules() {
        let path = |ks: &[usize]| {
            let mut m = Array2::zeros((ks.len(), 3));
            for (t, &k) in ks.iter().enumerate() {
                m[[t, k]] = 1.0f32;
            }
            greedy_decode(m.view())
        };
        assert_eq!(path(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(path(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(path(&[0, 2, 2, 0, 2]), vec![2, 2]);
    }

    #[test]
    fn edit_distance_examples() {
        let c = |s: &str| s.chars().collect::<Vec<_>>();
        assert_eq!(edit_distance(&c("abc"), &c("abc")), 0);
        assert_eq!(edit_distance(&c("kitten"), &c("sitting")), 3);
        assert_eq!(edit_distance(&c(""), &c("abc")), 3);
        assert_eq!(edit_distance(&c("abc"), &c("")), 3);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &a), 0);
        }
    }

    #[test]
    fn cer_wer_examples() {
        let m = cer_wer(&["a b", "xyz"], &["a b", "xyz"]).unwrap();
        assert_eq!((m.cer, m.wer), (0.0, 0.0));
        let m = cer_wer(&["ab"], &["ac"]).unwrap();
        assert_eq!((m.cer, m.wer), (0.5, 1.0));
        let m = cer_wer(&["a b"], &["a b c"]).unwrap();
        assert_eq!(m.wer, 0.5);
        assert_eq!((m.edits_word, m.ref_words), (1, 2));
        assert!(matches!(cer_wer::<&str, &str>(&[], &[]), Err(Error::EmptyReference)));
        assert!(cer_wer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn alphabet_encodes_and_extends() {
        let mut a = Alphabet::from_texts(&["ba", "cab"]);
        assert_eq!(a.symbols(), &['a', 'b', 'c']);
        assert_eq!(a.classes(), 4);
        assert_eq!(a.encode("cab").unwrap().symbols(), &[3, 1, 2]);
        assert!(a.encode("d").is_err());
        assert_eq!(a.decode(&[3, 0, 1]), "ca");
        assert_eq!(a.extend("dab".chars()), vec!['d']);
        assert_eq!(a.index_of('d'), Some(4));
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "\"abcd\"");
        assert_eq!(serde_json::from_str::<Alphabet>(&json).unwrap(), a);
        let _ = array![[0.0]];
    }

    #[test]
    fn tensor_op_matches_scalar_loss_and_gradient() {
        use candle_core::{Device, Var};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, t, c) = (3, 5, 4);
        let data: Vec<f64> = (0..n * t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = vec![
            LabelSeq::new(vec![1, 2]).unwrap(),
            LabelSeq::new(vec![3, 3, 3]).unwrap(),
            LabelSeq::new(vec![2, 2, 2, 2]).unwrap(), // needs 7 steps: infeasible
        ];
        let x = Var::from_vec(data.clone(), (n, t, c), &Device::Cpu).unwrap();
        let losses = ctc_loss_tensor(x.as_tensor(), &targets).unwrap();
        let values: Vec<f64> = losses.to_vec1().unwrap();
        assert_eq!(values[2], f64::INFINITY);
        let keep = Tensor::new(&[0u32, 1], &Device::Cpu).unwrap();
        let total = losses.index_select(&keep, 0).unwrap().sum_all().unwrap();
        let grads = total.backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..2 {
            let view = ArrayView2::from_shape((t, c), &data[i * t * c..(i + 1) * t * c]).unwrap();
            let o = ctc_loss(view, &targets[i]).unwrap();
            assert!((o.loss - values[i]).abs() < 1e-12);
            for (a, b) in o.grad.iter().zip(&g[i * t * c..]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(g[2 * t * c..].iter().all(|&v| v == 0.0));
    }
}
