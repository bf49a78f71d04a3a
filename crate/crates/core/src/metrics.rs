//! Multi-label classification metrics and BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::LabelVector;

/// Confusion counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// How per-class / per-sample rates with a zero denominator enter the
/// over-class and over-sample means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndefinedPolicy {
    /// Leave them out of the mean.
    #[default]
    Exclude,
    /// Count them as 0.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub samples: usize,
    pub classes: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_oc: f64,
    pub recall_oc: f64,
    pub precision_os: f64,
    pub recall_os: f64,
    pub per_class: Vec<ClassCounts>,
}

impl ClassificationReport {
    /// `key\tvalue` rows in table order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("accuracy", self.accuracy),
            ("recall", self.recall),
            ("recall_oc", self.recall_oc),
            ("recall_os", self.recall_os),
            ("precision", self.precision),
            ("precision_oc", self.precision_oc),
            ("precision_os", self.precision_os),
        ]
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, policy: UndefinedPolicy) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for v in values {
        match (v, policy) {
            (Some(x), _) => {
                total += x;
                n += 1;
            }
            (None, UndefinedPolicy::Zero) => n += 1,
            (None, UndefinedPolicy::Exclude) => {}
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn classification_report(pred: &[LabelVector], truth: &[LabelVector]) -> Result<ClassificationReport> {
    classification_report_with(pred, truth, None, UndefinedPolicy::Exclude)
}

/// Report restricted to the classes in `subset` (all classes when `None`).
pub fn classification_report_with(
    pred: &[LabelVector],
    truth: &[LabelVector],
    subset: Option<&[usize]>,
    policy: UndefinedPolicy,
) -> Result<ClassificationReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("classification_report", &[pred.len()], &[truth.len()]));
    }
    let k = truth[0].len();
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != k || t.len() != k {
            return Err(Error::dim("classification_report", &[p.len()], &[t.len()]));
        }
    }
    let all: Vec<usize>;
    let classes = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&j| j >= k) {
                return Err(Error::Index { index: bad, bound: k });
            }
            s
        }
        None => {
            all = (0..k).collect();
            &all
        }
    };

    let mut per_class = vec![ClassCounts::default(); classes.len()];
    let mut per_sample = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        let mut s = ClassCounts::default();
        for (c, &j) in classes.iter().enumerate() {
            let cell = &mut per_class[c];
            match (p.get(j), t.get(j)) {
                (true, true) => {
                    cell.tp += 1;
                    s.tp += 1;
                }
                (true, false) => {
                    cell.fp += 1;
                    s.fp += 1;
                }
                (false, true) => {
                    cell.fn_ += 1;
                    s.fn_ += 1;
                }
                (false, false) => {
                    cell.tn += 1;
                    s.tn += 1;
                }
            }
        }
        per_sample.push(s);
    }
    let mut micro = ClassCounts::default();
    for c in &per_class {
        micro.tp += c.tp;
        micro.fp += c.fp;
        micro.fn_ += c.fn_;
        micro.tn += c.tn;
    }
    let cells = pred.len() * classes.len();
    let precision_of = |c: &ClassCounts| ratio(c.tp, c.tp + c.fp);
    let recall_of = |c: &ClassCounts| ratio(c.tp, c.tp + c.fn_);
    Ok(ClassificationReport {
        samples: pred.len(),
        classes: classes.len(),
        accuracy: ratio(micro.tp + micro.tn, cells).unwrap_or(0.0),
        precision: precision_of(&micro).unwrap_or(0.0),
        recall: recall_of(&micro).unwrap_or(0.0),
        precision_oc: mean_defined(per_class.iter().map(precision_of), policy),
        recall_oc: mean_defined(per_class.iter().map(recall_of), policy),
        precision_os: mean_defined(per_sample.iter().map(precision_of), policy),
        recall_os: mean_defined(per_sample.iter().map(recall_of), policy),
        per_class,
    })
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn clipped_matches<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len<T, R: AsRef<[T]>>(c: usize, references: &[R]) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

fn check_order(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::Contract(format!("BLEU order must be in 1..=4, got {n}")))
    }
}

fn geometric(matches: &[(usize, usize)]) -> f64 {
    let n = matches.len() as f64;
    let mut log_sum = 0.0;
    for &(m, total) in matches {
        if m == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / total as f64).ln() / n;
    }
    log_sum.exp()
}

/// Unsmoothed cumulative BLEU-n with uniform weights over orders 1..=n.
pub fn bleu_n<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], n: usize) -> Result<f64> {
    check_order(n)?;
    if references.is_empty() {
        return Err(Error::Contract("BLEU needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let per_order: Vec<_> = (1..=n).map(|k| clipped_matches(candidate, references, k)).collect();
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    Ok(bp * geometric(&per_order))
}

/// Sentence-level averaging (the default) or pooled corpus counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    #[default]
    Sentence,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// BLEU-1..BLEU-4.
    pub bleu: [f64; 4],
    pub per_sentence: Vec<[f64; 4]>,
    pub brevity_penalty: f64,
    pub empty_candidates: usize,
}

impl BleuReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("bleu_1", self.bleu[0]),
            ("bleu_2", self.bleu[1]),
            ("bleu_3", self.bleu[2]),
            ("bleu_4", self.bleu[3]),
            ("brevity_penalty", self.brevity_penalty),
        ]
    }
}

/// One candidate with its references.
pub type BleuPair<T> = (Vec<T>, Vec<Vec<T>>);

pub fn corpus_bleu_report<T: Eq + Hash>(pairs: &[BleuPair<T>], mode: BleuMode) -> Result<BleuReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("BLEU over an empty corpus".into()));
    }
    let mut per_sentence = Vec::with_capacity(pairs.len());
    let mut empty = 0;
    let (mut c_total, mut r_total) = (0usize, 0usize);
    let mut pooled = [(0usize, 0usize); 4];
    for (cand, refs) in pairs {
        if refs.is_empty() {
            return Err(Error::Contract("BLEU pair without references".into()));
        }
        if cand.is_empty() {
            empty += 1;
        }
        let mut scores = [0.0; 4];
        for (n, s) in scores.iter_mut().enumerate() {
            *s = bleu_n(cand, refs, n + 1)?;
        }
        per_sentence.push(scores);
        c_total += cand.len();
        r_total += closest_ref_len(cand.len(), refs);
        for (k, acc) in pooled.iter_mut().enumerate() {
            let (m, t) = clipped_matches(cand, refs, k + 1);
            acc.0 += m;
            acc.1 += t;
        }
    }
    if empty > 0 {
        log::warn!("{empty} empty candidate(s) scored as 0");
    }
    let bp = brevity_penalty(c_total, r_total);
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = match mode {
            BleuMode::Sentence => per_sentence.iter().map(|s| s[n]).sum::<f64>() / pairs.len() as f64,
            BleuMode::Pooled => bp * geometric(&pooled[..=n]),
        };
    }
    Ok(BleuReport {
        bleu,
        per_sentence,
        brevity_penalty: bp,
        empty_candidates: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(bits: &[u8]) -> LabelVector {
        LabelVector::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_prediction() {
        let t = vec![lv(&[1, 0, 1]), lv(&[0, 1, 0])];
        let r = classification_report(&t, &t).unwrap();
        for (_, v) in r.rows() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn all_zero_prediction() {
        let t = vec![lv(&[1, 0, 0]), lv(&[0, 1, 0])];
        let p = vec![lv(&[0, 0, 0]), lv(&[0, 0, 0])];
        let r = classification_report(&p, &t).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.accuracy, 4.0 / 6.0);
    }

    #[test]
    fn worked_two_by_two() {
        let t = vec![lv(&[1, 0]), lv(&[1, 1])];
        let p = vec![lv(&[1, 1]), lv(&[1, 0])];
        let r = classification_report(&p, &t).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall_oc, 0.5);
        assert_eq!(r.recall_os, 0.75);
        let counts: usize = r.per_class.iter().map(|c| c.tp + c.fp + c.fn_ + c.tn).sum();
        assert_eq!(counts, 4);
    }

    #[test]
    fn undefined_policy() {
        // Class 1 has no true positives and no predictions: recall undefined.
        let t = vec![lv(&[1, 0]), lv(&[0, 0])];
        let p = vec![lv(&[1, 0]), lv(&[1, 0])];
        let ex = classification_report_with(&p, &t, None, UndefinedPolicy::Exclude).unwrap();
        let zero = classification_report_with(&p, &t, None, UndefinedPolicy::Zero).unwrap();
        assert_eq!(ex.recall_oc, 1.0);
        assert_eq!(zero.recall_oc, 0.5);
    }

    #[test]
    fn subset_and_shape_errors() {
        let t = vec![lv(&[1, 0, 1])];
        let p = vec![lv(&[1, 1, 0])];
        let r = classification_report_with(&p, &t, Some(&[0]), UndefinedPolicy::Exclude).unwrap();
        assert_eq!(r.classes, 1);
        assert_eq!(r.accuracy, 1.0);
        assert!(classification_report_with(&p, &t, Some(&[3]), UndefinedPolicy::Exclude).is_err());
        assert!(classification_report(&[lv(&[1])], &t).is_err());
        assert!(classification_report(&p, &[t[0].clone(), t[0].clone()]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let c = toks("a b c d");
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, std::slice::from_ref(&c), n).unwrap(), 1.0);
        }
        let s = bleu_n(&toks("a b c"), &[toks("a b d")], 1).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bleu_n(&toks("a b"), &[toks("c d")], 2).unwrap(), 0.0);
        assert!(bleu_n(&c, std::slice::from_ref(&c), 0).is_err());
        assert!(bleu_n(&c, std::slice::from_ref(&c), 5).is_err());
    }

    #[test]
    fn brevity_and_clipping() {
        // "the the the" vs "the cat": clipped unigram 1/3.
        let s = bleu_n(&toks("the the the"), &[toks("the cat")], 1).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        // Short candidate: c=2, r=4, BP = e^{-1}.
        let s = bleu_n(&toks("a b"), &[toks("a b c d")], 1).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn corpus_averaging() {
        let same: Vec<BleuPair<&str>> = vec![(toks("a b c d"), vec![toks("a b c d")]); 3];
        let r = corpus_bleu_report(&same, BleuMode::Sentence).unwrap();
        assert_eq!(r.bleu, [1.0; 4]);
        let half = vec![(toks("a b"), vec![toks("a b")]), (toks("x y"), vec![toks("a b")])];
        let r = corpus_bleu_report(&half, BleuMode::Sentence).unwrap();
        assert_eq!(r.bleu[0], 0.5);
        let single = vec![(toks("a b c"), vec![toks("a b d")])];
        let r = corpus_bleu_report(&single, BleuMode::Sentence).unwrap();
        assert_eq!(r.bleu[0], bleu_n(&toks("a b c"), &[toks("a b d")], 1).unwrap());
        let empty = vec![(Vec::new(), vec![toks("a")])];
        let r = corpus_bleu_report(&empty, BleuMode::Pooled).unwrap();
        assert_eq!(r.empty_candidates, 1);
        assert_eq!(r.bleu[0], 0.0);
        assert!(corpus_bleu_report::<&str>(&[], BleuMode::Sentence).is_err());
    }

    #[test]
    fn pooled_mode_pools_counts() {
        let pairs = vec![(toks("a b"), vec![toks("a b")]), (toks("x y"), vec![toks("a b")])];
        let r = corpus_bleu_report(&pairs, BleuMode::Pooled).unwrap();
        assert_eq!(r.bleu[0], 0.5);
        assert_eq!(r.brevity_penalty, 1.0);
    }
}
