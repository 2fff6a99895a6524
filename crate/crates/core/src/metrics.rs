//! Evaluation metrics: binary classification counts, caption-style language
//! metrics (BLEU-4, ROUGE-L, a light METEOR, CIDEr), multiple-choice and
//! numeric answer scoring, and waypoint displacement errors.
//!
//! All text metrics operate on whitespace token slices of the canonical
//! lowercase question/answer strings.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

// ---------------------------------------------------------------------------
// Binary classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn update(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fp) as f64
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            return 0.0;
        }
        2.0 * p * r / (p + r)
    }
}

/// Per-category accuracy tracker whose mean is a class-average (macro)
/// accuracy, as used for existence-question evaluation.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct PerClassAccuracy {
    pub correct: [usize; 10],
    pub total: [usize; 10],
}

impl PerClassAccuracy {
    pub fn update(&mut self, class_index: usize, correct: bool) {
        self.total[class_index] += 1;
        if correct {
            self.correct[class_index] += 1;
        }
    }

    pub fn class_accuracy(&self, class_index: usize) -> Option<f64> {
        if self.total[class_index] == 0 {
            None
        } else {
            Some(self.correct[class_index] as f64 / self.total[class_index] as f64)
        }
    }

    /// Mean accuracy over the classes that appear at least once.
    pub fn class_average(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..10 {
            if let Some(a) = self.class_accuracy(c) {
                sum += a;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Plain micro accuracy over all answered questions.
    pub fn micro_accuracy(&self) -> f64 {
        let c: usize = self.correct.iter().sum();
        let t: usize = self.total.iter().sum();
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

pub fn tokenize_text(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts(tokens: &[&str], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// BLEU-4
// ---------------------------------------------------------------------------

/// Smoothing floor applied to zero clipped-precision counts.
pub const BLEU_EPS: f64 = 1e-9;

/// Single-reference BLEU-4: geometric mean of clipped n-gram precisions for
/// n = 1..4 times a brevity penalty. Zero counts are floored at [`BLEU_EPS`].
pub fn bleu4(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let rf = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(rf.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 {
            BLEU_EPS
        } else {
            (clipped as f64 / total as f64).max(BLEU_EPS)
        };
        log_sum += 0.25 * math::ln(p);
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c >= r { 1.0 } else { math::exp(1.0 - r / c) };
    bp * math::exp(log_sum)
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev = alloc::vec![0usize; m + 1];
    let mut cur = alloc::vec![0usize; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// ROUGE-L F-measure with beta = 1 (the harmonic mean of LCS precision and
/// recall).
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

// ---------------------------------------------------------------------------
// METEOR (light variant)
// ---------------------------------------------------------------------------

/// Light METEOR: exact unigram matches aligned greedily in reference order,
/// F-mean with recall weighted 9:1, and the standard fragmentation penalty
/// `0.5 * (chunks / matches)^3`. No stemming or synonym stages.
pub fn meteor_lite(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // greedy one-to-one alignment: each candidate token takes the earliest
    // unused occurrence of itself in the reference
    let mut used = alloc::vec![false; reference.len()];
    let mut matched_ref_pos: Vec<Option<usize>> = Vec::with_capacity(candidate.len());
    for tok in candidate {
        let mut hit = None;
        for (j, r) in reference.iter().enumerate() {
            if !used[j] && r == tok {
                hit = Some(j);
                used[j] = true;
                break;
            }
        }
        matched_ref_pos.push(hit);
    }
    let m = matched_ref_pos.iter().filter(|p| p.is_some()).count() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    // chunks: maximal runs that are contiguous in both candidate and reference
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for pos in matched_ref_pos.iter() {
        match (pos, prev) {
            (Some(j), Some(pj)) if *j == pj + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *pos;
    }
    let penalty = 0.5 * math::powi(chunks as f64 / m, 3);
    fmean * (1.0 - penalty)
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

/// Corpus-level CIDEr with a single reference per item: the average over
/// items and n = 1..4 of 10 times the TF-IDF cosine between candidate and
/// reference n-gram vectors. Document frequency is computed over the
/// reference corpus with a log(N / df) IDF.
pub fn cider(candidates: &[Vec<&str>], references: &[Vec<&str>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "corpus sizes differ");
    let n_docs = references.len();
    if n_docs == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=4 {
        // document frequency of each n-gram over the references
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for rf in references {
            for g in ngram_counts(rf, n).keys() {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let idf = |g: &str| -> f64 {
            let d = df.get(g).copied().unwrap_or(0).max(1);
            math::ln(n_docs as f64 / d as f64)
        };
        let mut n_total = 0.0;
        for (cand, rf) in candidates.iter().zip(references) {
            let cv = ngram_counts(cand, n);
            let rv = ngram_counts(rf, n);
            let mut dot = 0.0;
            let mut c_norm = 0.0;
            let mut r_norm = 0.0;
            for (g, &c) in &cv {
                let w = c as f64 * idf(g);
                c_norm += w * w;
                if let Some(&r) = rv.get(g) {
                    dot += w * (r as f64 * idf(g));
                }
            }
            for (g, &r) in &rv {
                let w = r as f64 * idf(g);
                r_norm += w * w;
            }
            if c_norm > 0.0 && r_norm > 0.0 {
                n_total += dot / (math::sqrt(c_norm) * math::sqrt(r_norm));
            }
        }
        total += 10.0 * n_total / n_docs as f64;
    }
    total / 4.0
}

// ---------------------------------------------------------------------------
// Answer parsing and scoring
// ---------------------------------------------------------------------------

/// First standalone option letter (a-d) in a decoded answer, as an index.
pub fn parse_mcq_letter(answer_text: &str) -> Option<u8> {
    for tok in answer_text.split_whitespace() {
        if tok.len() == 1 {
            if let Some(i) = ["a", "b", "c", "d"].iter().position(|&l| l == tok) {
                return Some(i as u8);
            }
        }
    }
    None
}

/// First integer followed by the word "meters" in a decoded answer.
pub fn parse_numeric_meters(answer_text: &str) -> Option<f64> {
    let toks: Vec<&str> = answer_text.split_whitespace().collect();
    for w in toks.windows(2) {
        if w[1] == "meters" {
            if let Ok(v) = w[0].parse::<i64>() {
                return Some(v as f64);
            }
        }
    }
    None
}

/// L1 penalty charged when a numeric answer cannot be parsed (m).
pub const UNPARSEABLE_PENALTY_M: f64 = 20.0;

/// Absolute error of a decoded numeric-distance answer against the exact
/// ground-truth value.
pub fn numeric_l1(answer_text: &str, truth_m: f64) -> f64 {
    match parse_numeric_meters(answer_text) {
        Some(v) => math::abs(v - truth_m),
        None => UNPARSEABLE_PENALTY_M,
    }
}

/// Planner L2 displacements at the 1 s / 2 s / 3 s horizons (waypoint
/// indices 1, 3, 5 of a 0.5 s-spaced plan).
pub fn l2_horizons(pred: &[(f64, f64)], expert: &[(f64, f64)]) -> [f64; 3] {
    assert!(pred.len() >= 6 && expert.len() >= 6, "plans must have 6 waypoints");
    let mut out = [0.0; 3];
    for (k, idx) in [1usize, 3, 5].iter().enumerate() {
        let (px, py) = pred[*idx];
        let (ex, ey) = expert[*idx];
        out[k] = math::hypot(px - ex, py - ey);
    }
    out
}

/// Mean of the three horizon errors.
pub fn l2_average(horizons: &[f64; 3]) -> f64 {
    (horizons[0] + horizons[1] + horizons[2]) / 3.0
}

/// A small fixed corpus of sentence pairs used by metric verification; the
/// pairs exercise word drops, substitutions, reorderings and exact matches.
pub fn fixture_corpus() -> Vec<(String, String)> {
    let items = [
        (
            "the ego car should keep its lane and maintain speed .",
            "the ego car should keep its lane and maintain speed .",
        ),
        (
            "the ego car should brake and keep its lane .",
            "the ego car should keep its lane and maintain speed .",
        ),
        (
            "the ego car should change to the left lane and slow down .",
            "the ego car should change to the right lane and slow down .",
        ),
        ("there are 2 moving cars in the front .", "there are 3 moving cars in the front ."),
        ("a parked truck sits in the back right .", "in the back right sits a parked truck ."),
        ("no .", "yes ."),
        ("yes .", "yes ."),
        (
            "the moving bus in the back left is 14 meters away .",
            "the moving bus in the back left is 14 meters away .",
        ),
    ];
    items.iter().map(|(c, r)| (format!("{c}"), format!("{r}"))).collect()
}
