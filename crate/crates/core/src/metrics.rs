//! SQuAD-style answer scoring, out-of-context detection and a paired
//! randomization test.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mrqa::{ExtractiveExample, PredictionSet};
use crate::par;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("paired score lists differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("at least one resample is required")]
    NoResamples,
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();

    // Articles are whole words: runs of word characters bounded by
    // anything else.
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut without_articles = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if is_word(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut without_articles);
            without_articles.push(c);
        }
    }
    flush(&mut word, &mut without_articles);

    without_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> bool {
    let p = normalize_answer(pred);
    golds.iter().any(|g| normalize_answer(g.as_ref()) == p)
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1, maximised over the gold answers. No golds scores 0.
pub fn f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(pred, g.as_ref()))
        .fold(0.0, f64::max)
}

/// True when the trimmed prediction is not a case-sensitive substring of the
/// context.
pub fn hallucination_check(pred: &str, context: &str) -> bool {
    !context.contains(pred.trim())
}

fn hallucination_check_normalized(pred: &str, context: &str) -> bool {
    !normalize_answer(context).contains(&normalize_answer(pred))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub em: f64,
    pub f1: f64,
    pub predicted: bool,
    pub hallucinated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentages in `[0, 100]`.
    pub em: f64,
    pub f1: f64,
    pub n: usize,
    pub missing_predictions: usize,
    /// Out-of-context predictions as a percentage of predicted questions.
    pub hallucination_rate: f64,
    /// Same, comparing normalized strings. Diagnostic only.
    pub hallucination_rate_normalized: f64,
    pub hallucinated_qids: Vec<String>,
    /// Predictions for questions not in the dataset; not scored.
    pub unknown_qids: Vec<String>,
    /// Repeated question ids in the dataset; only the first is scored.
    pub duplicate_qids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_example: Vec<ExampleScore>,
}

struct Scored {
    score: ExampleScore,
    hallucinated_normalized: bool,
}

/// Scores `preds` against every question in `examples`. Questions without a
/// prediction score zero.
pub fn evaluate(
    preds: &PredictionSet,
    examples: impl IntoIterator<Item = ExtractiveExample>,
) -> MetricsReport {
    let mut seen = HashSet::new();
    let mut duplicate_qids = Vec::new();
    let mut unique = Vec::new();
    for ex in examples {
        if seen.insert(ex.qid.clone()) {
            unique.push(ex);
        } else {
            duplicate_qids.push(ex.qid);
        }
    }

    let scored = par::map_ordered(&unique, |ex| {
        let golds = ex.scoring_answers();
        match preds.get(&ex.qid) {
            Some(p) => Scored {
                score: ExampleScore {
                    qid: ex.qid.clone(),
                    em: if exact_match(p, &golds) { 1.0 } else { 0.0 },
                    f1: f1(p, &golds),
                    predicted: true,
                    hallucinated: hallucination_check(p, &ex.context),
                },
                hallucinated_normalized: hallucination_check_normalized(p, &ex.context),
            },
            None => Scored {
                score: ExampleScore {
                    qid: ex.qid.clone(),
                    em: 0.0,
                    f1: 0.0,
                    predicted: false,
                    hallucinated: false,
                },
                hallucinated_normalized: false,
            },
        }
    });

    let n = scored.len();
    let predicted = scored.iter().filter(|s| s.score.predicted).count();
    let pct = |x: f64, d: usize| if d == 0 { 0.0 } else { 100.0 * x / d as f64 };
    let em = pct(scored.iter().map(|s| s.score.em).sum(), n);
    let f1 = pct(scored.iter().map(|s| s.score.f1).sum(), n);
    let hallucinated_qids: Vec<String> = scored
        .iter()
        .filter(|s| s.score.hallucinated)
        .map(|s| s.score.qid.clone())
        .collect();
    let normalized = scored.iter().filter(|s| s.hallucinated_normalized).count();
    let unknown_qids = preds
        .iter()
        .filter(|(q, _)| !seen.contains(*q))
        .map(|(q, _)| q.to_owned())
        .collect();

    MetricsReport {
        em,
        f1,
        n,
        missing_predictions: n - predicted,
        hallucination_rate: pct(hallucinated_qids.len() as f64, predicted),
        hallucination_rate_normalized: pct(normalized as f64, predicted),
        hallucinated_qids,
        unknown_qids,
        duplicate_qids,
        per_example: scored.into_iter().map(|s| s.score).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    /// Mean of `a - b`.
    pub statistic: f64,
    /// Sign assignments examined; `2^n` when enumeration was exhaustive.
    pub resamples: u64,
    pub exhaustive: bool,
    pub seed: u64,
}

// Sums of up to a few thousand scores in [0, 1]; anything closer than this
// is a tie.
const TIE_EPS: f64 = 1e-9;

/// Two-sided paired sign-flip randomization test on `a - b`.
///
/// When `2^n <= resamples` every sign assignment is enumerated and the
/// p-value is exact; otherwise `p = (1 + hits) / (resamples + 1)` over
/// random assignments, each drawn from its own seeded stream.
pub fn paired_significance(
    a: &[f64],
    b: &[f64],
    resamples: u64,
    seed: u64,
) -> Result<SignificanceResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if resamples == 0 {
        return Err(MetricsError::NoResamples);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(SignificanceResult {
            p_value: 1.0,
            statistic: 0.0,
            resamples: 0,
            exhaustive: true,
            seed,
        });
    }
    let observed: f64 = diffs.iter().sum();
    let threshold = observed.abs() - TIE_EPS;
    let statistic = observed / n as f64;

    if n < 63 && (1u64 << n) <= resamples {
        let total = 1u64 << n;
        let hits = par::sum_indexed(0..total, |mask| {
            let s: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            u64::from(s.abs() >= threshold)
        });
        return Ok(SignificanceResult {
            p_value: hits as f64 / total as f64,
            statistic,
            resamples: total,
            exhaustive: true,
            seed,
        });
    }

    let hits = par::sum_indexed(0..resamples, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r);
        let s: f64 = diffs
            .iter()
            .map(|d| if rng.gen::<bool>() { -d } else { *d })
            .sum();
        u64::from(s.abs() >= threshold)
    });
    Ok(SignificanceResult {
        p_value: (1 + hits) as f64 / (resamples + 1) as f64,
        statistic,
        resamples,
        exhaustive: false,
        seed,
    })
}
