//! Consistency verdicts and target repair.
//!
//! A target is consistently tokenized when its token ids occur verbatim in
//! the tokenized context. Tokenizing an answer on its own usually breaks
//! that: `"1912"` becomes `19` `12` while the context holds `Ġ1912`.
//! [`make_consistent_target`] fixes this by taking the target ids from the
//! context encoding itself.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    codepoint_span_to_byte_span, find_all_subsequences, find_subsequence, token_slice_for_span,
    AlignError, AlignmentKind, CharSpan, TokenSpan,
};
use crate::bpe::{ByteSpan, Encoding, TokenId, Tokenizer};
use crate::mrqa::{ExtractiveExample, ReadError};
use crate::par;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsistError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error(transparent)]
    Span(#[from] AlignError),
    #[error("gold span reads {found:?}, expected {answer:?}")]
    SpanMismatch { answer: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyStatus {
    ConsistentRaw,
    ConsistentWithPrefixSpace,
    Inconsistent,
}

impl ConsistencyStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConsistentRaw => "consistent_raw",
            Self::ConsistentWithPrefixSpace => "consistent_with_prefix_space",
            Self::Inconsistent => "inconsistent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyVerdict {
    pub status: ConsistencyStatus,
    /// The answer tokenized on its own.
    pub standalone_ids: Vec<TokenId>,
    /// The answer tokenized with one leading space.
    pub prefixed_ids: Vec<TokenId>,
    /// Where the matching variant sits in the context, if anywhere.
    pub location: Option<TokenSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixMethod {
    AlreadyConsistent,
    ExactSlice,
    ExpandedSlice,
    SubsequenceSearch,
    Unresolved,
}

impl FixMethod {
    pub const ALL: [FixMethod; 5] = [
        FixMethod::AlreadyConsistent,
        FixMethod::ExactSlice,
        FixMethod::ExpandedSlice,
        FixMethod::SubsequenceSearch,
        FixMethod::Unresolved,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AlreadyConsistent => "already_consistent",
            Self::ExactSlice => "exact_slice",
            Self::ExpandedSlice => "expanded_slice",
            Self::SubsequenceSearch => "subsequence_search",
            Self::Unresolved => "unresolved",
        }
    }
}

impl fmt::Display for FixMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A repaired training target.
///
/// Unless `method` is [`FixMethod::Unresolved`], `target_ids` equals
/// `context_ids[context_span]`. Unresolved targets fall back to the
/// standalone tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixOutcome {
    pub target_ids: Vec<TokenId>,
    pub method: FixMethod,
    pub context_span: Option<TokenSpan>,
    pub note: String,
}

/// Returns `(raw, prefixed)`: the answer tokenized alone and with a leading
/// space.
pub fn answer_variants(
    tok: &Tokenizer,
    answer: &str,
) -> Result<(Vec<TokenId>, Vec<TokenId>), ConsistError> {
    if answer.is_empty() {
        return Err(ConsistError::EmptyAnswer);
    }
    let raw = tok.encode(answer).into_ids();
    let prefixed = tok.encode(&format!(" {answer}")).into_ids();
    Ok((raw, prefixed))
}

/// Checks whether the answer's standalone tokenization, or failing that its
/// space-prefixed tokenization, occurs verbatim in the context ids.
pub fn check_consistency(
    tok: &Tokenizer,
    context_enc: &Encoding,
    answer: &str,
) -> Result<ConsistencyVerdict, ConsistError> {
    let (raw, prefixed) = answer_variants(tok, answer)?;
    let ctx = context_enc.ids();
    let (status, location) = if let Some(at) = find_subsequence(ctx, &raw) {
        (ConsistencyStatus::ConsistentRaw, Some(at))
    } else if let Some(at) = find_subsequence(ctx, &prefixed) {
        (ConsistencyStatus::ConsistentWithPrefixSpace, Some(at))
    } else {
        (ConsistencyStatus::Inconsistent, None)
    };
    Ok(ConsistencyVerdict {
        status,
        standalone_ids: raw,
        prefixed_ids: prefixed,
        location,
    })
}

/// Builds a training target for `answer` out of the context's own token ids.
///
/// Tries, in order, and keeps the first that succeeds:
///
/// 1. the standalone ids already occur in the context (at the gold span
///    when one is given);
/// 2. the answer's location lines up exactly with token boundaries;
/// 3. the smallest covering run of tokens reads as the answer once edge
///    whitespace is stripped;
/// 4. the space-prefixed, then the standalone, ids occur somewhere in the
///    context;
/// 5. any other occurrence of the answer text satisfies 2 or 3.
///
/// Otherwise the outcome is `Unresolved` and carries the standalone ids.
/// Without a gold span, the answer's leftmost occurrence in the context
/// stands in for it.
pub fn make_consistent_target(
    tok: &Tokenizer,
    context: &str,
    context_enc: &Encoding,
    answer: &str,
    gold_span: Option<CharSpan>,
) -> Result<FixOutcome, ConsistError> {
    let (raw, prefixed) = answer_variants(tok, answer)?;
    let wanted = answer.trim();
    let ctx = context_enc.ids();

    let gold = match gold_span {
        Some(span) => {
            let bytes = codepoint_span_to_byte_span(context, span)?;
            let found = &context[bytes.start..bytes.end];
            if found.trim_end() != answer.trim_end() {
                return Err(ConsistError::SpanMismatch {
                    answer: answer.to_owned(),
                    found: found.to_owned(),
                });
            }
            Some(trim_byte_span(context, bytes))
        }
        None => None,
    };

    let slice = |span: TokenSpan, method: FixMethod, note: String| FixOutcome {
        target_ids: ctx[span.range()].to_vec(),
        method,
        context_span: Some(span),
        note,
    };

    // 1
    let raw_hits = find_all_subsequences(ctx, &raw);
    let hit = match gold {
        Some(g) => raw_hits
            .iter()
            .find(|s| s.byte_span(context_enc).is_some_and(|b| b.intersects(&g))),
        None => raw_hits.first(),
    };
    if let Some(&span) = hit {
        return Ok(slice(span, FixMethod::AlreadyConsistent, String::new()));
    }

    let occurrences = text_occurrences(context, wanted);
    let primary = gold.or_else(|| occurrences.first().copied());

    // 2, 3
    if let Some(loc) = primary {
        if let Some(out) = align_at(context, context_enc, loc, wanted, &slice) {
            return Ok(out);
        }
    }

    // 4
    for (ids, label) in [(&prefixed, "prefixed"), (&raw, "standalone")] {
        let hits = find_all_subsequences(ctx, ids);
        let pick = gold
            .and_then(|g| {
                hits.iter()
                    .find(|s| s.byte_span(context_enc).is_some_and(|b| b.intersects(&g)))
            })
            .or(hits.first());
        if let Some(&span) = pick {
            return Ok(slice(
                span,
                FixMethod::SubsequenceSearch,
                format!("{label} tokenization found in context"),
            ));
        }
    }

    // 5
    for loc in occurrences.into_iter().filter(|o| Some(*o) != primary) {
        if let Some(mut out) = align_at(context, context_enc, loc, wanted, &slice) {
            out.note = format!("answer taken from bytes {}..{}", loc.start, loc.end);
            return Ok(out);
        }
    }

    Ok(FixOutcome {
        target_ids: raw,
        method: FixMethod::Unresolved,
        context_span: None,
        note: if primary.is_none() {
            "answer text not found in context".into()
        } else {
            "no token slice reads as the answer".into()
        },
    })
}

fn align_at(
    context: &str,
    enc: &Encoding,
    loc: ByteSpan,
    wanted: &str,
    slice: &dyn Fn(TokenSpan, FixMethod, String) -> FixOutcome,
) -> Option<FixOutcome> {
    let aligned = token_slice_for_span(enc, context, loc);
    let span = aligned.span?;
    match aligned.kind {
        AlignmentKind::Exact => Some(slice(span, FixMethod::ExactSlice, String::new())),
        AlignmentKind::Expanded => {
            let covered = span.byte_span(enc)?;
            let text = context.get(covered.start..covered.end)?;
            (text.trim() == wanted).then(|| {
                slice(
                    span,
                    FixMethod::ExpandedSlice,
                    format!("slice reads {text:?}"),
                )
            })
        }
        AlignmentKind::Failed => None,
    }
}

fn trim_byte_span(text: &str, span: ByteSpan) -> ByteSpan {
    let s = &text[span.start..span.end];
    let lead = s.len() - s.trim_start().len();
    let trimmed = s.trim();
    if trimmed.is_empty() {
        return span;
    }
    ByteSpan::new(span.start + lead, span.start + lead + trimmed.len())
}

fn text_occurrences(context: &str, needle: &str) -> Vec<ByteSpan> {
    if needle.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = context[from..].find(needle) {
        let start = from + i;
        out.push(ByteSpan::new(start, start + needle.len()));
        // advance one char so overlapping occurrences are seen too
        from = start + context[start..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

/// Which gold answers count when judging one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerPolicy {
    /// The first detected answer (or first gold answer).
    #[default]
    First,
    /// Best verdict over all distinct answers.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzeOptions {
    /// Analyze a uniform sample of this many examples instead of all.
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub policy: AnswerPolicy,
    pub keep_verdicts: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            sample_size: None,
            seed: 42,
            policy: AnswerPolicy::First,
            keep_verdicts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleVerdict {
    pub qid: String,
    pub answer: String,
    pub status: ConsistencyStatus,
}

/// Aggregate consistency counts. `consistent_raw + consistent_prefix_only +
/// inconsistent == total`; questions without any answer are counted in
/// `skipped` and excluded from `total`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub total: usize,
    pub consistent_raw: usize,
    pub consistent_prefix_only: usize,
    pub inconsistent: usize,
    pub skipped: usize,
    pub pct_inconsistent_raw: f64,
    pub pct_inconsistent_after_prefix: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<ExampleVerdict>,
}

impl ConsistencyStats {
    fn add(&mut self, status: ConsistencyStatus) {
        self.total += 1;
        match status {
            ConsistencyStatus::ConsistentRaw => self.consistent_raw += 1,
            ConsistencyStatus::ConsistentWithPrefixSpace => self.consistent_prefix_only += 1,
            ConsistencyStatus::Inconsistent => self.inconsistent += 1,
        }
    }

    fn finalize(&mut self) {
        let pct = |n: usize| {
            if self.total == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.total as f64
            }
        };
        self.pct_inconsistent_raw = pct(self.consistent_prefix_only + self.inconsistent);
        self.pct_inconsistent_after_prefix = pct(self.inconsistent);
    }
}

fn verdict_for(
    tok: &Tokenizer,
    enc: &Encoding,
    ex: &ExtractiveExample,
    policy: AnswerPolicy,
) -> Option<(String, ConsistencyStatus)> {
    let answers: Vec<&str> = match policy {
        AnswerPolicy::First => ex.primary_answer().map(|(a, _)| a).into_iter().collect(),
        AnswerPolicy::Any => ex.answer_texts(),
    };
    let mut best: Option<(String, ConsistencyStatus)> = None;
    for a in answers.into_iter().filter(|a| !a.is_empty()) {
        let Ok(v) = check_consistency(tok, enc, a) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, s)| v.status < *s) {
            best = Some((a.to_owned(), v.status));
        }
    }
    best
}

/// Groups consecutive examples that share a context so it is encoded once.
fn context_groups(examples: Vec<ExtractiveExample>) -> Vec<Vec<ExtractiveExample>> {
    let mut groups: Vec<Vec<ExtractiveExample>> = Vec::new();
    for ex in examples {
        match groups.last_mut() {
            Some(g) if Arc::ptr_eq(&g[0].context, &ex.context) => g.push(ex),
            _ => groups.push(vec![ex]),
        }
    }
    groups
}

/// Uniform sample of `k` items, in original order, reproducible from `seed`.
pub fn sample_examples<T>(items: impl IntoIterator<Item = T>, k: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, T)> = Vec::with_capacity(k);
    for (i, item) in items.into_iter().enumerate() {
        if i < k {
            reservoir.push((i, item));
        } else {
            let j = rng.gen_range(0..=i);
            if j < k {
                reservoir[j] = (i, item);
            }
        }
    }
    reservoir.sort_by_key(|(i, _)| *i);
    reservoir.into_iter().map(|(_, t)| t).collect()
}

/// Classifies every example (or a seeded sample) and tallies the verdicts.
pub fn analyze_dataset(
    tok: &Tokenizer,
    examples: impl IntoIterator<Item = ExtractiveExample>,
    options: &AnalyzeOptions,
) -> ConsistencyStats {
    let examples: Vec<ExtractiveExample> = match options.sample_size {
        Some(k) => sample_examples(examples, k, options.seed),
        None => examples.into_iter().collect(),
    };
    let groups = context_groups(examples);
    let results = par::map_ordered(&groups, |group| {
        let enc = tok.encode(&group[0].context);
        group
            .iter()
            .map(|ex| (ex.qid.clone(), verdict_for(tok, &enc, ex, options.policy)))
            .collect::<Vec<_>>()
    });

    let mut stats = ConsistencyStats::default();
    for (qid, verdict) in results.into_iter().flatten() {
        match verdict {
            Some((answer, status)) => {
                stats.add(status);
                if options.keep_verdicts {
                    stats.verdicts.push(ExampleVerdict { qid, answer, status });
                }
            }
            None => stats.skipped += 1,
        }
    }
    stats.finalize();
    stats
}

/// Per-method counts from [`fix_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FixSummary {
    /// Examples written.
    pub total: usize,
    pub methods: BTreeMap<FixMethod, usize>,
    /// Records dropped because a gold span did not match its answer.
    pub span_mismatches: usize,
    /// Records dropped for other per-record problems.
    pub malformed: usize,
}

impl FixSummary {
    pub fn count(&self, method: FixMethod) -> usize {
        self.methods.get(&method).copied().unwrap_or(0)
    }
}

#[derive(Debug, Error)]
pub enum FixError {
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("writing repaired dataset")]
    Io(#[from] std::io::Error),
}

/// Repairs one example using its primary answer and span.
pub fn fix_example(tok: &Tokenizer, enc: &Encoding, ex: &ExtractiveExample) -> Result<FixOutcome, ConsistError> {
    match ex.primary_answer() {
        Some((answer, span)) if !answer.is_empty() => {
            make_consistent_target(tok, &ex.context, enc, answer, span)
        }
        _ => Ok(FixOutcome {
            target_ids: Vec::new(),
            method: FixMethod::Unresolved,
            context_span: None,
            note: "no answer".into(),
        }),
    }
}

const FIX_BATCH: usize = 2048;

/// Repairs a stream of examples and hands each `(example, outcome)` to
/// `sink` in input order.
///
/// Per-record read errors and gold-span mismatches are counted and skipped.
/// Fatal read errors and sink errors abort.
pub fn fix_dataset<I, F>(tok: &Tokenizer, examples: I, mut sink: F) -> Result<FixSummary, FixError>
where
    I: IntoIterator<Item = Result<ExtractiveExample, ReadError>>,
    F: FnMut(ExtractiveExample, FixOutcome) -> std::io::Result<()>,
{
    let mut summary = FixSummary::default();
    for m in FixMethod::ALL {
        summary.methods.insert(m, 0);
    }
    let mut batch = Vec::with_capacity(FIX_BATCH);
    let mut iter = examples.into_iter().peekable();
    while iter.peek().is_some() {
        batch.clear();
        for item in iter.by_ref() {
            match item {
                Ok(ex) => batch.push(ex),
                Err(ReadError::SpanMismatch { .. }) => summary.span_mismatches += 1,
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(_) => summary.malformed += 1,
            }
            if batch.len() == FIX_BATCH {
                break;
            }
        }
        let groups = context_groups(std::mem::take(&mut batch));
        let outcomes = par::map_ordered(&groups, |group| {
            let enc = tok.encode(&group[0].context);
            group.iter().map(|ex| fix_example(tok, &enc, ex)).collect::<Vec<_>>()
        });
        for (group, outs) in groups.into_iter().zip(outcomes) {
            for (ex, out) in group.into_iter().zip(outs) {
                match out {
                    Ok(fix) => {
                        *summary.methods.entry(fix.method).or_default() += 1;
                        summary.total += 1;
                        sink(ex, fix)?;
                    }
                    Err(ConsistError::SpanMismatch { .. }) | Err(ConsistError::Span(_)) => {
                        summary.span_mismatches += 1
                    }
                    Err(ConsistError::EmptyAnswer) => summary.malformed += 1,
                }
            }
        }
    }
    Ok(summary)
}
