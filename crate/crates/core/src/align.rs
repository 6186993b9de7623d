//! Conversions between character, byte and token spans, and verbatim search
//! for token-id subsequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{ByteSpan, Encoding, TokenId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("span [{start}, {end}) is outside a text of {len} characters")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("span starts at {start} but ends at {end}")]
    Inverted { start: usize, end: usize },
}

/// Whether a [`CharSpan`]'s `end` points at the last character (MRQA) or
/// one past it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanConvention {
    #[default]
    InclusiveEnd,
    ExclusiveEnd,
}

/// A span of codepoint indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
    pub convention: SpanConvention,
}

impl CharSpan {
    pub fn inclusive(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            convention: SpanConvention::InclusiveEnd,
        }
    }

    pub fn exclusive(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            convention: SpanConvention::ExclusiveEnd,
        }
    }

    /// One past the last codepoint.
    pub fn end_exclusive(&self) -> usize {
        match self.convention {
            SpanConvention::InclusiveEnd => self.end + 1,
            SpanConvention::ExclusiveEnd => self.end,
        }
    }
}

/// Half-open range of token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Byte range covered by this span of `enc`; `None` when empty.
    pub fn byte_span(&self, enc: &Encoding) -> Option<ByteSpan> {
        if self.is_empty() || self.end > enc.len() {
            return None;
        }
        let o = enc.offsets();
        Some(ByteSpan::new(o[self.start].start, o[self.end - 1].end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    /// Token boundaries coincide with the requested range.
    Exact,
    /// The smallest covering run of tokens overshoots the range.
    Expanded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentResult {
    pub kind: AlignmentKind,
    pub span: Option<TokenSpan>,
    /// Source text under `span`.
    pub decoded: Option<String>,
}

impl AlignmentResult {
    fn failed() -> Self {
        Self {
            kind: AlignmentKind::Failed,
            span: None,
            decoded: None,
        }
    }
}

/// Converts a codepoint span to the half-open byte range it covers.
pub fn codepoint_span_to_byte_span(text: &str, span: CharSpan) -> Result<ByteSpan, AlignError> {
    let start = span.start;
    let end = span.end_exclusive();
    if end < start {
        return Err(AlignError::Inverted {
            start,
            end: span.end,
        });
    }
    let mut byte_start = None;
    let mut byte_end = None;
    let mut count = 0;
    for (i, (b, _)) in text.char_indices().enumerate() {
        if i == start {
            byte_start = Some(b);
        }
        if i == end {
            byte_end = Some(b);
            break;
        }
        count = i + 1;
    }
    if byte_end.is_none() && end == count {
        byte_end = Some(text.len());
    }
    if byte_start.is_none() && start == count && start == end {
        byte_start = Some(text.len());
    }
    match (byte_start, byte_end) {
        (Some(s), Some(e)) => Ok(ByteSpan::new(s, e)),
        _ => Err(AlignError::OutOfRange {
            start,
            end,
            len: text.chars().count(),
        }),
    }
}

/// Inverse of [`codepoint_span_to_byte_span`] for char-aligned ranges.
pub fn byte_span_to_codepoint_span(text: &str, span: ByteSpan) -> Option<CharSpan> {
    if span.end > text.len()
        || span.end < span.start
        || !text.is_char_boundary(span.start)
        || !text.is_char_boundary(span.end)
    {
        return None;
    }
    let start = text[..span.start].chars().count();
    let len = text[span.start..span.end].chars().count();
    Some(CharSpan::exclusive(start, start + len))
}

/// Finds the run of tokens covering `span` in `enc`.
///
/// `text` is the source `enc` was produced from; it supplies the `decoded`
/// field. Empty encodings, empty spans and spans outside the source are
/// `Failed`.
pub fn token_slice_for_span(enc: &Encoding, text: &str, span: ByteSpan) -> AlignmentResult {
    if enc.is_empty() || span.is_empty() || span.end > enc.source_len_bytes() {
        return AlignmentResult::failed();
    }
    let offsets = enc.offsets();
    let first = offsets.partition_point(|o| o.end <= span.start);
    let last = offsets.partition_point(|o| o.end < span.end);
    let covered = ByteSpan::new(offsets[first].start, offsets[last].end);
    let kind = if covered == span {
        AlignmentKind::Exact
    } else {
        AlignmentKind::Expanded
    };
    let decoded = text
        .as_bytes()
        .get(covered.start..covered.end)
        .map(|b| String::from_utf8_lossy(b).into_owned());
    AlignmentResult {
        kind,
        span: Some(TokenSpan::new(first, last + 1)),
        decoded,
    }
}

/// Leftmost verbatim occurrence of `needle` in `haystack`. An empty needle
/// matches at 0.
pub fn find_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> Option<TokenSpan> {
    SubsequenceMatches::new(haystack, needle).next()
}

/// All verbatim occurrences of `needle`, left to right, possibly overlapping.
pub fn find_all_subsequences(haystack: &[TokenId], needle: &[TokenId]) -> Vec<TokenSpan> {
    if needle.is_empty() {
        return vec![TokenSpan::new(0, 0)];
    }
    SubsequenceMatches::new(haystack, needle).collect()
}

/// Knuth-Morris-Pratt scan over token ids.
struct SubsequenceMatches<'a> {
    haystack: &'a [TokenId],
    needle: &'a [TokenId],
    failure: Vec<usize>,
    pos: usize,
    matched: usize,
    empty_done: bool,
}

impl<'a> SubsequenceMatches<'a> {
    fn new(haystack: &'a [TokenId], needle: &'a [TokenId]) -> Self {
        let mut failure = vec![0; needle.len()];
        let mut k = 0;
        for i in 1..needle.len() {
            while k > 0 && needle[i] != needle[k] {
                k = failure[k - 1];
            }
            if needle[i] == needle[k] {
                k += 1;
            }
            failure[i] = k;
        }
        Self {
            haystack,
            needle,
            failure,
            pos: 0,
            matched: 0,
            empty_done: false,
        }
    }
}

impl Iterator for SubsequenceMatches<'_> {
    type Item = TokenSpan;

    fn next(&mut self) -> Option<TokenSpan> {
        if self.needle.is_empty() {
            if self.empty_done {
                return None;
            }
            self.empty_done = true;
            return Some(TokenSpan::new(0, 0));
        }
        while self.pos < self.haystack.len() {
            let t = self.haystack[self.pos];
            while self.matched > 0 && t != self.needle[self.matched] {
                self.matched = self.failure[self.matched - 1];
            }
            if t == self.needle[self.matched] {
                self.matched += 1;
            }
            self.pos += 1;
            if self.matched == self.needle.len() {
                self.matched = self.failure[self.matched - 1];
                return Some(TokenSpan::new(self.pos - self.needle.len(), self.pos));
            }
        }
        None
    }
}
