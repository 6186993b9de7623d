//! Byte-level BPE with exact byte offsets.
//!
//! Text is split with [`SEGMENT_PATTERN`], each segment's bytes are mapped
//! through the printable-byte alphabet ([`ByteMap`]), and ranked merges are
//! applied within the segment. Every token remembers the byte range of the
//! source it came from, so offsets partition the input exactly.

mod byte_map;
mod merge;
mod pretok;

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use byte_map::ByteMap;
pub use pretok::{Segmenter, Segments, SEGMENT_PATTERN};

use merge::{merge_units, MergeTable};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("I/O error reading tokenizer assets")]
    Io(#[from] io::Error),
    #[error("vocabulary is not a JSON object of token -> non-negative integer")]
    VocabJson(#[from] serde_json::Error),
    #[error("id {id} is assigned to both {first:?} and {second:?}")]
    DuplicateId {
        id: TokenId,
        first: String,
        second: String,
    },
    #[error("merges line {line}: expected two units separated by one space, got {content:?}")]
    MalformedMerge { line: usize, content: String },
    #[error("merge rule #{rank}: {left:?} + {right:?} is not in the vocabulary")]
    MergeNotInVocab {
        rank: usize,
        left: String,
        right: String,
    },
    #[error("vocabulary lacks the single-byte unit {unit:?} (byte 0x{byte:02x})")]
    MissingByteUnit { byte: u8, unit: char },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("token {id} contains {unit:?}, which is outside the byte alphabet")]
    UnmappableUnit { id: TokenId, unit: char },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("{ids} ids but {offsets} offsets")]
    LengthMismatch { ids: usize, offsets: usize },
    #[error("offsets do not tile [0, {source_len}) at token {index}")]
    NotAPartition { index: usize, source_len: usize },
}

/// Half-open byte range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ByteSpan {
    pub start: usize,
    pub end: usize,
}

impl ByteSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersects(&self, other: &ByteSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &ByteSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// Token ids plus the byte range each came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    ids: Vec<TokenId>,
    offsets: Vec<ByteSpan>,
    source_len: usize,
}

impl Encoding {
    /// Builds an encoding from raw parts, checking that offsets tile
    /// `[0, source_len)` without gaps, overlaps or empty tokens.
    pub fn from_parts(
        ids: Vec<TokenId>,
        offsets: Vec<ByteSpan>,
        source_len: usize,
    ) -> Result<Self, EncodingError> {
        if ids.len() != offsets.len() {
            return Err(EncodingError::LengthMismatch {
                ids: ids.len(),
                offsets: offsets.len(),
            });
        }
        let mut cursor = 0;
        for (index, o) in offsets.iter().enumerate() {
            if o.start != cursor || o.end <= o.start || o.end > source_len {
                return Err(EncodingError::NotAPartition { index, source_len });
            }
            cursor = o.end;
        }
        if cursor != source_len {
            return Err(EncodingError::NotAPartition {
                index: offsets.len(),
                source_len,
            });
        }
        Ok(Self {
            ids,
            offsets,
            source_len,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn offsets(&self) -> &[ByteSpan] {
        &self.offsets
    }

    pub fn source_len_bytes(&self) -> usize {
        self.source_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }
}

/// An immutable byte-level BPE model. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, TokenId>,
    inverse: HashMap<TokenId, String>,
    merges: Vec<(String, String)>,
    table: MergeTable,
    byte_map: ByteMap,
    byte_ids: [TokenId; 256],
    segmenter: Segmenter,
}

impl Tokenizer {
    /// Loads a GPT-2 style `vocab.json` and `merges.txt` pair.
    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self, LoadError> {
        let vocab = BufReader::new(File::open(vocab)?);
        let merges = BufReader::new(File::open(merges)?);
        Self::from_readers(vocab, merges)
    }

    pub fn from_readers(vocab: impl Read, merges: impl Read) -> Result<Self, LoadError> {
        let vocab: HashMap<String, TokenId> = serde_json::from_reader(vocab)?;
        let merges = parse_merges(BufReader::new(merges))?;
        Self::from_parts(vocab, merges)
    }

    /// Validates and assembles a tokenizer. Merge rank is list position.
    pub fn from_parts(
        vocab: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self, LoadError> {
        let mut inverse: HashMap<TokenId, String> = HashMap::with_capacity(vocab.len());
        for (token, &id) in &vocab {
            if let Some(prev) = inverse.insert(id, token.clone()) {
                let (first, second) = if prev <= *token {
                    (prev, token.clone())
                } else {
                    (token.clone(), prev)
                };
                return Err(LoadError::DuplicateId { id, first, second });
            }
        }

        let byte_map = ByteMap::gpt2();
        let mut byte_ids = [0; 256];
        for b in 0..=255u8 {
            let unit = byte_map.unit(b);
            byte_ids[b as usize] = *vocab
                .get(unit.encode_utf8(&mut [0; 4]) as &str)
                .ok_or(LoadError::MissingByteUnit { byte: b, unit })?;
        }

        let mut table = MergeTable::default();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let merged = format!("{left}{right}");
            let Some(&merged_id) = vocab.get(&merged) else {
                return Err(LoadError::MergeNotInVocab {
                    rank,
                    left: left.clone(),
                    right: right.clone(),
                });
            };
            // Halves missing from the vocabulary can never be produced, so
            // such a rule can never fire.
            if let (Some(&l), Some(&r)) = (vocab.get(left), vocab.get(right)) {
                table.insert(l, r, rank as u32, merged_id);
            }
        }

        Ok(Self {
            vocab,
            inverse,
            merges,
            table,
            byte_map,
            byte_ids,
            segmenter: Segmenter::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn active_merges(&self) -> usize {
        self.table.len()
    }

    pub fn byte_map(&self) -> &ByteMap {
        &self.byte_map
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.inverse.get(&id).map(String::as_str)
    }

    /// Step one of [`encode`](Self::encode): `(segment, start_byte)` pairs.
    pub fn pretokenize<'a>(&'a self, text: &'a str) -> Vec<(&'a str, usize)> {
        self.segmenter.segments(text).collect()
    }

    pub fn encode(&self, text: &str) -> Encoding {
        let mut ids = Vec::with_capacity(text.len() / 3 + 1);
        let mut offsets = Vec::with_capacity(text.len() / 3 + 1);
        let mut units = Vec::new();
        for (segment, start) in self.segmenter.segments(text) {
            units.clear();
            units.extend(segment.bytes().map(|b| self.byte_ids[b as usize]));
            for piece in merge_units(&units, &self.table) {
                ids.push(piece.id);
                let s = start + piece.start;
                offsets.push(ByteSpan::new(s, s + piece.len));
            }
        }
        Encoding {
            ids,
            offsets,
            source_len: text.len(),
        }
    }

    /// Unit strings for `ids`, e.g. `["Ġ1912"]`. Unknown ids render as `<id>`.
    pub fn pieces(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|id| {
                self.token_str(*id)
                    .map(str::to_owned)
                    .unwrap_or_else(|| format!("<{id}>"))
            })
            .collect()
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, DecodeError> {
        let mut out = Vec::with_capacity(ids.len() * 4);
        for &id in ids {
            let token = self.token_str(id).ok_or(DecodeError::UnknownId(id))?;
            for unit in token.chars() {
                out.push(
                    self.byte_map
                        .byte(unit)
                        .ok_or(DecodeError::UnmappableUnit { id, unit })?,
                );
            }
        }
        Ok(out)
    }

    /// Decodes to text. A slice that cuts through a multi-byte character
    /// decodes with replacement characters; use
    /// [`decode_bytes`](Self::decode_bytes) for the exact bytes.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, DecodeError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

/// Parses the merges format: an optional leading `#` version line, then one
/// `left right` pair per non-empty line.
pub fn parse_merges(reader: impl BufRead) -> Result<Vec<(String, String)>, LoadError> {
    let mut merges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if idx == 0 && line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                merges.push((l.to_owned(), r.to_owned()));
            }
            _ => {
                return Err(LoadError::MalformedMerge {
                    line: idx + 1,
                    content: line.to_owned(),
                })
            }
        }
    }
    Ok(merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let map = ByteMap::gpt2();
        let mut vocab: HashMap<String, TokenId> = (0..=255u8)
            .map(|b| (map.unit(b).to_string(), b as TokenId))
            .collect();
        vocab.insert("ab".into(), 256);
        vocab.insert("abc".into(), 257);
        Tokenizer::from_parts(vocab, vec![("a".into(), "b".into()), ("ab".into(), "c".into())]).unwrap()
    }

    #[test]
    fn toy_encode_abc() {
        let tok = toy();
        let enc = tok.encode("abc");
        assert_eq!(enc.ids(), &[257]);
        assert_eq!(enc.offsets(), &[ByteSpan::new(0, 3)]);
        assert_eq!(tok.decode(enc.ids()).unwrap(), "abc");
    }

    #[test]
    fn empty_text() {
        let tok = toy();
        let enc = tok.encode("");
        assert!(enc.is_empty());
        assert_eq!(enc.source_len_bytes(), 0);
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert!(tok.pretokenize("").is_empty());
    }

    #[test]
    fn toy_prefixed() {
        let tok = toy();
        // " abc" is one segment; "Ġ" has no merge with "a" in the toy model.
        let enc = tok.encode(" abc");
        assert_eq!(tok.pieces(enc.ids()), vec!["Ġ", "abc"]);
        assert_eq!(enc.offsets(), &[ByteSpan::new(0, 1), ByteSpan::new(1, 4)]);
    }

    #[test]
    fn rejects_merge_outside_vocab() {
        let map = ByteMap::gpt2();
        let vocab: HashMap<String, TokenId> = (0..=255u8)
            .map(|b| (map.unit(b).to_string(), b as TokenId))
            .collect();
        let err = Tokenizer::from_parts(vocab, vec![("q".into(), "z".into())]).unwrap_err();
        assert!(matches!(err, LoadError::MergeNotInVocab { .. }), "{err}");
    }

    #[test]
    fn rejects_missing_byte_unit() {
        let map = ByteMap::gpt2();
        let vocab: HashMap<String, TokenId> = (0..=254u8)
            .map(|b| (map.unit(b).to_string(), b as TokenId))
            .collect();
        let err = Tokenizer::from_parts(vocab, vec![]).unwrap_err();
        assert!(matches!(err, LoadError::MissingByteUnit { byte: 255, .. }));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let json = r#"{"a": 1, "b": 1}"#;
        let err = Tokenizer::from_readers(json.as_bytes(), "#version: 0.2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, LoadError::DuplicateId { id: 1, .. }));
    }

    #[test]
    fn rejects_bad_json() {
        let err = Tokenizer::from_readers("[1, 2]".as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, LoadError::VocabJson(_)));
        let err = Tokenizer::from_readers(r#"{"a": -1}"#.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(matches!(err, LoadError::VocabJson(_)));
    }

    #[test]
    fn merges_format() {
        let text = "#version: 0.2\nĠ t\n\n# #\r\nab c\n";
        let merges = parse_merges(text.as_bytes()).unwrap();
        assert_eq!(
            merges,
            vec![
                ("Ġ".to_string(), "t".to_string()),
                ("#".into(), "#".into()),
                ("ab".into(), "c".into())
            ]
        );
        let err = parse_merges("#v\na b c\n".as_bytes()).unwrap_err();
        assert!(matches!(err, LoadError::MalformedMerge { line: 2, .. }));
        assert!(parse_merges("#v\nab\n".as_bytes()).is_err());
    }

    #[test]
    fn unknown_id() {
        assert_eq!(toy().decode(&[9999]), Err(DecodeError::UnknownId(9999)));
    }

    #[test]
    fn from_parts_checks_partition() {
        let o = |s, e| ByteSpan::new(s, e);
        assert!(Encoding::from_parts(vec![1, 2], vec![o(0, 2), o(2, 3)], 3).is_ok());
        assert!(Encoding::from_parts(vec![1, 2], vec![o(0, 2), o(3, 4)], 4).is_err());
        assert!(Encoding::from_parts(vec![1], vec![o(0, 2)], 3).is_err());
        assert!(Encoding::from_parts(vec![1], vec![], 0).is_err());
        assert!(Encoding::from_parts(vec![], vec![], 0).is_ok());
    }
}
