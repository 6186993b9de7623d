//! Independent reference implementations used as test oracles, plus
//! fixture loaders shared by the integration suites.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;

use consistok::align::{AlignmentKind, TokenSpan};
use consistok::mrqa::{open_dataset, ReadOptions};
use consistok::{ByteSpan, Encoding, ExtractiveExample, TokenId, Tokenizer};

pub fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> PathBuf {
    crate_dir().join("fixtures").join(name)
}

pub fn gpt2() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let dir = crate_dir().join("assets/gpt2");
        Tokenizer::from_files(dir.join("vocab.json"), dir.join("merges.txt")).expect("bundled assets load")
    })
}

pub fn load_examples(path: &Path) -> Vec<ExtractiveExample> {
    let (_, reader) = open_dataset(path, ReadOptions::default()).expect("fixture opens");
    reader.map(|r| r.expect("fixture record is valid")).collect()
}

// ---------------------------------------------------------------------------
// Toy tokenizers

/// A tokenizer over the 256 byte units plus merges built from random
/// concatenations of `alphabet` symbols. Byte units get ids equal to their
/// byte value.
pub struct Toy {
    pub tok: Tokenizer,
    pub merges: Vec<(String, String)>,
}

pub fn byte_units() -> Vec<String> {
    let map = consistok::bpe::ByteMap::gpt2();
    (0..=255u8).map(|b| map.unit(b).to_string()).collect()
}

pub fn random_toy(rng: &mut impl Rng, alphabet: &[u8], n_merges: usize) -> Toy {
    let units = byte_units();
    let mut vocab: HashMap<String, TokenId> = units.iter().enumerate().map(|(i, u)| (u.clone(), i as TokenId)).collect();
    let mut pool: Vec<String> = alphabet.iter().map(|&b| units[b as usize].clone()).collect();
    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let a = pool.choose(rng).unwrap().clone();
        let b = pool.choose(rng).unwrap().clone();
        let joined = format!("{a}{b}");
        if joined.chars().count() > 6 {
            continue;
        }
        if !vocab.contains_key(&joined) {
            let id = vocab.len() as TokenId;
            vocab.insert(joined.clone(), id);
            pool.push(joined);
        }
        merges.push((a, b));
    }
    let tok = Tokenizer::from_parts(vocab, merges.clone()).expect("toy tokenizer is valid");
    Toy { tok, merges }
}

/// Brute-force BPE on one segment: repeatedly apply the single applicable
/// merge with the lowest rank, leftmost on ties, until none applies.
pub fn oracle_bpe(units: &[String], merges: &[(String, String)]) -> Vec<String> {
    let mut rank: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, (a, b)) in merges.iter().enumerate() {
        rank.entry((a.as_str(), b.as_str())).or_insert(i);
    }
    let mut parts: Vec<String> = units.to_vec();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..parts.len().saturating_sub(1) {
            if let Some(&r) = rank.get(&(parts[i].as_str(), parts[i + 1].as_str())) {
                if best.is_none_or(|(br, _)| r < br) {
                    best = Some((r, i));
                }
            }
        }
        let Some((_, i)) = best else { break };
        let right = parts.remove(i + 1);
        parts[i].push_str(&right);
    }
    parts
}

/// The reference GPT-2 loop: pick the lowest-ranked adjacent pair, merge
/// every occurrence of it in one left-to-right pass, repeat.
pub fn reference_gpt2_bpe(units: &[String], rank: &HashMap<(String, String), usize>) -> Vec<String> {
    let mut word: Vec<String> = units.to_vec();
    while word.len() > 1 {
        let best = word
            .windows(2)
            .filter_map(|w| rank.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, (w[0].clone(), w[1].clone()))))
            .min_by_key(|(r, _)| *r);
        let Some((_, (a, b))) = best else { break };
        let mut next = Vec::with_capacity(word.len());
        let mut i = 0;
        while i < word.len() {
            if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                next.push(format!("{a}{b}"));
                i += 2;
            } else {
                next.push(word[i].clone());
                i += 1;
            }
        }
        word = next;
    }
    word
}

/// Unit strings for each byte of `segment`.
pub fn units_of(segment: &str) -> Vec<String> {
    let map = consistok::bpe::ByteMap::gpt2();
    segment.bytes().map(|b| map.unit(b).to_string()).collect()
}

// ---------------------------------------------------------------------------
// Span oracles

pub fn naive_find(haystack: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    if needle.len() > haystack.len() {
        return None;
    }
    for i in 0..=haystack.len() - needle.len() {
        let mut ok = true;
        for j in 0..needle.len() {
            if haystack[i + j] != needle[j] {
                ok = false;
                break;
            }
        }
        if ok {
            return Some(i);
        }
    }
    None
}

pub fn naive_find_all(haystack: &[TokenId], needle: &[TokenId]) -> Vec<usize> {
    if needle.is_empty() {
        return vec![0];
    }
    (0..haystack.len())
        .filter(|&i| i + needle.len() <= haystack.len() && haystack[i..i + needle.len()] == *needle)
        .collect()
}

/// Smallest token run whose byte range contains `span`, by trying every
/// `(i, j)` pair.
pub fn naive_token_slice(enc: &Encoding, span: ByteSpan) -> Option<(AlignmentKind, TokenSpan)> {
    if enc.is_empty() || span.start >= span.end || span.end > enc.source_len_bytes() {
        return None;
    }
    let offsets = enc.offsets();
    let mut best: Option<(usize, usize)> = None;
    for i in 0..offsets.len() {
        for j in i + 1..=offsets.len() {
            let covered = ByteSpan::new(offsets[i].start, offsets[j - 1].end);
            if covered.start <= span.start && span.end <= covered.end && best.is_none_or(|(bi, bj)| j - i < bj - bi) {
                best = Some((i, j));
            }
        }
    }
    let (i, j) = best?;
    let covered = ByteSpan::new(offsets[i].start, offsets[j - 1].end);
    let kind = if covered == span {
        AlignmentKind::Exact
    } else {
        AlignmentKind::Expanded
    };
    Some((kind, TokenSpan::new(i, j)))
}

/// Random tiling of `[0, len)` with random ids.
pub fn random_encoding(rng: &mut impl Rng, len: usize) -> Encoding {
    let mut offsets = Vec::new();
    let mut at = 0;
    while at < len {
        let w = rng.gen_range(1..=4).min(len - at);
        offsets.push(ByteSpan::new(at, at + w));
        at += w;
    }
    let ids = offsets.iter().map(|_| rng.gen_range(0..50)).collect();
    Encoding::from_parts(ids, offsets, len).expect("tiling is valid")
}

/// Whether some contiguous run of context tokens decodes, after trimming
/// edge whitespace, to `answer.trim()`. Tries every slice that is not
/// already too long to match.
pub fn some_slice_matches(tok: &Tokenizer, ids: &[TokenId], answer: &str) -> bool {
    let wanted = answer.trim();
    for i in 0..ids.len() {
        for j in i + 1..=ids.len() {
            let bytes = tok.decode_bytes(&ids[i..j]).unwrap();
            if let Ok(s) = std::str::from_utf8(&bytes) {
                if s.trim() == wanted {
                    return true;
                }
            }
            // Growing the slice only shortens its trimmed text through the
            // last, possibly incomplete, codepoint.
            if String::from_utf8_lossy(&bytes).trim().len() > wanted.len() + 8 {
                break;
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Metrics oracles

/// Exact p-value of the two-sided sign-flip test by listing all `2^n`
/// sign assignments.
pub fn exhaustive_sign_flip(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let observed: f64 = d.iter().sum::<f64>().abs();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = d
            .iter()
            .enumerate()
            .map(|(i, x)| if mask >> i & 1 == 1 { -x } else { *x })
            .sum();
        if s.abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Random string mixing ASCII, whitespace, control bytes, punctuation and
/// multi-byte codepoints.
pub fn random_text(rng: &mut impl Rng, max_chars: usize) -> String {
    const POOL: &[&str] = &[
        "a", "b", "Z", "q", "é", "ß", "Ω", "я", "中", "文", "日", "😀", "🎉", "\u{3000}", "\u{200b}", " ", " ", " ",
        "  ", "\n", "\t", "\r\n", "\u{0}", "\u{7}", "\u{1b}", "\u{7f}", "\u{ad}", "0", "1", "9", "½", "٣", "'s",
        "'ll", "'", "\"", ".", ",", "!", "?", "-", "(", ")", "$", "%", "€", "\u{2014}", "…",
    ];
    let n = rng.gen_range(0..=max_chars);
    let mut s = String::new();
    for _ in 0..n {
        if rng.gen_bool(0.1) {
            s.push(char::from_u32(rng.gen_range(0..0x11000)).unwrap_or('x'));
        } else {
            s.push_str(POOL.choose(rng).unwrap());
        }
    }
    s
}

/// Hand-counted scores for `metrics_20.jsonl` against
/// `metrics_20_preds.json`: `(qid, em, f1, predicted, out_of_context)`.
///
/// F1 counts are over normalized tokens (lowercased, punctuation and the
/// articles a/an/the removed). For example m02: the prediction has 4 tokens
/// {nazi, soldiers, during, holocaust}, the gold 14; the overlap is 3, so
/// P = 3/4, R = 3/14 and F1 = 2PR/(P+R) = 1/3.
pub const METRICS_20_HAND: [(&str, f64, f64, bool, bool); 20] = [
    ("m01", 0.0, 0.0, true, true),             // "Dorfos" vs "Doritos": no overlap
    ("m03", 1.0, 1.0, true, false),
    ("m04", 1.0, 1.0, true, false),
    ("m05", 0.0, 2.0 / 3.0, true, false),      // {anheuserbusch} vs {anheuserbusch, inbev}
    ("m06", 0.0, 2.0 / 3.0, true, false),      // {26} vs {january, 26}
    ("m07", 0.0, 2.0 / 3.0, true, false),      // {pokémon, company} vs 4 tokens
    ("m08", 1.0, 1.0, true, false),            // leading "the" is dropped
    ("m09", 1.0, 1.0, true, false),            // leading "a" is dropped
    ("m10", 0.0, 2.0 / 3.0, true, false),      // 2 of 4 gold tokens, precision 1
    ("m11", 0.0, 0.0, false, false),           // no prediction
    ("m12", 1.0, 1.0, true, true),             // case differs from the context
    ("m13", 0.0, 6.0 / 7.0, true, true),       // P = 3/4, R = 1; quote breaks the substring
    ("m02", 0.0, 1.0 / 3.0, true, true),
    ("m14", 1.0, 1.0, true, false),
    ("m15", 0.0, 2.0 / 3.0, true, false),      // {kaufman} vs {gerald, kaufman}
    ("m16", 0.0, 2.0 / 3.0, true, false),      // P = 2/4, R = 1
    ("m17", 0.0, 2.0 / 3.0, true, false),      // P = 2/4, R = 1
    ("m18", 0.0, 2.0 / 3.0, true, false),      // best gold "LONDON, England"
    ("m19", 0.0, 0.0, true, false),            // empty prediction vs "israel"
    ("m20", 0.0, 2.0 / 3.0, true, false),      // P = R = 2/3
];
