use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::TokenId;

/// Ranked merge rules keyed by the ids of the two halves.
#[derive(Debug, Clone, Default)]
pub(crate) struct MergeTable {
    rules: HashMap<(TokenId, TokenId), (u32, TokenId)>,
}

impl MergeTable {
    /// Keeps the first (lowest) rank when a pair is listed twice.
    pub(crate) fn insert(&mut self, left: TokenId, right: TokenId, rank: u32, merged: TokenId) {
        self.rules.entry((left, right)).or_insert((rank, merged));
    }

    #[inline]
    fn get(&self, left: TokenId, right: TokenId) -> Option<(u32, TokenId)> {
        self.rules.get(&(left, right)).copied()
    }

    pub(crate) fn len(&self) -> usize {
        self.rules.len()
    }
}

/// A merged symbol: its id and the unit range it covers within the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Piece {
    pub id: TokenId,
    pub start: usize,
    pub len: usize,
}

const NONE: usize = usize::MAX;

struct Symbol {
    id: TokenId,
    start: usize,
    len: usize,
    prev: usize,
    next: usize,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    rank: u32,
    // Symbol slots keep their original index after merging, so ordering by
    // `left` is ordering by position in the segment.
    left: usize,
    right: usize,
    left_id: TokenId,
    right_id: TokenId,
    merged: TokenId,
}

/// Repeatedly applies the lowest-ranked applicable merge (leftmost on ties)
/// until none applies.
pub(crate) fn merge_units(units: &[TokenId], table: &MergeTable) -> Vec<Piece> {
    let n = units.len();
    if n < 2 {
        return units
            .iter()
            .enumerate()
            .map(|(i, &id)| Piece { id, start: i, len: 1 })
            .collect();
    }

    let mut syms: Vec<Symbol> = units
        .iter()
        .enumerate()
        .map(|(i, &id)| Symbol {
            id,
            start: i,
            len: 1,
            prev: if i == 0 { NONE } else { i - 1 },
            next: if i + 1 == n { NONE } else { i + 1 },
        })
        .collect();

    let mut heap = BinaryHeap::new();
    let candidate = |syms: &[Symbol], left: usize, right: usize| {
        table
            .get(syms[left].id, syms[right].id)
            .map(|(rank, merged)| {
                Reverse(Candidate {
                    rank,
                    left,
                    right,
                    left_id: syms[left].id,
                    right_id: syms[right].id,
                    merged,
                })
            })
    };
    for i in 0..n - 1 {
        if let Some(c) = candidate(&syms, i, i + 1) {
            heap.push(c);
        }
    }

    while let Some(Reverse(c)) = heap.pop() {
        let l = &syms[c.left];
        if l.len == 0 || l.next != c.right || l.id != c.left_id || syms[c.right].id != c.right_id {
            continue;
        }
        let right_len = syms[c.right].len;
        let right_next = syms[c.right].next;
        {
            let l = &mut syms[c.left];
            l.id = c.merged;
            l.len += right_len;
            l.next = right_next;
        }
        syms[c.right].len = 0;
        if right_next != NONE {
            syms[right_next].prev = c.left;
        }

        let prev = syms[c.left].prev;
        if prev != NONE {
            if let Some(c) = candidate(&syms, prev, c.left) {
                heap.push(c);
            }
        }
        if right_next != NONE {
            if let Some(c) = candidate(&syms, c.left, right_next) {
                heap.push(c);
            }
        }
    }

    let mut out = Vec::new();
    let mut i = 0;
    while i != NONE {
        let s = &syms[i];
        out.push(Piece {
            id: s.id,
            start: s.start,
            len: s.len,
        });
        i = s.next;
    }
    out
}
