use regex::Regex;

/// Segmentation pattern applied before merging, as a backtracking regex.
pub const SEGMENT_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

// `regex` has no lookaround. Dropping the `\s+(?!\S)` branch leaves a
// pattern with identical leftmost-first behaviour everywhere except on
// whitespace runs, which `Segments::next` patches up.
const LINEAR_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

#[derive(Debug, Clone)]
pub struct Segmenter {
    re: Regex,
}

impl Segmenter {
    pub fn new() -> Self {
        Self {
            re: Regex::new(LINEAR_PATTERN).expect("static pattern compiles"),
        }
    }

    pub fn segments<'a>(&'a self, text: &'a str) -> Segments<'a> {
        Segments {
            re: &self.re,
            text,
            pos: 0,
        }
    }
}

impl Default for Segmenter {
    fn default() -> Self {
        Self::new()
    }
}

/// Iterator over `(segment, start_byte)`.
pub struct Segments<'a> {
    re: &'a Regex,
    text: &'a str,
    pos: usize,
}

impl<'a> Iterator for Segments<'a> {
    type Item = (&'a str, usize);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        // Every character is a letter, number, whitespace or "other", so a
        // match always begins at `start`.
        let m = self
            .re
            .find_at(self.text, start)
            .filter(|m| m.start() == start)
            .expect("segment pattern matches at every position");
        let mut end = m.end();
        let piece = m.as_str();
        if end < self.text.len() && piece.chars().all(char::is_whitespace) {
            // A whitespace run followed by non-whitespace: `\s+(?!\S)` gives
            // back its last character so the next segment can take it as a
            // prefix. A single character falls through to plain `\s+`.
            let mut rev = piece.chars().rev();
            let last = rev.next().expect("non-empty match");
            if rev.next().is_some() {
                end -= last.len_utf8();
            }
        }
        self.pos = end;
        Some((&self.text[start..end], start))
    }
}
