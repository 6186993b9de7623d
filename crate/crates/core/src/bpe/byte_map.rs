/// The GPT-2 printable-byte alphabet.
///
/// Bytes 33..=126, 161..=172 and 174..=255 stand for themselves; the other
/// 68 bytes are assigned codepoints 256, 257, ... in ascending byte order.
/// The space byte therefore becomes `Ġ` (U+0120) and newline `Ċ` (U+010A).
#[derive(Debug, Clone)]
pub struct ByteMap {
    to_unit: [char; 256],
    from_unit: [Option<u8>; UNIT_LIMIT],
}

// Every unit is below 256 + 68.
const UNIT_LIMIT: usize = 324;

impl ByteMap {
    pub fn gpt2() -> Self {
        let mut to_unit = ['\0'; 256];
        let mut next = 256u32;
        for b in 0..=255u8 {
            let direct = matches!(b, 33..=126 | 161..=172 | 174..=255);
            let cp = if direct {
                b as u32
            } else {
                let cp = next;
                next += 1;
                cp
            };
            to_unit[b as usize] = char::from_u32(cp).expect("codepoints below 0x200 are valid");
        }
        let mut from_unit = [None; UNIT_LIMIT];
        for (b, &c) in to_unit.iter().enumerate() {
            from_unit[c as usize] = Some(b as u8);
        }
        Self { to_unit, from_unit }
    }

    #[inline]
    pub fn unit(&self, byte: u8) -> char {
        self.to_unit[byte as usize]
    }

    #[inline]
    pub fn byte(&self, unit: char) -> Option<u8> {
        self.from_unit.get(unit as usize).copied().flatten()
    }

    /// Maps raw bytes to their unit string.
    pub fn encode_bytes(&self, bytes: &[u8]) -> String {
        bytes.iter().map(|&b| self.unit(b)).collect()
    }
}

impl Default for ByteMap {
    fn default() -> Self {
        Self::gpt2()
    }
}
