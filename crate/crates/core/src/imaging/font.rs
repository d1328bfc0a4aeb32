//! Built-in 5×7 bitmap font covering `A`–`Z` and `0`–`9`.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// The recognizable alphabet, in template-bank order.
pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

// One row per byte, bit 4 is the leftmost column.
const GLYPHS: [[u8; 7]; 36] = [
    [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
];

pub fn glyph_index(ch: char) -> Option<usize> {
    ALPHABET.find(ch)
}

pub fn glyph_char(index: usize) -> char {
    ALPHABET.as_bytes()[index] as char
}

/// Whether the glyph pixel at `(row, col)` of the unscaled bitmap is lit.
pub fn lit(index: usize, row: usize, col: usize) -> bool {
    GLYPHS[index][row] & (0x10 >> col) != 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bitmap(i: usize) -> Vec<bool> {
        (0..GLYPH_H)
            .flat_map(|r| (0..GLYPH_W).map(move |c| lit(i, r, c)))
            .collect()
    }

    #[test]
    fn glyphs_are_pairwise_distinct_and_nonempty() {
        for i in 0..36 {
            assert!(bitmap(i).iter().any(|&b| b), "glyph {i} empty");
            for j in 0..i {
                assert_ne!(bitmap(i), bitmap(j), "{} == {}", glyph_char(i), glyph_char(j));
            }
        }
    }

    #[test]
    fn alphabet_lookup_round_trips() {
        for (i, ch) in ALPHABET.chars().enumerate() {
            assert_eq!(glyph_index(ch), Some(i));
            assert_eq!(glyph_char(i), ch);
        }
        assert_eq!(glyph_index('a'), None);
    }
}
