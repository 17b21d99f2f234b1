//! Byte-level character ids for the character-CNN token encoder.
//!
//! A token's UTF-8 bytes become ids 0..=255; three sentinels follow. Working
//! at the byte level keeps the id table fixed-size for any input text, so the
//! character path never produces `<unk>` on input.

pub const CHAR_BOW: u16 = 256;
pub const CHAR_EOW: u16 = 257;
pub const CHAR_PAD: u16 = 258;
pub const CHAR_TABLE_SIZE: usize = 259;

/// Encode one token as `[BOW, bytes…, EOW, PAD…]` of exactly `max_len` ids.
///
/// Overlong tokens are truncated so the end-of-word sentinel is always the
/// final non-pad symbol. `max_len` must be at least 3 (BOW + byte + EOW).
pub fn encode_chars(token: &str, max_len: usize) -> Vec<u16> {
    assert!(max_len >= 3, "char encoding needs room for BOW, one byte, EOW");
    assert!(!token.is_empty(), "cannot char-encode an empty token");
    let mut out = Vec::with_capacity(max_len);
    out.push(CHAR_BOW);
    for &b in token.as_bytes().iter().take(max_len - 2) {
        out.push(b as u16);
    }
    out.push(CHAR_EOW);
    out.resize(max_len, CHAR_PAD);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_letter_layout() {
        let e = encode_chars("a", 6);
        assert_eq!(e, vec![CHAR_BOW, b'a' as u16, CHAR_EOW, CHAR_PAD, CHAR_PAD, CHAR_PAD]);
    }

    #[test]
    fn truncation_preserves_eow() {
        let e = encode_chars("abcdefgh", 5);
        assert_eq!(e.len(), 5);
        assert_eq!(e[0], CHAR_BOW);
        assert_eq!(e[4], CHAR_EOW);
        assert!(e.iter().all(|&c| c != CHAR_PAD));
    }

    #[test]
    fn multibyte_tokens_use_bytes() {
        let e = encode_chars("é", 6); // two UTF-8 bytes
        assert_eq!(e[0], CHAR_BOW);
        assert_eq!(&e[1..3], &[0xC3, 0xA9]);
        assert_eq!(e[3], CHAR_EOW);
    }

    #[test]
    fn deterministic() {
        assert_eq!(encode_chars("token", 10), encode_chars("token", 10));
    }
}
