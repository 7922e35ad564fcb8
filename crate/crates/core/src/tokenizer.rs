//! Byte-level tokenizer: ids 0..=255 are raw bytes, then four specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const EOT: u32 = 258;
pub const PAD: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Lossy decode; specials are rendered as `<bos>` etc.
pub fn decode(ids: &[u32]) -> String {
    let mut bytes = Vec::new();
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS => bytes.extend_from_slice(b"<bos>"),
            EOS => bytes.extend_from_slice(b"<eos>"),
            EOT => bytes.extend_from_slice(b"<eot>"),
            PAD => bytes.extend_from_slice(b"<pad>"),
            _ => bytes.extend_from_slice(b"<unk>"),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn is_special(id: u32) -> bool {
    (256..VOCAB_SIZE as u32).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_ascii() {
        let ids = encode("hi!");
        assert_eq!(ids, vec![104, 105, 33]);
        assert_eq!(decode(&ids), "hi!");
        assert_eq!(decode(&[BOS, 65, EOT, 66, EOS]), "<bos>A<eot>B<eos>");
    }
}
