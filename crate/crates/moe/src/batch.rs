//! Flattened token batches. Several sequences (or packed samples) share one
//! row-major token axis; attention never crosses a segment boundary.

use compass_core::Prng;

use crate::error::{MoeError, Result};

/// Segment id of padding positions.
pub const PAD_SEGMENT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    /// Position within the segment, restarting at 0 for each one.
    pub positions: Vec<usize>,
    /// Target for the prediction made at each position.
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TokenBatch {
    /// Next-token prediction over independent sequences, each its own segment.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let mut b = TokenBatch {
            tokens: vec![],
            segments: vec![],
            positions: vec![],
            targets: vec![],
            loss_mask: vec![],
        };
        if seqs.is_empty() {
            return Err(MoeError::SequenceTooShort { len: 0, need: 2 });
        }
        for (s, seq) in seqs.iter().enumerate() {
            if seq.len() < 2 {
                return Err(MoeError::SequenceTooShort {
                    len: seq.len(),
                    need: 2,
                });
            }
            for (i, &t) in seq.iter().enumerate() {
                b.tokens.push(t);
                b.segments.push(s as u32);
                b.positions.push(i);
                let next = seq.get(i + 1);
                b.targets.push(next.copied().unwrap_or(0));
                b.loss_mask.push(next.is_some());
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Whether positions `i` and `i + d` lie in the same non-pad segment.
    pub fn same_segment(&self, i: usize, d: usize) -> bool {
        let s = self.segments[i];
        s != PAD_SEGMENT && self.segments.get(i + d) == Some(&s)
    }

    pub fn validate(&self, vocab: usize, max_seq_len: usize) -> Result<()> {
        let n = self.tokens.len();
        if [
            self.segments.len(),
            self.positions.len(),
            self.targets.len(),
            self.loss_mask.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(MoeError::Config(
                "batch fields have different lengths".into(),
            ));
        }
        if n == 0 {
            return Err(MoeError::SequenceTooShort { len: 0, need: 2 });
        }
        if let Some(&id) = self
            .tokens
            .iter()
            .chain(&self.targets)
            .find(|&&t| t as usize >= vocab)
        {
            return Err(MoeError::TokenOutOfRange { id, vocab });
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= max_seq_len) {
            return Err(MoeError::SequenceTooLong {
                len: p + 1,
                max: max_seq_len,
            });
        }
        Ok(())
    }

    /// Row-major `[n × n]` mask: `i` attends `j` iff `j ≤ i` and both share
    /// a non-pad segment.
    pub fn attention_mask(&self) -> Vec<bool> {
        attention_mask(&self.segments)
    }
}

pub fn attention_mask(segments: &[u32]) -> Vec<bool> {
    let n = segments.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        if segments[i] == PAD_SEGMENT {
            continue;
        }
        for j in 0..=i {
            m[i * n + j] = segments[j] == segments[i];
        }
    }
    m
}

/// `batch` random windows of `seq_len` tokens from `stream`.
pub fn sample_windows(
    stream: &[u32],
    batch: usize,
    seq_len: usize,
    rng: &mut Prng,
) -> Result<TokenBatch> {
    if stream.len() < seq_len || seq_len < 2 {
        return Err(MoeError::SequenceTooShort {
            len: stream.len(),
            need: seq_len.max(2),
        });
    }
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|_| {
            let start = rng.below((stream.len() - seq_len + 1) as u64) as usize;
            stream[start..start + seq_len].to_vec()
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_sequence_is_rejected() {
        assert!(matches!(
            TokenBatch::from_sequences(&[vec![5]]),
            Err(MoeError::SequenceTooShort { len: 1, need: 2 })
        ));
    }

    #[test]
    fn mask_is_block_causal() {
        let m = attention_mask(&[0, 0, 1, PAD_SEGMENT]);
        let rows: Vec<Vec<bool>> = m.chunks(4).map(|r| r.to_vec()).collect();
        assert_eq!(rows[0], vec![true, false, false, false]);
        assert_eq!(rows[1], vec![true, true, false, false]);
        assert_eq!(rows[2], vec![false, false, true, false]);
        assert_eq!(rows[3], vec![false; 4]);
    }
}
