use compass_core::tokenizer::PAD;
use compass_moe::{batch::PAD_SEGMENT, TokenBatch};

use crate::data::{build_loss_mask, SftSample};
use crate::{Result, SftError};

/// One fixed-length row holding whole samples followed by padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    /// Slot of the sample within this row, `PAD_SEGMENT` for padding.
    pub segments: Vec<u32>,
    /// Per-position training flags (see [`build_loss_mask`]).
    pub loss_mask: Vec<bool>,
    /// Input indices of the packed samples, in placement order.
    pub sample_ids: Vec<usize>,
    pub pad_count: usize,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn used(&self) -> usize {
        self.tokens.len() - self.pad_count
    }
}

/// First-fit packing in input order: each sample goes into the earliest row
/// with room, otherwise a new row. Samples are never split.
pub fn pack_samples(samples: &[SftSample], max_len: usize) -> Result<Vec<PackedBatch>> {
    if max_len == 0 {
        return Err(SftError::ZeroMaxLen);
    }
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let len = s.len();
        if len > max_len {
            return Err(SftError::SampleTooLong {
                index: i,
                len,
                max_len,
            });
        }
        match bins.iter_mut().find(|(used, _)| used + len <= max_len) {
            Some((used, ids)) => {
                *used += len;
                ids.push(i);
            }
            None => bins.push((len, vec![i])),
        }
    }
    bins.into_iter()
        .map(|(used, ids)| {
            let mut p = PackedBatch {
                tokens: Vec::with_capacity(max_len),
                segments: Vec::with_capacity(max_len),
                loss_mask: Vec::with_capacity(max_len),
                sample_ids: ids,
                pad_count: max_len - used,
            };
            for (slot, &i) in p.sample_ids.iter().enumerate() {
                let s = &samples[i];
                p.tokens.extend(s.tokens());
                p.segments.extend(std::iter::repeat_n(slot as u32, s.len()));
                p.loss_mask.extend(build_loss_mask(s, i)?);
            }
            p.tokens.resize(max_len, PAD);
            p.segments.resize(max_len, PAD_SEGMENT);
            p.loss_mask.resize(max_len, false);
            Ok(p)
        })
        .collect()
}

/// Row-major `[L × L]` mask: causal, within one sample, nothing for padding.
pub fn build_attention_mask(pack: &PackedBatch) -> Vec<bool> {
    compass_moe::batch::attention_mask(&pack.segments)
}

/// Flatten rows into one model batch; segment ids are renumbered so that
/// samples from different rows stay apart.
pub fn packs_to_batch(packs: &[PackedBatch]) -> TokenBatch {
    let mut b = TokenBatch {
        tokens: vec![],
        segments: vec![],
        positions: vec![],
        targets: vec![],
        loss_mask: vec![],
    };
    let mut base = 0u32;
    for p in packs {
        let n = p.len();
        let mut pos = 0;
        for i in 0..n {
            let seg = p.segments[i];
            if i > 0 && p.segments[i - 1] != seg {
                pos = 0;
            }
            let next_same = i + 1 < n && p.segments[i + 1] == seg && seg != PAD_SEGMENT;
            b.tokens.push(p.tokens[i]);
            b.segments.push(if seg == PAD_SEGMENT {
                PAD_SEGMENT
            } else {
                base + seg
            });
            b.positions.push(if seg == PAD_SEGMENT { 0 } else { pos });
            b.targets
                .push(if next_same { p.tokens[i + 1] } else { PAD });
            b.loss_mask.push(p.loss_mask[i] && next_same);
            pos += 1;
        }
        base += p.sample_ids.len() as u32;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Domain;

    fn sample(len: usize) -> SftSample {
        SftSample::new(vec![1; len - 2], vec![2], Domain::General)
    }

    #[test]
    fn two_sixes_in_ten() {
        let packs = pack_samples(&[sample(6), sample(6)], 10).unwrap();
        assert_eq!(packs.len(), 2);
        assert!(packs.iter().all(|p| p.pad_count == 4));
    }

    #[test]
    fn first_fit_backfills_earlier_rows() {
        let packs = pack_samples(&[sample(6), sample(6), sample(4)], 10).unwrap();
        assert_eq!(packs.len(), 2);
        assert_eq!(packs[0].sample_ids, vec![0, 2]);
        assert_eq!(packs[0].pad_count, 0);
    }

    #[test]
    fn over_length_is_a_named_error() {
        let e = pack_samples(&[sample(4), sample(11)], 10).unwrap_err();
        assert!(matches!(
            e,
            SftError::SampleTooLong {
                index: 1,
                len: 11,
                max_len: 10
            }
        ));
    }
}
