use std::io::{BufRead, Write};
use std::path::Path;

use compass_core::tokenizer::{self, BOS, EOS, EOT};
use serde::{Deserialize, Serialize};

use crate::{Result, SftError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Loss over prompt and answer.
    Ecommerce,
    /// Loss over the answer only.
    General,
}

/// One JSON Lines record of an SFT dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub answer: String,
    pub domain: Domain,
    /// Earlier dialogue turns, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<String>,
}

/// An encoded sample: the sequence is `BOS · prompt · answer`.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub domain: Domain,
    /// Indices (into the full sequence) of EOT tokens.
    pub turn_boundaries: Vec<usize>,
}

impl SftSample {
    pub fn new(prompt: Vec<u32>, answer: Vec<u32>, domain: Domain) -> Self {
        let turn_boundaries = prompt
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == EOT)
            .map(|(i, _)| i + 1)
            .collect();
        Self {
            prompt,
            answer,
            domain,
            turn_boundaries,
        }
    }

    /// `BOS · prompt · answer`.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.len());
        t.push(BOS);
        t.extend_from_slice(&self.prompt);
        t.extend_from_slice(&self.answer);
        t
    }

    pub fn len(&self) -> usize {
        1 + self.prompt.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Earlier turns and the prompt are joined with EOT; the answer ends in EOS.
pub fn encode(record: &SftRecord) -> SftSample {
    let mut prompt = Vec::new();
    for turn in &record.turns {
        prompt.extend(tokenizer::encode(turn));
        prompt.push(EOT);
    }
    prompt.extend(tokenizer::encode(&record.prompt));
    let mut answer = tokenizer::encode(&record.answer);
    answer.push(EOS);
    SftSample::new(prompt, answer, record.domain)
}

/// Per-position flags over the full sequence: entry `p` is set when the
/// prediction of token `p + 1` from position `p` is trained. General samples
/// train the `|y|` answer predictions, e-commerce samples all `|x| + |y|`.
pub fn build_loss_mask(sample: &SftSample, index: usize) -> Result<Vec<bool>> {
    if sample.answer.is_empty() {
        return Err(SftError::EmptyAnswer { index });
    }
    let n = sample.len();
    let x = sample.prompt.len();
    let first = match sample.domain {
        Domain::Ecommerce => 0,
        Domain::General => x,
    };
    Ok((0..n).map(|p| p >= first && p + 1 < n).collect())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SftRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| SftError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[SftRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|source| SftError::Parse { line: 0, source })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: usize, y: usize, domain: Domain) -> SftSample {
        SftSample::new(vec![65; x], vec![66; y], domain)
    }

    #[test]
    fn mask_cardinalities() {
        let count = |s: &SftSample| {
            build_loss_mask(s, 0)
                .unwrap()
                .iter()
                .filter(|&&m| m)
                .count()
        };
        assert_eq!(count(&sample(5, 3, Domain::General)), 3);
        assert_eq!(count(&sample(5, 3, Domain::Ecommerce)), 8);
        assert_eq!(count(&sample(0, 3, Domain::Ecommerce)), 3);
        assert!(matches!(
            build_loss_mask(&sample(2, 0, Domain::General), 7),
            Err(SftError::EmptyAnswer { index: 7 })
        ));
    }

    #[test]
    fn general_mask_covers_answer_predictions() {
        let s = sample(2, 2, Domain::General);
        // BOS a a b b: positions 2 and 3 predict the two answer tokens
        assert_eq!(
            build_loss_mask(&s, 0).unwrap(),
            vec![false, false, true, true, false]
        );
    }

    #[test]
    fn encode_joins_turns_with_eot() {
        let r = SftRecord {
            prompt: "b".into(),
            answer: "c".into(),
            domain: Domain::General,
            turns: vec!["a".into()],
        };
        let s = encode(&r);
        assert_eq!(s.tokens(), vec![BOS, 97, EOT, 98, 99, EOS]);
        assert_eq!(s.turn_boundaries, vec![2]);
    }
}
