//! Mixed-policy preference pair construction.

use std::io::{BufRead, Write};
use std::path::Path;

use compass_core::{tokenizer, Prng};
use compass_moe::MoeModel;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::sample_response;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OnPolicy,
    OffPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignDomain {
    Agent,
    InstructionFollowing,
    Ecommerce,
    Multilingual,
}

impl AlignDomain {
    /// Small structured output spaces take chosen responses from the
    /// off-policy source only.
    pub fn off_policy_only(self) -> bool {
        matches!(self, AlignDomain::Agent | AlignDomain::InstructionFollowing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub chosen_source: Source,
    /// Always on-policy; kept so datasets can be audited.
    pub rejected_source: Source,
    pub domain: AlignDomain,
}

/// One JSON Lines record of a preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_source: Source,
    pub domain: AlignDomain,
}

impl PreferencePair {
    pub fn to_record(&self) -> PreferenceRecord {
        PreferenceRecord {
            prompt: tokenizer::decode(&self.prompt),
            chosen: tokenizer::decode(&self.chosen),
            rejected: tokenizer::decode(&self.rejected),
            chosen_source: self.chosen_source,
            domain: self.domain,
        }
    }

    /// Records carry only the chosen provenance; rejected is on-policy by
    /// construction.
    pub fn from_record(r: &PreferenceRecord) -> Self {
        Self {
            prompt: tokenizer::encode(&r.prompt),
            chosen: tokenizer::encode(&r.chosen),
            rejected: tokenizer::encode(&r.rejected),
            chosen_source: r.chosen_source,
            rejected_source: Source::OnPolicy,
            domain: r.domain,
        }
    }
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, &p.to_record())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(PreferencePair::from_record(&serde_json::from_str(&line)?));
        }
    }
    Ok(out)
}

/// Produces candidate responses for a prompt.
pub trait CandidateSource {
    fn candidates(&mut self, prompt: &[u32], n: usize) -> Result<Vec<Vec<u32>>>;
}

impl<F: FnMut(&[u32], usize) -> Result<Vec<Vec<u32>>>> CandidateSource for F {
    fn candidates(&mut self, prompt: &[u32], n: usize) -> Result<Vec<Vec<u32>>> {
        self(prompt, n)
    }
}

/// Scores a response in context; higher is better.
pub trait Scorer {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

impl<F: Fn(&[u32], &[u32]) -> Result<f64>> Scorer for F {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        self(prompt, response)
    }
}

/// Samples from the current policy.
pub struct PolicySampler<'m> {
    pub model: &'m MoeModel,
    pub max_new: usize,
    pub temperature: f64,
    pub rng: Prng,
}

impl CandidateSource for PolicySampler<'_> {
    fn candidates(&mut self, prompt: &[u32], n: usize) -> Result<Vec<Vec<u32>>> {
        (0..n)
            .map(|_| {
                sample_response(
                    self.model,
                    prompt,
                    self.max_new,
                    self.temperature,
                    &mut self.rng,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub built: usize,
    /// Chosen did not outscore rejected (or was the same response).
    pub discarded: usize,
}

/// For each prompt: rejected is the lowest-scoring on-policy candidate;
/// chosen is the highest-scoring candidate among off-policy candidates
/// (listed first) and, outside off-policy-only domains, the on-policy ones.
/// Ties go to the earliest entry, so off-policy wins ties. Empty candidates
/// are ignored.
pub fn build_preference_pairs(
    prompts: &[(Vec<u32>, AlignDomain)],
    on_policy: &mut dyn CandidateSource,
    off_policy: &mut dyn CandidateSource,
    scorer: &dyn Scorer,
    n_candidates: usize,
) -> Result<(Vec<PreferencePair>, PairStats)> {
    let mut pairs = Vec::new();
    let mut stats = PairStats::default();
    for (prompt, domain) in prompts {
        let score_all = |cands: Vec<Vec<u32>>| -> Result<Vec<(Vec<u32>, f64)>> {
            cands
                .into_iter()
                .filter(|c| !c.is_empty())
                .map(|c| scorer.score(prompt, &c).map(|s| (c, s)))
                .collect()
        };
        let on = score_all(on_policy.candidates(prompt, n_candidates)?)?;
        let off = score_all(off_policy.candidates(prompt, n_candidates)?)?;

        let on_scores: Vec<f64> = on.iter().map(|c| c.1).collect();
        let off_scores: Vec<f64> = off.iter().map(|c| c.1).collect();
        let rejected = select_rejected(&on_scores).map(|i| &on[i]);
        let chosen =
            select_chosen(&off_scores, &on_scores, domain.off_policy_only()).map(|(src, i)| {
                match src {
                    Source::OffPolicy => (&off[i], src),
                    Source::OnPolicy => (&on[i], src),
                }
            });
        match (chosen, rejected) {
            (Some((c, src)), Some(r)) if c.1 > r.1 && c.0 != r.0 => {
                pairs.push(PreferencePair {
                    prompt: prompt.clone(),
                    chosen: c.0.clone(),
                    rejected: r.0.clone(),
                    chosen_source: src,
                    rejected_source: Source::OnPolicy,
                    domain: *domain,
                });
                stats.built += 1;
            }
            _ => stats.discarded += 1,
        }
    }
    Ok((pairs, stats))
}

/// Index of the lowest on-policy score; ties go to the lowest index.
pub fn select_rejected(on: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in on.iter().enumerate() {
        if best.is_none_or(|b| s < on[b]) {
            best = Some(i);
        }
    }
    best
}

/// Highest score over off-policy candidates, then (unless `off_only`)
/// on-policy ones. Ties prefer off-policy, then the lowest index.
pub fn select_chosen(off: &[f64], on: &[f64], off_only: bool) -> Option<(Source, usize)> {
    let on = if off_only { &[][..] } else { on };
    let pool = off
        .iter()
        .enumerate()
        .map(|(i, &s)| (Source::OffPolicy, i, s))
        .chain(
            on.iter()
                .enumerate()
                .map(|(i, &s)| (Source::OnPolicy, i, s)),
        );
    let mut best: Option<(Source, usize, f64)> = None;
    for c in pool {
        if best.is_none_or(|b| c.2 > b.2) {
            best = Some(c);
        }
    }
    best.map(|(s, i, _)| (s, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_off_policy_then_lowest_index() {
        assert_eq!(
            select_chosen(&[1.0, 1.0], &[1.0, 1.0], false),
            Some((Source::OffPolicy, 0))
        );
        assert_eq!(
            select_chosen(&[], &[1.0, 1.0], false),
            Some((Source::OnPolicy, 0))
        );
        assert_eq!(select_rejected(&[2.0, 1.0, 1.0]), Some(1));
    }

    #[test]
    fn off_only_domains_ignore_on_policy_chosen() {
        assert_eq!(
            select_chosen(&[0.1], &[5.0], true),
            Some((Source::OffPolicy, 0))
        );
        assert_eq!(
            select_chosen(&[0.1], &[5.0], false),
            Some((Source::OnPolicy, 0))
        );
        assert_eq!(select_chosen(&[], &[5.0], true), None);
    }
}
