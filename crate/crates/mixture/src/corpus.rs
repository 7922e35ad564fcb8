use std::path::{Path, PathBuf};

use compass_core::synthetic::{gen_synthetic, SyntheticShardSpec};
use compass_core::Prng;
use serde::{Deserialize, Serialize};

use crate::error::{MixtureError, Result};
use crate::mixture::{apportion, MixtureSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub id: usize,
    pub label: String,
    pub tokens: Vec<u32>,
}

/// Corpus documents are cut from shards in pieces of this many tokens.
pub const DOC_LEN: usize = 32;

/// Draws `n_tokens` from each generator. Shard `i` uses `seed` split by its id.
pub fn synthetic_shards(
    specs: &[SyntheticShardSpec],
    seed: u64,
    n_tokens: usize,
) -> Result<Vec<Shard>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Shard {
                id: i,
                label: s.label.clone(),
                tokens: gen_synthetic(s, seed, n_tokens)?,
            })
        })
        .collect()
}

/// Exactly `budget` tokens with per-shard counts apportioned from the
/// mixture. Each shard contributes whole documents in a shuffled order and
/// is reshuffled and reused when exhausted; the last document is cut to fit.
/// Documents from all shards are then interleaved at random.
pub fn build_proxy_corpus(
    mixture: &MixtureSpec,
    budget: usize,
    shards: &[Shard],
    rng: &mut Prng,
) -> Result<Vec<u32>> {
    if budget == 0 {
        return Err(MixtureError::InvalidArgument(
            "token budget must be positive".into(),
        ));
    }
    if mixture.len() != shards.len() {
        return Err(MixtureError::InvalidArgument(format!(
            "{} weights for {} shards",
            mixture.len(),
            shards.len()
        )));
    }
    let counts = apportion(&mixture.weights, budget);
    let mut pieces: Vec<&[u32]> = Vec::new();
    for (shard, &count) in shards.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        if shard.tokens.is_empty() {
            return Err(MixtureError::EmptyShard(shard.id));
        }
        let docs: Vec<&[u32]> = shard.tokens.chunks(DOC_LEN).collect();
        let mut left = count;
        while left > 0 {
            let mut order: Vec<usize> = (0..docs.len()).collect();
            rng.shuffle(&mut order);
            for i in order {
                let take = docs[i].len().min(left);
                pieces.push(&docs[i][..take]);
                left -= take;
                if left == 0 {
                    break;
                }
            }
        }
    }
    rng.shuffle(&mut pieces);
    Ok(pieces.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardFile {
    pub id: usize,
    pub label: String,
    /// Little-endian u32 token ids; relative paths resolve against the
    /// manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shards: Vec<ShardFile>,
}

/// Writes one `.tok` file per shard plus `shards.json` into `dir`.
pub fn write_shards(dir: &Path, shards: &[Shard]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for s in shards {
        let name = format!("shard_{:02}.tok", s.id);
        let bytes: Vec<u8> = s.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        std::fs::write(dir.join(&name), bytes)?;
        files.push(ShardFile {
            id: s.id,
            label: s.label.clone(),
            path: PathBuf::from(name),
        });
    }
    let path = dir.join("shards.json");
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&ShardManifest { shards: files })?,
    )?;
    Ok(path)
}

pub fn load_shards(manifest: &Path) -> Result<Vec<Shard>> {
    let m: ShardManifest = serde_json::from_slice(&std::fs::read(manifest)?)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    m.shards
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(base.join(&f.path))?;
            if bytes.len() % 4 != 0 {
                return Err(MixtureError::InvalidArgument(format!(
                    "{}: truncated token file",
                    f.path.display()
                )));
            }
            let tokens: Vec<u32> = bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tokens.is_empty() {
                return Err(MixtureError::EmptyShard(f.id));
            }
            Ok(Shard {
                id: f.id,
                label: f.label,
                tokens,
            })
        })
        .collect()
}
