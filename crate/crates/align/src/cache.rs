//! Offline reference log-probabilities.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use compass_moe::MoeModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AlignError, Result};
use crate::pairs::PreferencePair;
use crate::policy::response_logprobs;

pub const DATA_FILE: &str = "ref_logprobs.bin";
pub const MANIFEST_FILE: &str = "ref_logprobs.json";

/// Hex SHA-256 of the length-prefixed little-endian prompt and response ids.
pub fn cache_key(prompt: &[u32], response: &[u32]) -> String {
    let mut h = Sha256::new();
    for part in [prompt, response] {
        h.update((part.len() as u64).to_le_bytes());
        for t in part {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// The frozen reference policy, with a count of the forwards it has run.
pub struct RefModel {
    pub model: MoeModel,
    forwards: AtomicU64,
}

impl RefModel {
    pub fn new(model: MoeModel) -> Self {
        Self {
            model,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn logprobs(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f32>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        response_logprobs(&self.model, prompt, response)
    }

    pub fn forwards(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefLogProbCache {
    entries: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: BTreeMap<String, Span>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Span {
    offset: u64,
    length: u64,
}

impl RefLogProbCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, prompt: &[u32], response: &[u32], logprobs: Vec<f32>) -> Result<()> {
        self.insert_key(cache_key(prompt, response), logprobs)
    }

    fn insert_key(&mut self, key: String, logprobs: Vec<f32>) -> Result<()> {
        if logprobs.iter().any(|v| !(*v <= 0.0)) {
            return Err(AlignError::Cache(format!(
                "{key}: log-prob above zero or NaN"
            )));
        }
        self.entries.insert(key, logprobs);
        Ok(())
    }

    pub fn get(&self, prompt: &[u32], response: &[u32]) -> Result<&[f32]> {
        let key = cache_key(prompt, response);
        match self.entries.get(&key) {
            Some(v) => Ok(v),
            None => Err(AlignError::CacheMiss { key }),
        }
    }

    /// Writes the flat f32 data file and its JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut data = std::io::BufWriter::new(std::fs::File::create(dir.join(DATA_FILE))?);
        let mut manifest = Manifest {
            entries: BTreeMap::new(),
        };
        let mut offset = 0u64;
        for (k, v) in &self.entries {
            for x in v {
                data.write_all(&x.to_le_bytes())?;
            }
            let length = v.len() as u64;
            manifest.entries.insert(k.clone(), Span { offset, length });
            offset += 4 * length;
        }
        data.flush()?;
        std::fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(DATA_FILE))?.read_to_end(&mut bytes)?;
        let mut cache = Self::new();
        for (k, s) in manifest.entries {
            let end = s.offset + 4 * s.length;
            if s.offset % 4 != 0 || end > bytes.len() as u64 {
                return Err(AlignError::Cache(format!("{k}: span outside data file")));
            }
            let v = bytes[s.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.insert_key(k, v)?;
        }
        Ok(cache)
    }
}

/// One reference forward per distinct `(prompt, response)`, in parallel.
pub fn precompute_ref_logprobs(
    pairs: &[PreferencePair],
    reference: &RefModel,
) -> Result<RefLogProbCache> {
    let mut todo: BTreeMap<String, (&[u32], &[u32])> = BTreeMap::new();
    for p in pairs {
        for r in [&p.chosen, &p.rejected] {
            todo.entry(cache_key(&p.prompt, r))
                .or_insert((&p.prompt, r));
        }
    }
    let computed: Vec<(String, Vec<f32>)> = todo
        .into_par_iter()
        .map(|(k, (x, y))| reference.logprobs(x, y).map(|v| (k, v)))
        .collect::<Result<_>>()?;
    let mut cache = RefLogProbCache::new();
    for (k, v) in computed {
        cache.insert_key(k, v)?;
    }
    Ok(cache)
}
