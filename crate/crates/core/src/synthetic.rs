//! Synthetic corpora standing in for mined text.
//!
//! "Language" shards are first-order Markov chains over disjoint byte bands,
//! so a model's exposure to each shard is directly measurable in its loss.
//! Instruction shards render product Q&A and general-chat templates.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::prng::Prng;
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    /// Product questions and answers, tagged `ecommerce`.
    ProductQa,
    /// Generic instructions, tagged `general`.
    GeneralChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    Markov {
        band_start: u32,
        band_len: u32,
        /// 0 = i.i.d. draws from a fixed unigram, 1 = first-order chain.
        order: u8,
        /// Dirichlet concentration of each transition row; small values give
        /// peaked, learnable transitions.
        concentration: f64,
        table_seed: u64,
    },
    Template {
        family: TemplateFamily,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShardSpec {
    pub id: usize,
    pub label: String,
    pub generator: GeneratorKind,
}

/// Transition table of a Markov shard, fixed by the shard parameters (not the stream seed).
#[derive(Debug, Clone)]
pub struct MarkovTable {
    pub band_start: u32,
    pub band_len: usize,
    pub order: u8,
    /// `band_len × band_len` row-stochastic matrix (order 1) or a single row
    /// (order 0).
    pub rows: Vec<Vec<f64>>,
}

fn dirichlet(rng: &mut Prng, k: usize, alpha: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Gamma};
    let g = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn sample_index(rng: &mut Prng, probs: &[f64]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl MarkovTable {
    pub fn new(
        band_start: u32,
        band_len: u32,
        order: u8,
        concentration: f64,
        table_seed: u64,
    ) -> Result<Self> {
        if band_len == 0 || band_start + band_len > 256 || order > 1 || concentration <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "bad markov shard: band {band_start}+{band_len}, order {order}, concentration {concentration}"
            )));
        }
        let mut rng = Prng::new(table_seed).split(0x7AB1E);
        let k = band_len as usize;
        let n_rows = if order == 0 { 1 } else { k };
        // a 5% uniform floor keeps every chain ergodic
        let rows = (0..n_rows)
            .map(|_| {
                dirichlet(&mut rng, k, concentration)
                    .into_iter()
                    .map(|p| 0.95 * p + 0.05 / k as f64)
                    .collect()
            })
            .collect();
        Ok(Self {
            band_start,
            band_len: k,
            order,
            rows,
        })
    }

    /// Long-run token distribution over the band (stationary distribution for
    /// order 1), by power iteration.
    pub fn expected_unigram(&self) -> Vec<f64> {
        if self.order == 0 {
            return self.rows[0].clone();
        }
        let k = self.band_len;
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let mut next = vec![0.0; k];
            for (i, row) in self.rows.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    pub fn generate(&self, n_tokens: usize, rng: &mut Prng) -> Vec<u32> {
        let mut out = Vec::with_capacity(n_tokens);
        if n_tokens == 0 {
            return out;
        }
        let start = self.expected_unigram();
        let mut state = sample_index(rng, &start);
        out.push(self.band_start + state as u32);
        while out.len() < n_tokens {
            let row = if self.order == 0 {
                &self.rows[0]
            } else {
                &self.rows[state]
            };
            state = sample_index(rng, row);
            out.push(self.band_start + state as u32);
        }
        out
    }
}

impl SyntheticShardSpec {
    pub fn markov_table(&self) -> Option<Result<MarkovTable>> {
        match self.generator {
            GeneratorKind::Markov {
                band_start,
                band_len,
                order,
                concentration,
                table_seed,
            } => Some(MarkovTable::new(
                band_start,
                band_len,
                order,
                concentration,
                table_seed,
            )),
            GeneratorKind::Template { .. } => None,
        }
    }

    /// Token ids this shard can emit (its vocab band), if it has one.
    pub fn band(&self) -> Option<std::ops::Range<u32>> {
        match self.generator {
            GeneratorKind::Markov {
                band_start,
                band_len,
                ..
            } => Some(band_start..band_start + band_len),
            GeneratorKind::Template { .. } => None,
        }
    }
}

/// Deterministic token stream for `spec`; distinct seeds give distinct streams.
pub fn gen_synthetic(spec: &SyntheticShardSpec, seed: u64, n_tokens: usize) -> Result<Vec<u32>> {
    let mut rng = Prng::new(seed).split(spec.id as u64);
    match &spec.generator {
        GeneratorKind::Markov { .. } => {
            let table = spec.markov_table().expect("markov")?;
            Ok(table.generate(n_tokens, &mut rng))
        }
        GeneratorKind::Template { family } => {
            let mut out = Vec::with_capacity(n_tokens);
            while out.len() < n_tokens {
                let r = render_template(*family, &mut rng);
                out.extend(tokenizer::encode(&r.prompt));
                out.extend(tokenizer::encode(&r.answer));
                out.push(tokenizer::EOS);
            }
            out.truncate(n_tokens);
            Ok(out)
        }
    }
}

/// `n_shards` Markov shards over equal, disjoint slices of the byte range.
pub fn language_suite(n_shards: usize, concentration: f64) -> Vec<SyntheticShardSpec> {
    assert!((1..=256).contains(&n_shards));
    let band = 256 / n_shards as u32;
    (0..n_shards)
        .map(|i| SyntheticShardSpec {
            id: i,
            label: format!("lang{i:02}"),
            generator: GeneratorKind::Markov {
                band_start: i as u32 * band,
                band_len: band,
                order: 1,
                concentration,
                table_seed: 1000 + i as u64,
            },
        })
        .collect()
}

/// A rendered instruction sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub prompt: String,
    pub answer: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<String>,
}

const ITEMS: &[&str] = &[
    "phone case",
    "rice cooker",
    "batik shirt",
    "sandals",
    "power bank",
    "kettle",
    "backpack",
    "sunscreen",
    "desk lamp",
    "earbuds",
    "yoga mat",
    "wok",
];
const COLORS: &[&str] = &["red", "blue", "black", "white", "green"];
const TOPICS: &[&str] = &["rain", "music", "rivers", "cats", "trains", "tea"];

pub fn render_template(family: TemplateFamily, rng: &mut Prng) -> TemplateRecord {
    let pick = |rng: &mut Prng, xs: &[&'static str]| xs[rng.below(xs.len() as u64) as usize];
    match family {
        TemplateFamily::ProductQa => {
            let item = pick(rng, ITEMS);
            let color = pick(rng, COLORS);
            let price = 5 + rng.below(95);
            let stock = rng.below(40);
            match rng.below(3) {
                0 => TemplateRecord {
                    prompt: format!("Q: price of the {color} {item}?"),
                    answer: format!(" A: {price} dollars."),
                    domain: "ecommerce".into(),
                    turns: vec![],
                },
                1 => TemplateRecord {
                    prompt: format!("Q: is the {item} in stock?"),
                    answer: format!(" A: {stock} left in {color}."),
                    domain: "ecommerce".into(),
                    turns: vec![],
                },
                _ => TemplateRecord {
                    prompt: format!("Q: and the {item}?"),
                    answer: format!(" A: {price} dollars, {stock} left."),
                    domain: "ecommerce".into(),
                    turns: vec![format!("Q: do you sell {color} items?"), "A: yes.".into()],
                },
            }
        }
        TemplateFamily::GeneralChat => {
            let topic = pick(rng, TOPICS);
            let n = 2 + rng.below(3);
            TemplateRecord {
                prompt: format!("Write {n} words about {topic}."),
                answer: format!(" {}", vec![topic; n as usize].join(" ")),
                domain: "general".into(),
                turns: vec![],
            }
        }
    }
}
