//! Calibration statistics gathered through the model's forward hook.

use std::collections::BTreeMap;

use compass_core::Session;
use compass_moe::{ForwardHook, MoeModel, RouterDecision, Site, TokenBatch};
use rayon::prelude::*;

use crate::error::Result;

/// Sequences per calibration forward pass.
const CHUNK: usize = 16;

/// Routing counts and absolute maxima seen during calibration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationStats {
    /// Tokens processed.
    pub tokens: u64,
    /// Per MoE layer: tokens routed to each expert (`Σ = tokens·K`).
    pub counts: BTreeMap<usize, Vec<u64>>,
    /// Per-channel absolute maxima of the input at every GEMM site.
    pub site_max: BTreeMap<Site, Vec<f32>>,
    /// Per MoE layer: per-input-channel absolute maxima taken jointly over
    /// the router and every expert's gate and up matrices.
    pub w_max: BTreeMap<usize, Vec<f32>>,
}

impl CalibrationStats {
    /// Commutative merge of two partial folds over disjoint token chunks.
    pub fn merge(mut self, other: Self) -> Self {
        self.tokens += other.tokens;
        for (l, c) in other.counts {
            let acc = self.counts.entry(l).or_insert_with(|| vec![0; c.len()]);
            for (a, b) in acc.iter_mut().zip(c) {
                *a += b;
            }
        }
        for (s, m) in other.site_max {
            let acc = self.site_max.entry(s).or_insert_with(|| vec![0.0; m.len()]);
            for (a, b) in acc.iter_mut().zip(m) {
                *a = a.max(b);
            }
        }
        for (l, m) in other.w_max {
            self.w_max.entry(l).or_insert(m);
        }
        self
    }

    /// Per-channel maxima of the MoE input of layer `l` (all routed tokens).
    pub fn x_max(&self, l: usize, d: usize) -> Vec<f32> {
        self.site_max
            .get(&Site::Router(l))
            .cloned()
            .unwrap_or_else(|| vec![0.0; d])
    }

    /// Per-channel maxima of the tokens that reached expert `e` of layer `l`.
    pub fn expert_x_max(&self, l: usize, e: usize, d: usize) -> Vec<f32> {
        self.site_max
            .get(&Site::ExpertIn(l, e))
            .cloned()
            .unwrap_or_else(|| vec![0.0; d])
    }

    /// Per-tensor absolute maximum at `site`, if the site was ever reached.
    pub fn tensor_max(&self, site: Site) -> Option<f32> {
        self.site_max
            .get(&site)
            .map(|m| m.iter().fold(0.0f32, |a, &b| a.max(b)))
    }

    /// Smallest expert count over all MoE layers, with its location.
    pub fn min_count(&self) -> Option<(usize, usize, u64)> {
        self.counts
            .iter()
            .flat_map(|(&l, c)| c.iter().enumerate().map(move |(e, &n)| (l, e, n)))
            .min_by_key(|&(l, e, n)| (n, l, e))
    }
}

/// Hook that records routing and per-channel input maxima, substituting nothing.
#[derive(Debug, Default)]
struct Recorder {
    stats: CalibrationStats,
}

impl ForwardHook for Recorder {
    fn gemm_input(&mut self, site: Site, x: &[f32], cols: usize) -> Option<Vec<f32>> {
        let acc = self
            .stats
            .site_max
            .entry(site)
            .or_insert_with(|| vec![0.0; cols]);
        for row in x.chunks(cols) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = a.max(v.abs());
            }
        }
        None
    }

    fn routed(&mut self, layer: usize, d: &RouterDecision) {
        let acc = self
            .stats
            .counts
            .entry(layer)
            .or_insert_with(|| vec![0; d.n]);
        for (a, &c) in acc.iter_mut().zip(&d.counts) {
            *a += c as u64;
        }
    }
}

/// Joint per-input-channel maxima of the router and expert input matrices.
pub fn weight_maxima(model: &MoeModel) -> BTreeMap<usize, Vec<f32>> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let mut out = BTreeMap::new();
    for l in (0..cfg.n_layers).filter(|&l| cfg.is_moe_layer(l)) {
        let (router, experts) = model.expert_weights(l);
        let mut m = vec![0.0f32; d];
        let mut absorb = |w: &[f32]| {
            let cols = w.len() / d;
            for (j, row) in w.chunks(cols).enumerate() {
                m[j] = row.iter().fold(m[j], |a, &v| a.max(v.abs()));
            }
        };
        absorb(router);
        for (g, u, _) in experts {
            absorb(g);
            absorb(u);
        }
        out.insert(l, m);
    }
    out
}

fn run_chunk(model: &MoeModel, seqs: &[Vec<u32>]) -> Result<CalibrationStats> {
    let batch = TokenBatch::from_sequences(seqs)?;
    let mut rec = Recorder::default();
    let mut sess = Session::inference(&model.params);
    model.forward_backbone(&mut sess, &batch, &mut rec)?;
    rec.stats.tokens = batch.len() as u64;
    Ok(rec.stats)
}

/// Run `model` over `seqs` and fold the routing counts and channel maxima.
///
/// Each sequence is its own attention segment, so the result does not
/// depend on how sequences are chunked.
pub fn collect_calibration(model: &MoeModel, seqs: &[Vec<u32>]) -> Result<CalibrationStats> {
    let cfg = &model.cfg;
    let mut base = CalibrationStats {
        w_max: weight_maxima(model),
        ..Default::default()
    };
    for l in (0..cfg.n_layers).filter(|&l| cfg.is_moe_layer(l)) {
        base.counts.insert(l, vec![0; cfg.n_experts]);
    }
    let parts = seqs
        .par_chunks(CHUNK)
        .map(|c| run_chunk(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(base, CalibrationStats::merge))
}

/// Per-sequence routing counts, `[seq][MoE layer] → counts[N]`.
pub fn route_counts(model: &MoeModel, seqs: &[Vec<u32>]) -> Result<Vec<BTreeMap<usize, Vec<u64>>>> {
    seqs.par_iter()
        .map(|s| {
            let batch = TokenBatch::from_sequences(std::slice::from_ref(s))?;
            let mut rec = Recorder::default();
            let mut sess = Session::inference(&model.params);
            model.forward_backbone(&mut sess, &batch, &mut rec)?;
            Ok(rec.stats.counts)
        })
        .collect()
}
