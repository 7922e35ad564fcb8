//! Quantization schemes, their on-disk form, and simulated-W8A8 models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use compass_core::{Session, Tensor};
use compass_moe::{ForwardHook, MoeModel, NoHook, Site, TokenBatch};
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationStats;
use crate::error::{QuantError, Result};
use crate::fp8::{round_e4m3, scale_for};
use crate::smooth::Smoothing;

/// Number grid used by quantize–dequantize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    #[default]
    E4m3,
    /// Infinite precision: qdq is the identity.
    Identity,
}

impl Grid {
    pub fn qdq(self, x: f32, scale: f32) -> f32 {
        match self {
            // inputs are finite by construction, so rounding cannot fail
            Grid::E4m3 => round_e4m3(x / scale).map_or(x, |q| q * scale),
            Grid::Identity => x,
        }
    }
}

/// Every scale needed to run a model in simulated W8A8.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub grid: Grid,
    /// Smoothing already folded into the model the scales were taken from.
    pub smoothing: Option<Smoothing>,
    /// Calibration threshold used, if calibration was balanced.
    pub tau: Option<u64>,
    /// Per-output-channel scales keyed by parameter name.
    pub weight_scales: BTreeMap<String, Vec<f32>>,
    /// Per-tensor activation scales.
    pub act_scales: BTreeMap<Site, f32>,
}

/// GEMM input sites of `model`.
pub fn gemm_sites(model: &MoeModel) -> Vec<Site> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        out.push(Site::AttnQkv(l));
        out.push(Site::AttnOut(l));
        if cfg.is_moe_layer(l) {
            out.push(Site::Router(l));
            for e in 0..cfg.n_experts {
                out.push(Site::ExpertIn(l, e));
                out.push(Site::ExpertDown(l, e));
            }
        }
    }
    out
}

/// Names of the projection matrices that get quantized weights.
pub fn quantized_weights(model: &MoeModel) -> Vec<String> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    for (l, ids) in model.ids.layers.iter().enumerate() {
        let mut ids_l = vec![ids.wq, ids.wk, ids.wv, ids.wo];
        if cfg.is_moe_layer(l) {
            ids_l.extend(ids.router);
            for e in &ids.experts {
                ids_l.extend([e.w_gate, e.w_up, e.w_down]);
            }
        }
        out.extend(
            ids_l
                .into_iter()
                .map(|id| model.params.name(id).to_string()),
        );
    }
    out
}

/// Column absolute maxima of a `[rows × cols]` matrix.
fn column_absmax(t: &Tensor) -> Vec<f32> {
    let cols = t.cols();
    let mut m = vec![0.0f32; cols];
    for row in t.data().chunks(cols) {
        for (a, &v) in m.iter_mut().zip(row) {
            *a = a.max(v.abs());
        }
    }
    m
}

impl QuantScheme {
    /// Scales for `model` from statistics collected on that same model.
    /// Fails if any GEMM site, in particular any expert, was never reached.
    pub fn build(
        model: &MoeModel,
        stats: &CalibrationStats,
        grid: Grid,
        smoothing: Option<Smoothing>,
        tau: Option<u64>,
    ) -> Result<Self> {
        let mut act_scales = BTreeMap::new();
        for site in gemm_sites(model) {
            let m = stats
                .tensor_max(site)
                .ok_or_else(|| QuantError::MissingCalibration(format!("{site:?}")))?;
            act_scales.insert(site, scale_for(m));
        }
        let weight_scales = quantized_weights(model)
            .into_iter()
            .map(|name| {
                let id = model.params.id(&name).expect("listed from the model");
                let s = column_absmax(model.params.get(id))
                    .into_iter()
                    .map(scale_for)
                    .collect();
                (name, s)
            })
            .collect();
        Ok(Self {
            grid,
            smoothing,
            tau,
            weight_scales,
            act_scales,
        })
    }

    /// Write `scheme.json` and `scales.bin` (little-endian f32) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::new();
        let mut arrays = Vec::new();
        let mut push = |name: String, v: &[f32]| {
            arrays.push(ArrayEntry {
                name,
                offset: bin.len() as u64 / 4,
                len: v.len() as u64,
            });
            for x in v {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, v) in &self.weight_scales {
            push(format!("weight:{name}"), v);
        }
        let act: Vec<f32> = self.act_scales.values().copied().collect();
        push("activation".into(), &act);
        if let Some(s) = &self.smoothing {
            for (l, v) in &s.vectors {
                push(format!("smoothing:{l}"), v);
            }
        }
        let manifest = SchemeManifest {
            grid: self.grid,
            alpha: self.smoothing.as_ref().map(|s| s.alpha),
            tau: self.tau,
            activation_sites: self.act_scales.keys().copied().collect(),
            arrays,
        };
        fs::write(dir.join("scales.bin"), bin)?;
        fs::write(
            dir.join("scheme.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SchemeManifest = serde_json::from_slice(&fs::read(dir.join("scheme.json"))?)?;
        let bin = fs::read(dir.join("scales.bin"))?;
        let floats: Vec<f32> = bin
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut weight_scales = BTreeMap::new();
        let mut act_scales = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for a in &manifest.arrays {
            let (lo, hi) = (a.offset as usize, (a.offset + a.len) as usize);
            let v = floats
                .get(lo..hi)
                .ok_or_else(|| {
                    QuantError::InvalidArgument(format!("array {} overruns scales.bin", a.name))
                })?
                .to_vec();
            if let Some(name) = a.name.strip_prefix("weight:") {
                weight_scales.insert(name.to_string(), v);
            } else if let Some(l) = a.name.strip_prefix("smoothing:") {
                let l = l.parse().map_err(|_| {
                    QuantError::InvalidArgument(format!("bad array name {}", a.name))
                })?;
                vectors.insert(l, v);
            } else if a.name == "activation" {
                if v.len() != manifest.activation_sites.len() {
                    return Err(QuantError::InvalidArgument(
                        "activation scale count mismatch".into(),
                    ));
                }
                act_scales = manifest.activation_sites.iter().copied().zip(v).collect();
            }
        }
        let smoothing = manifest.alpha.map(|alpha| Smoothing { alpha, vectors });
        Ok(Self {
            grid: manifest.grid,
            smoothing,
            tau: manifest.tau,
            weight_scales,
            act_scales,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    /// In f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemeManifest {
    grid: Grid,
    alpha: Option<f64>,
    tau: Option<u64>,
    activation_sites: Vec<Site>,
    arrays: Vec<ArrayEntry>,
}

/// A model whose projection weights have been rounded to the grid and whose
/// GEMM inputs are rounded on the fly.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: MoeModel,
    pub grid: Grid,
    pub act_scales: BTreeMap<Site, f32>,
}

struct Qdq<'a> {
    grid: Grid,
    scales: &'a BTreeMap<Site, f32>,
}

impl ForwardHook for Qdq<'_> {
    fn gemm_input(&mut self, site: Site, x: &[f32], _cols: usize) -> Option<Vec<f32>> {
        let s = *self.scales.get(&site)?;
        Some(x.iter().map(|&v| self.grid.qdq(v, s)).collect())
    }
}

/// Round every projection weight per output channel and attach the
/// activation scales. `model` must be the (possibly smoothed) model the
/// scheme was built from.
pub fn quantize_model(model: &MoeModel, scheme: &QuantScheme) -> Result<QuantizedModel> {
    for site in gemm_sites(model) {
        if !scheme.act_scales.contains_key(&site) {
            return Err(QuantError::MissingCalibration(format!("{site:?}")));
        }
    }
    let mut out = model.clone();
    for name in quantized_weights(model) {
        let scales = scheme
            .weight_scales
            .get(&name)
            .ok_or_else(|| QuantError::MissingCalibration(name.clone()))?;
        let id = out.params.id(&name).expect("listed from the model");
        let t = out.params.get(id);
        if scales.len() != t.cols() {
            return Err(QuantError::InvalidArgument(format!(
                "{name}: {} scales for {} columns",
                scales.len(),
                t.cols()
            )));
        }
        let v: Vec<f32> = t
            .data()
            .chunks(t.cols())
            .flat_map(|row| row.iter().zip(scales).map(|(&w, &s)| scheme.grid.qdq(w, s)))
            .collect();
        out.params.assign(id, &v)?;
    }
    Ok(QuantizedModel {
        model: out,
        grid: scheme.grid,
        act_scales: scheme.act_scales.clone(),
    })
}

impl QuantizedModel {
    /// Logits `[T × V]` for `batch`.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut sess = Session::inference(&self.model.params);
        let mut hook = Qdq {
            grid: self.grid,
            scales: &self.act_scales,
        };
        let f = self.model.forward_backbone(&mut sess, batch, &mut hook)?;
        Ok(sess.tape.value(f.logits).clone())
    }
}

/// Full-precision logits `[T × V]`.
pub fn fp32_logits(model: &MoeModel, batch: &TokenBatch) -> Result<Tensor> {
    let mut sess = Session::inference(&model.params);
    let f = model.forward_backbone(&mut sess, batch, &mut NoHook)?;
    Ok(sess.tape.value(f.logits).clone())
}
