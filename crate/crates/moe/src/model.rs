use std::sync::Arc;

use compass_core::stats::entropy;
use compass_core::{ParamId, ParamStore, Prng, Session, Tensor, Var};

use crate::batch::TokenBatch;
use crate::config::{Coefficients, MoEConfig};
use crate::error::{MoeError, Result};
use crate::hook::{ForwardHook, Site};
use crate::router::{self, RouterDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    /// `None` on dense layers.
    pub router: Option<ParamId>,
    /// One entry on dense layers.
    pub experts: Vec<FfnIds>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MtpIds {
    pub norm_h: ParamId,
    pub norm_e: ParamId,
    pub proj: ParamId,
    pub ffn_norm: ParamId,
    pub ffn: FfnIds,
    pub out_norm: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
    pub mtp: Vec<MtpIds>,
}

impl ModelIds {
    /// Parameters that belong to the MTP blocks.
    pub fn mtp_params(&self) -> Vec<ParamId> {
        self.mtp
            .iter()
            .flat_map(|m| {
                [
                    m.norm_h,
                    m.norm_e,
                    m.proj,
                    m.ffn_norm,
                    m.ffn.w_gate,
                    m.ffn.w_up,
                    m.ffn.w_down,
                    m.out_norm,
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MoeModel {
    pub cfg: MoEConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

/// Graph handles from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Final hidden states before the output norm, `[T × d]`.
    pub hidden: Var,
    /// `hidden` after the final norm, `[T × d]`.
    pub normed: Var,
    /// `[T × V]`.
    pub logits: Var,
    pub lm_loss: Var,
    /// Mean over MoE layers; `None` without MoE layers.
    pub aux_loss: Option<Var>,
    pub z_loss: Option<Var>,
    /// One per MTP depth.
    pub mtp_losses: Vec<Var>,
    pub decisions: Vec<RouterDecision>,
    /// Expert FFN evaluations per token, summed over MoE layers.
    pub expert_evals: Vec<usize>,
}

/// Scalar summary of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutput {
    pub logits: Tensor,
    pub l_lm: f64,
    pub l_aux: f64,
    pub l_z: f64,
    pub l_mtp: Vec<f64>,
    /// `L_LM + α·L_aux + β·L_Z`.
    pub l_total: f64,
    pub coefficients: Coefficients,
    pub usage_entropy: f64,
    pub decisions: Vec<RouterDecision>,
}

fn names(cfg: &MoEConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, n) = (cfg.d_model, cfg.d_ff, cfg.n_experts);
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    let ffn = |p: &str| {
        vec![
            (format!("{p}.w_gate"), vec![d, f]),
            (format!("{p}.w_up"), vec![d, f]),
            (format!("{p}.w_down"), vec![f, d]),
        ]
    };
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d]));
        }
        out.push((format!("{p}.ffn_norm"), vec![d]));
        if cfg.is_moe_layer(l) {
            out.push((format!("{p}.router"), vec![d, n]));
            for e in 0..n {
                out.extend(ffn(&format!("{p}.experts.{e}")));
            }
        } else {
            out.extend(ffn(&format!("{p}.dense")));
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("lm_head".into(), vec![d, cfg.vocab_size]));
    for k in 0..cfg.mtp_depth {
        let p = format!("mtp.{k}");
        out.push((format!("{p}.norm_h"), vec![d]));
        out.push((format!("{p}.norm_e"), vec![d]));
        out.push((format!("{p}.proj"), vec![2 * d, d]));
        out.push((format!("{p}.ffn_norm"), vec![d]));
        out.extend(ffn(&format!("{p}.ffn")));
        out.push((format!("{p}.out_norm"), vec![d]));
    }
    out
}

fn lookup(params: &ParamStore, cfg: &MoEConfig) -> Result<ModelIds> {
    let id = |name: String| params.id(&name).ok_or(MoeError::MissingParam(name));
    let ffn = |p: String| -> Result<FfnIds> {
        Ok(FfnIds {
            w_gate: id(format!("{p}.w_gate"))?,
            w_up: id(format!("{p}.w_up"))?,
            w_down: id(format!("{p}.w_down"))?,
        })
    };
    let mut layers = Vec::new();
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        let moe = cfg.is_moe_layer(l);
        layers.push(LayerIds {
            attn_norm: id(format!("{p}.attn_norm"))?,
            wq: id(format!("{p}.wq"))?,
            wk: id(format!("{p}.wk"))?,
            wv: id(format!("{p}.wv"))?,
            wo: id(format!("{p}.wo"))?,
            ffn_norm: id(format!("{p}.ffn_norm"))?,
            router: if moe {
                Some(id(format!("{p}.router"))?)
            } else {
                None
            },
            experts: if moe {
                (0..cfg.n_experts)
                    .map(|e| ffn(format!("{p}.experts.{e}")))
                    .collect::<Result<_>>()?
            } else {
                vec![ffn(format!("{p}.dense"))?]
            },
        });
    }
    let mut mtp = Vec::new();
    for k in 0..cfg.mtp_depth {
        let p = format!("mtp.{k}");
        mtp.push(MtpIds {
            norm_h: id(format!("{p}.norm_h"))?,
            norm_e: id(format!("{p}.norm_e"))?,
            proj: id(format!("{p}.proj"))?,
            ffn_norm: id(format!("{p}.ffn_norm"))?,
            ffn: ffn(format!("{p}.ffn"))?,
            out_norm: id(format!("{p}.out_norm"))?,
        });
    }
    Ok(ModelIds {
        tok_emb: id("tok_emb".into())?,
        pos_emb: id("pos_emb".into())?,
        layers,
        final_norm: id("final_norm".into())?,
        lm_head: id("lm_head".into())?,
        mtp,
    })
}

/// Replace `x` by whatever the hook substitutes at `site`.
fn hooked(sess: &mut Session, hook: &mut dyn ForwardHook, site: Site, x: Var) -> Result<Var> {
    let cols = sess.tape.value(x).cols();
    match hook.gemm_input(site, sess.tape.data(x), cols) {
        Some(v) => {
            let t = Tensor::new(sess.tape.shape(x).to_vec(), v)?;
            Ok(sess.tape.constant(t))
        }
        None => Ok(x),
    }
}

/// `silu(x·W_gate) ⊙ (x·W_up) · W_down`.
fn gated_ffn(
    sess: &mut Session,
    hook: &mut dyn ForwardHook,
    x: Var,
    ids: FfnIds,
    sites: Option<(Site, Site)>,
) -> Result<Var> {
    let x = match sites {
        Some((s, _)) => hooked(sess, hook, s, x)?,
        None => x,
    };
    let (wg, wu, wd) = (
        sess.param(ids.w_gate),
        sess.param(ids.w_up),
        sess.param(ids.w_down),
    );
    let t = &mut sess.tape;
    let g = t.matmul(x, wg)?;
    let g = t.silu(g)?;
    let u = t.matmul(x, wu)?;
    let h = t.mul(g, u)?;
    let h = match sites {
        Some((_, s)) => hooked(sess, hook, s, h)?,
        None => h,
    };
    Ok(sess.tape.matmul(h, wd)?)
}

/// Cross-entropy of `logits[T×V]` against `targets`, averaged over the
/// positions where `mask` is set.
pub fn masked_cross_entropy(
    sess: &mut Session,
    logits: Var,
    targets: &[u32],
    mask: &[bool],
) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(MoeError::EmptyLossMask);
    }
    let t = &mut sess.tape;
    let logp = t.log_softmax_rows(logits)?;
    let idx: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
    let picked = t.gather_cols(logp, &idx)?;
    let w: Vec<f32> = mask
        .iter()
        .map(|&m| if m { -1.0 / count as f32 } else { 0.0 })
        .collect();
    Ok(t.weighted_sum(picked, &w)?)
}

impl MoeModel {
    pub fn init(cfg: MoEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Prng::new(seed).split(0x30E);
        let mut params = ParamStore::new();
        for (name, shape) in names(&cfg) {
            let t = if shape.len() == 1 {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("emb") || name == "lm_head" {
                Tensor::randn(&shape, cfg.init_std, &mut rng)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f32).sqrt(), &mut rng)
            };
            params.add(name, t);
        }
        let ids = lookup(&params, &cfg)?;
        Ok(Self { cfg, params, ids })
    }

    /// Wrap existing parameters (e.g. from a checkpoint).
    pub fn from_params(cfg: MoEConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in names(&cfg) {
            let id = params
                .id(&name)
                .ok_or_else(|| MoeError::MissingParam(name.clone()))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(MoeError::Config(format!(
                    "{name} has shape {:?}",
                    params.get(id).shape()
                )));
            }
        }
        let ids = lookup(&params, &cfg)?;
        Ok(Self { cfg, params, ids })
    }

    /// Parameters that the LM loss trains (everything except MTP blocks).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mtp = self.ids.mtp_params();
        self.params
            .iter()
            .map(|(id, _, _)| id)
            .filter(|id| !mtp.contains(id))
            .collect()
    }

    fn attention(
        &self,
        sess: &mut Session,
        hook: &mut dyn ForwardHook,
        l: usize,
        x: Var,
        mask: &Arc<Vec<bool>>,
    ) -> Result<Var> {
        let ids = &self.ids.layers[l];
        let x = hooked(sess, hook, Site::AttnQkv(l), x)?;
        let (wq, wk, wv, wo) = (
            sess.param(ids.wq),
            sess.param(ids.wk),
            sess.param(ids.wv),
            sess.param(ids.wo),
        );
        let t = &mut sess.tape;
        let q = t.matmul(x, wq)?;
        let k = t.matmul(x, wk)?;
        let v = t.matmul(x, wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = t.slice_cols(q, h * dh, dh)?;
            let kh = t.slice_cols(k, h * dh, dh)?;
            let vh = t.slice_cols(v, h * dh, dh)?;
            let s = t.matmul_nt(qh, kh)?;
            let s = t.scale(s, scale)?;
            let p = t.masked_softmax_rows(s, mask)?;
            heads.push(t.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)?
        };
        let o = hooked(sess, hook, Site::AttnOut(l), o)?;
        Ok(sess.tape.matmul(o, wo)?)
    }

    /// Sparse top-k dispatch: each expert only sees the tokens routed to it.
    fn moe_ffn(
        &self,
        sess: &mut Session,
        hook: &mut dyn ForwardHook,
        l: usize,
        x: Var,
    ) -> Result<(Var, RouterDecision, router::RouterVars, Vec<usize>)> {
        let ids = &self.ids.layers[l];
        let rx = hooked(sess, hook, Site::Router(l), x)?;
        let wr = sess.param(ids.router.expect("moe layer"));
        let (decision, rv) = router::route_tokens(&mut sess.tape, rx, wr, self.cfg.top_k)?;
        hook.routed(l, &decision);
        let (b, k) = (decision.b, decision.k);
        let flat = sess.tape.reshape(rv.combine, &[b * k, 1])?;
        let mut out: Option<Var> = None;
        let mut evals = vec![0usize; b];
        for (e, ffn) in ids.experts.iter().enumerate() {
            let assigned = decision.assignments(e);
            if assigned.is_empty() {
                continue;
            }
            let tok: Vec<usize> = assigned.iter().map(|&(j, _)| j).collect();
            let slot: Vec<usize> = assigned.iter().map(|&(j, s)| j * k + s).collect();
            let xe = sess.tape.gather_rows(x, &tok)?;
            let ye = gated_ffn(
                sess,
                hook,
                xe,
                *ffn,
                Some((Site::ExpertIn(l, e), Site::ExpertDown(l, e))),
            )?;
            for &j in &tok {
                evals[j] += 1;
            }
            let t = &mut sess.tape;
            let we = t.gather_rows(flat, &slot)?;
            let ye = t.mul_col(ye, we)?;
            let ye = t.scatter_rows(ye, &tok, b)?;
            out = Some(match out {
                Some(acc) => t.add(acc, ye)?,
                None => ye,
            });
        }
        Ok((out.expect("every token is routed"), decision, rv, evals))
    }

    /// The routed expert block of MoE layer `l` applied to `x[B × d]`.
    pub fn moe_forward(
        &self,
        sess: &mut Session,
        l: usize,
        x: Var,
    ) -> Result<(Var, RouterDecision, Vec<usize>)> {
        if !self.cfg.is_moe_layer(l) {
            return Err(MoeError::Config(format!("layer {l} is dense")));
        }
        let (y, d, _, evals) = self.moe_ffn(sess, &mut crate::hook::NoHook, l, x)?;
        Ok((y, d, evals))
    }

    /// Dense-reference weights of MoE layer `l`: router and expert matrices.
    pub fn expert_weights(&self, l: usize) -> (&[f32], Vec<(&[f32], &[f32], &[f32])>) {
        let ids = &self.ids.layers[l];
        let get = |id| self.params.get(id).data();
        let router = ids.router.map(get).unwrap_or(&[]);
        let experts = ids
            .experts
            .iter()
            .map(|e| (get(e.w_gate), get(e.w_up), get(e.w_down)))
            .collect();
        (router, experts)
    }

    pub fn forward(
        &self,
        sess: &mut Session,
        batch: &TokenBatch,
        hook: &mut dyn ForwardHook,
    ) -> Result<Forward> {
        self.forward_with(sess, batch, hook, true)
    }

    /// Forward without the MTP blocks; `mtp_losses` comes back empty.
    pub fn forward_backbone(
        &self,
        sess: &mut Session,
        batch: &TokenBatch,
        hook: &mut dyn ForwardHook,
    ) -> Result<Forward> {
        self.forward_with(sess, batch, hook, false)
    }

    fn forward_with(
        &self,
        sess: &mut Session,
        batch: &TokenBatch,
        hook: &mut dyn ForwardHook,
        with_mtp: bool,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        batch.validate(cfg.vocab_size, cfg.max_seq_len)?;
        let n = batch.len();
        let mask = Arc::new(batch.attention_mask());
        let tok = sess.param(self.ids.tok_emb);
        let pos = sess.param(self.ids.pos_emb);
        let pos_ids: Vec<u32> = batch.positions.iter().map(|&p| p as u32).collect();
        let te = sess.tape.embedding(tok, &batch.tokens)?;
        let pe = sess.tape.embedding(pos, &pos_ids)?;
        let mut h = sess.tape.add(te, pe)?;

        let mut decisions = Vec::new();
        let mut aux = Vec::new();
        let mut zl = Vec::new();
        let mut expert_evals = vec![0usize; n];
        for l in 0..cfg.n_layers {
            let ids = &self.ids.layers[l];
            let g = sess.param(ids.attn_norm);
            let x = sess.tape.rms_norm(h, g, cfg.rms_eps)?;
            let a = self.attention(sess, hook, l, x, &mask)?;
            h = sess.tape.add(h, a)?;
            let g = sess.param(ids.ffn_norm);
            let x = sess.tape.rms_norm(h, g, cfg.rms_eps)?;
            let f = if cfg.is_moe_layer(l) {
                let (f, d, rv, evals) = self.moe_ffn(sess, hook, l, x)?;
                aux.push(router::aux_loss(&mut sess.tape, &d, &rv)?);
                zl.push(router::z_loss(&mut sess.tape, rv.logits)?);
                for (acc, e) in expert_evals.iter_mut().zip(evals) {
                    *acc += e;
                }
                decisions.push(d);
                f
            } else {
                gated_ffn(sess, hook, x, ids.experts[0], None)?
            };
            h = sess.tape.add(h, f)?;
        }

        let g = sess.param(self.ids.final_norm);
        let hn = sess.tape.rms_norm(h, g, cfg.rms_eps)?;
        let head = sess.param(self.ids.lm_head);
        let logits = sess.tape.matmul(hn, head)?;
        let lm_loss = masked_cross_entropy(sess, logits, &batch.targets, &batch.loss_mask)?;
        let mean = |sess: &mut Session, xs: &[Var]| -> Result<Option<Var>> {
            let Some(&first) = xs.first() else {
                return Ok(None);
            };
            let mut s = first;
            for &x in &xs[1..] {
                s = sess.tape.add(s, x)?;
            }
            Ok(Some(sess.tape.scale(s, 1.0 / xs.len() as f32)?))
        };
        let aux_loss = mean(sess, &aux)?;
        let z_loss = mean(sess, &zl)?;
        let mtp_losses = if with_mtp {
            self.mtp(sess, batch, h)?
        } else {
            vec![]
        };
        Ok(Forward {
            hidden: h,
            normed: hn,
            logits,
            lm_loss,
            aux_loss,
            z_loss,
            mtp_losses,
            decisions,
            expert_evals,
        })
    }

    /// Multi-token prediction. Depth `d` (1-based) predicts the token `d + 1`
    /// steps ahead of each position from the previous depth's state and the
    /// embedding of the token `d` steps ahead. The backbone state, the token
    /// embedding table and the LM head enter as constants, so these losses
    /// train only the MTP blocks.
    fn mtp(&self, sess: &mut Session, batch: &TokenBatch, hidden: Var) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        if cfg.mtp_depth == 0 {
            return Ok(vec![]);
        }
        let n = batch.len();
        let tok = sess.param(self.ids.tok_emb);
        let head = sess.param(self.ids.lm_head);
        let tok_c = sess.tape.stop_gradient(tok);
        let head_c = sess.tape.stop_gradient(head);
        let mut prev = sess.tape.stop_gradient(hidden);
        let mut losses = Vec::with_capacity(cfg.mtp_depth);
        for (k, ids) in self.ids.mtp.iter().enumerate() {
            let d = k + 1;
            let valid: Vec<bool> = (0..n).map(|i| batch.same_segment(i, d + 1)).collect();
            if !valid.iter().any(|&v| v) {
                let longest = longest_segment(batch);
                return Err(MoeError::SequenceTooShort {
                    len: longest,
                    need: d + 2,
                });
            }
            // invalid rows carry their own token so shapes stay [n × ·]; the loss ignores them
            let ahead: Vec<u32> = (0..n)
                .map(|i| {
                    if batch.same_segment(i, d) {
                        batch.tokens[i + d]
                    } else {
                        batch.tokens[i]
                    }
                })
                .collect();
            let targets: Vec<u32> = (0..n)
                .map(|i| if valid[i] { batch.tokens[i + d + 1] } else { 0 })
                .collect();
            let (gh, ge, proj, gf, go) = (
                sess.param(ids.norm_h),
                sess.param(ids.norm_e),
                sess.param(ids.proj),
                sess.param(ids.ffn_norm),
                sess.param(ids.out_norm),
            );
            let t = &mut sess.tape;
            let e = t.embedding(tok_c, &ahead)?;
            let a = t.rms_norm(prev, gh, cfg.rms_eps)?;
            let b = t.rms_norm(e, ge, cfg.rms_eps)?;
            let cat = t.concat_cols(&[a, b])?;
            let h1 = t.matmul(cat, proj)?;
            let x = t.rms_norm(h1, gf, cfg.rms_eps)?;
            let f = gated_ffn(sess, &mut crate::hook::NoHook, x, ids.ffn, None)?;
            let h2 = sess.tape.add(h1, f)?;
            let o = sess.tape.rms_norm(h2, go, cfg.rms_eps)?;
            let logits = sess.tape.matmul(o, head_c)?;
            losses.push(masked_cross_entropy(sess, logits, &targets, &valid)?);
            prev = h2;
        }
        Ok(losses)
    }

    /// `L_LM + α·L_aux + β·L_Z + mtp_weight·Σ L_MTP`, the quantity training
    /// descends.
    pub fn objective(&self, sess: &mut Session, fwd: &Forward, step: u64) -> Result<Var> {
        let c = self.cfg.coefficients(step);
        let t = &mut sess.tape;
        let mut total = fwd.lm_loss;
        if let Some(a) = fwd.aux_loss {
            let a = t.scale(a, c.alpha as f32)?;
            total = t.add(total, a)?;
        }
        if let Some(z) = fwd.z_loss {
            let z = t.scale(z, c.beta as f32)?;
            total = t.add(total, z)?;
        }
        for &m in &fwd.mtp_losses {
            let m = t.scale(m, self.cfg.mtp_weight as f32)?;
            total = t.add(total, m)?;
        }
        Ok(total)
    }

    pub fn summarize(&self, sess: &Session, fwd: &Forward, step: u64) -> LmOutput {
        let val = |v: Var| sess.tape.value(v).item() as f64;
        let c = self.cfg.coefficients(step);
        let l_lm = val(fwd.lm_loss);
        let l_aux = fwd.aux_loss.map(val).unwrap_or(0.0);
        let l_z = fwd.z_loss.map(val).unwrap_or(0.0);
        LmOutput {
            logits: sess.tape.value(fwd.logits).clone(),
            l_lm,
            l_aux,
            l_z,
            l_mtp: fwd.mtp_losses.iter().map(|&v| val(v)).collect(),
            l_total: l_lm + c.alpha * l_aux + c.beta * l_z,
            coefficients: c,
            usage_entropy: usage_entropy(&fwd.decisions),
            decisions: fwd.decisions.clone(),
        }
    }

    /// Inference forward with a hook.
    pub fn run(
        &self,
        batch: &TokenBatch,
        step: u64,
        hook: &mut dyn ForwardHook,
    ) -> Result<LmOutput> {
        let mut sess = Session::inference(&self.params);
        let fwd = self.forward(&mut sess, batch, hook)?;
        Ok(self.summarize(&sess, &fwd, step))
    }

    pub fn lm_forward(&self, batch: &TokenBatch) -> Result<LmOutput> {
        self.run(batch, 0, &mut crate::hook::NoHook)
    }
}

fn longest_segment(batch: &TokenBatch) -> usize {
    batch.positions.iter().map(|&p| p + 1).max().unwrap_or(0)
}

/// Mean over MoE layers of the entropy (nats) of `c / (B·K)`.
pub fn usage_entropy(decisions: &[RouterDecision]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().map(|d| entropy(&d.usage())).sum::<f64>() / decisions.len() as f64
}
