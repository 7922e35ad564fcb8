//! Loop-level reference computations that avoid the tape entirely.

/// Dense MoE: every expert runs on every token, outputs are weighted by the
/// renormalized top-`k` router probabilities (zero for unselected experts).
/// Arithmetic is f64 throughout.
///
/// `router` is `[d × n]`; each expert is `(w_gate[d×f], w_up[d×f], w_down[f×d])`.
pub fn dense_moe(
    x: &[f32],
    d: usize,
    router: &[f32],
    experts: &[(&[f32], &[f32], &[f32])],
    f: usize,
    k: usize,
) -> Vec<f32> {
    let n = experts.len();
    let rows = x.len() / d;
    let mut out = vec![0.0f32; rows * d];
    for j in 0..rows {
        let xr: Vec<f64> = x[j * d..(j + 1) * d].iter().map(|&v| v as f64).collect();
        let logits: Vec<f64> = (0..n)
            .map(|e| (0..d).map(|i| xr[i] * router[i * n + e] as f64).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        let probs: Vec<f64> = ex.iter().map(|v| v / s).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let chosen = &order[..k];
        let norm: f64 = chosen.iter().map(|&e| probs[e]).sum();
        let mut acc = vec![0.0f64; d];
        for (e, &(wg, wu, wd)) in experts.iter().enumerate() {
            let w = if chosen.contains(&e) {
                probs[e] / norm
            } else {
                0.0
            };
            let mut h = vec![0.0f64; f];
            for (c, hc) in h.iter_mut().enumerate() {
                let g: f64 = (0..d).map(|i| xr[i] * wg[i * f + c] as f64).sum();
                let u: f64 = (0..d).map(|i| xr[i] * wu[i * f + c] as f64).sum();
                *hc = g / (1.0 + (-g).exp()) * u;
            }
            for (o, a) in acc.iter_mut().enumerate() {
                let y: f64 = (0..f).map(|c| h[c] * wd[c * d + o] as f64).sum();
                *a += w * y;
            }
        }
        for (o, a) in acc.into_iter().enumerate() {
            out[j * d + o] = a as f32;
        }
    }
    out
}
