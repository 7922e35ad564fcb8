//! Finite-difference gradient checks for every differentiable tape op.
//!
//! Each case builds a random op instance, contracts its output with random
//! weights and compares the tape gradient against central differences of an
//! independent f64 forward pass.

use std::sync::Arc;

use crate::{Prng, Result, Tape, Tensor, Var};

/// Central-difference step.
pub const H: f64 = 1e-3;
/// Accepted relative gradient error.
pub const TOL: f64 = 1e-4;

/// Ops covered by [`check_op`]. `attention` chains several of them.
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_col",
    "div_col",
    "scale",
    "silu",
    "log_sigmoid",
    "softmax_rows",
    "log_softmax_rows",
    "logsumexp_rows",
    "masked_softmax_rows",
    "rms_norm",
    "embedding",
    "gather_rows",
    "scatter_rows",
    "gather_cols",
    "slice_cols",
    "concat_cols",
    "sum_all",
    "mean_all",
    "sum_rows",
    "weighted_sum",
    "attention",
];

/// Worst-case errors for one op over all its random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub cases: u64,
    /// max over cases of `max |analytic − numeric| / max |numeric|`.
    pub max_rel_err: f64,
    /// max over cases of `|tape − reference| / (1 + |reference|)` on the forward value.
    pub max_fwd_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOL && self.max_fwd_err <= 1e-4
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

fn randn(shape: &[usize], rng: &mut Prng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

fn dim(rng: &mut Prng, max: u64) -> usize {
    1 + rng.below(max) as usize
}

/// Returns `(relative gradient error, forward error)` for one case.
fn check(case: Case, rng: &mut Prng) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let w: Vec<f32> = (0..tape.value(out).numel())
        .map(|_| rng.normal() as f32)
        .collect();
    let loss = tape.weighted_sum(out, &w)?;
    tape.backward(loss)?;

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&w)
            .map(|(o, &wi)| o * wi as f64)
            .sum()
    };

    let ref_out = (case.reference)(&base);
    let fwd = tape
        .data(out)
        .iter()
        .zip(&ref_out)
        .map(|(&a, b)| (a as f64 - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max);

    let (mut max_err, mut max_num) = (0.0f64, 0.0f64);
    for (i, v) in vars.iter().enumerate() {
        if !case.inputs[i].requires_grad {
            continue;
        }
        let Some(analytic) = tape.grad(*v) else {
            continue;
        };
        let analytic = analytic.to_vec();
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += H;
            let mut minus = base.clone();
            minus[i][j] -= H;
            let num = (objective(&plus) - objective(&minus)) / (2.0 * H);
            max_err = max_err.max((analytic[j] as f64 - num).abs());
            max_num = max_num.max(num.abs());
        }
    }
    Ok((max_err / max_num.max(1e-3), fwd))
}

/// Run `cases` random instances of `op`. Unknown ops yield `None`.
pub fn check_op(op: &str, cases: u64) -> Result<Option<OpReport>> {
    let mut report = OpReport {
        op: op.to_string(),
        cases,
        max_rel_err: 0.0,
        max_fwd_err: 0.0,
    };
    for seed in 0..cases {
        let mut rng = Prng::new(seed).split(op.len() as u64);
        let Some(case) = make(op, &mut rng) else {
            return Ok(None);
        };
        let (rel, fwd) = check(case, &mut rng)?;
        report.max_rel_err = report.max_rel_err.max(rel);
        report.max_fwd_err = report.max_fwd_err.max(fwd);
    }
    Ok(Some(report))
}

/// [`check_op`] over every entry of [`OPS`].
pub fn check_all(cases: u64) -> Result<Vec<OpReport>> {
    OPS.iter()
        .map(|op| check_op(op, cases).map(|r| r.expect("listed op")))
        .collect()
}

fn mat(x: &[f64], c: usize) -> Vec<&[f64]> {
    x.chunks(c).collect()
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn lse64(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn elementwise(
    rng: &mut Prng,
    f: fn(f64, f64) -> f64,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Case {
    let shape = [dim(rng, 4), dim(rng, 5)];
    Case {
        inputs: vec![randn(&shape, rng), randn(&shape, rng)],
        build: Box::new(move |t, v| op(t, v[0], v[1])),
        reference: Box::new(move |x| x[0].iter().zip(&x[1]).map(|(&a, &b)| f(a, b)).collect()),
    }
}

fn make(op: &str, rng: &mut Prng) -> Option<Case> {
    let case = match op {
        "add" => elementwise(rng, |a, b| a + b, Tape::add),
        "sub" => elementwise(rng, |a, b| a - b, Tape::sub),
        "mul" => elementwise(rng, |a, b| a * b, Tape::mul),
        "matmul" => {
            let (m, k, n) = (dim(rng, 4), dim(rng, 4), dim(rng, 4));
            Case {
                inputs: vec![randn(&[m, k], rng), randn(&[k, n], rng)],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
                reference: Box::new(move |x| {
                    let mut o = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            for p in 0..k {
                                o[i * n + j] += x[0][i * k + p] * x[1][p * n + j];
                            }
                        }
                    }
                    o
                }),
            }
        }
        "matmul_nt" => {
            let (m, k, n) = (dim(rng, 4), dim(rng, 4), dim(rng, 4));
            Case {
                inputs: vec![randn(&[m, k], rng), randn(&[n, k], rng)],
                build: Box::new(|t, v| t.matmul_nt(v[0], v[1])),
                reference: Box::new(move |x| {
                    let mut o = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            for p in 0..k {
                                o[i * n + j] += x[0][i * k + p] * x[1][j * k + p];
                            }
                        }
                    }
                    o
                }),
            }
        }
        "transpose" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(|t, v| t.transpose(v[0])),
                reference: Box::new(move |x| {
                    let mut o = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            o[j * r + i] = x[0][i * c + j];
                        }
                    }
                    o
                }),
            }
        }
        "reshape" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.reshape(v[0], &[r * c, 1])),
                reference: Box::new(|x| x[0].clone()),
            }
        }
        "add_row" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng), randn(&[c], rng)],
                build: Box::new(|t, v| t.add_row(v[0], v[1])),
                reference: Box::new(move |x| (0..r * c).map(|i| x[0][i] + x[1][i % c]).collect()),
            }
        }
        "mul_col" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng), randn(&[r, 1], rng)],
                build: Box::new(|t, v| t.mul_col(v[0], v[1])),
                reference: Box::new(move |x| (0..r * c).map(|i| x[0][i] * x[1][i / c]).collect()),
            }
        }
        "div_col" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            // keep divisors away from zero
            let s = Tensor::uniform(&[r, 1], 0.5, 2.0, rng).with_grad();
            Case {
                inputs: vec![randn(&[r, c], rng), s],
                build: Box::new(|t, v| t.div_col(v[0], v[1])),
                reference: Box::new(move |x| (0..r * c).map(|i| x[0][i] / x[1][i / c]).collect()),
            }
        }
        "scale" => {
            let shape = [dim(rng, 4), dim(rng, 5)];
            let c = rng.normal() as f32;
            Case {
                inputs: vec![randn(&shape, rng)],
                build: Box::new(move |t, v| t.scale(v[0], c)),
                reference: Box::new(move |x| x[0].iter().map(|v| v * c as f64).collect()),
            }
        }
        "silu" => {
            let shape = [dim(rng, 4), dim(rng, 5)];
            Case {
                inputs: vec![randn(&shape, rng)],
                build: Box::new(|t, v| t.silu(v[0])),
                reference: Box::new(|x| x[0].iter().map(|&v| v / (1.0 + (-v).exp())).collect()),
            }
        }
        "log_sigmoid" => {
            let shape = [dim(rng, 4), dim(rng, 5)];
            Case {
                inputs: vec![Tensor::randn(&shape, 3.0, rng).with_grad()],
                build: Box::new(|t, v| t.log_sigmoid(v[0])),
                reference: Box::new(|x| x[0].iter().map(|&v| -(1.0 + (-v).exp()).ln()).collect()),
            }
        }
        "softmax_rows" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(|t, v| t.softmax_rows(v[0])),
                reference: Box::new(move |x| {
                    mat(&x[0], c)
                        .iter()
                        .flat_map(|row| softmax64(row))
                        .collect()
                }),
            }
        }
        "log_softmax_rows" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(|t, v| t.log_softmax_rows(v[0])),
                reference: Box::new(move |x| {
                    mat(&x[0], c)
                        .iter()
                        .flat_map(|row| {
                            let l = lse64(row);
                            row.iter().map(move |v| v - l)
                        })
                        .collect()
                }),
            }
        }
        "logsumexp_rows" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(|t, v| t.logsumexp_rows(v[0])),
                reference: Box::new(move |x| mat(&x[0], c).iter().map(|row| lse64(row)).collect()),
            }
        }
        "masked_softmax_rows" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            let mask: Vec<bool> = (0..r * c).map(|_| rng.below(3) != 0).collect();
            let mask = Arc::new(mask);
            let m2 = mask.clone();
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.masked_softmax_rows(v[0], &mask)),
                reference: Box::new(move |x| {
                    let mut o = vec![0.0; r * c];
                    for i in 0..r {
                        let keep: Vec<usize> = (0..c).filter(|&j| m2[i * c + j]).collect();
                        if keep.is_empty() {
                            continue;
                        }
                        let vals: Vec<f64> = keep.iter().map(|&j| x[0][i * c + j]).collect();
                        for (p, &j) in softmax64(&vals).iter().zip(&keep) {
                            o[i * c + j] = *p;
                        }
                    }
                    o
                }),
            }
        }
        "rms_norm" => {
            let (r, c) = (dim(rng, 4), 1 + dim(rng, 5));
            // rows near the origin make the h=1e-3 stencil itself inaccurate
            Case {
                inputs: vec![
                    Tensor::randn(&[r, c], 2.0, rng).with_grad(),
                    randn(&[c], rng),
                ],
                build: Box::new(|t, v| t.rms_norm(v[0], v[1], 1e-5)),
                reference: Box::new(move |x| {
                    let mut o = Vec::with_capacity(r * c);
                    for row in mat(&x[0], c) {
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let inv = 1.0 / (ms + 1e-5).sqrt();
                        o.extend(row.iter().zip(&x[1]).map(|(v, g)| v * inv * g));
                    }
                    o
                }),
            }
        }
        "embedding" => {
            let (v, d, n) = (dim(rng, 6), dim(rng, 4), dim(rng, 6));
            let ids: Vec<u32> = (0..n).map(|_| rng.below(v as u64) as u32).collect();
            let ids2 = ids.clone();
            Case {
                inputs: vec![randn(&[v, d], rng)],
                build: Box::new(move |t, vs| t.embedding(vs[0], &ids)),
                reference: Box::new(move |x| {
                    ids2.iter()
                        .flat_map(|&i| x[0][i as usize * d..(i as usize + 1) * d].to_vec())
                        .collect()
                }),
            }
        }
        "gather_rows" => {
            let (r, c, n) = (dim(rng, 5), dim(rng, 4), dim(rng, 6));
            let idx: Vec<usize> = (0..n).map(|_| rng.below(r as u64) as usize).collect();
            let idx2 = idx.clone();
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.gather_rows(v[0], &idx)),
                reference: Box::new(move |x| {
                    idx2.iter()
                        .flat_map(|&i| x[0][i * c..(i + 1) * c].to_vec())
                        .collect()
                }),
            }
        }
        "scatter_rows" => {
            let (r, c, n) = (dim(rng, 5), dim(rng, 4), dim(rng, 4));
            let idx: Vec<usize> = (0..r).map(|_| rng.below(n as u64) as usize).collect();
            let idx2 = idx.clone();
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.scatter_rows(v[0], &idx, n)),
                reference: Box::new(move |x| {
                    let mut o = vec![0.0; n * c];
                    for (k, &i) in idx2.iter().enumerate() {
                        for j in 0..c {
                            o[i * c + j] += x[0][k * c + j];
                        }
                    }
                    o
                }),
            }
        }
        "gather_cols" => {
            let (r, c, k) = (dim(rng, 4), dim(rng, 5), dim(rng, 3));
            let idx: Vec<usize> = (0..r * k).map(|_| rng.below(c as u64) as usize).collect();
            let idx2 = idx.clone();
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.gather_cols(v[0], &idx)),
                reference: Box::new(move |x| {
                    idx2.iter()
                        .enumerate()
                        .map(|(p, &j)| x[0][(p / k) * c + j])
                        .collect()
                }),
            }
        }
        "slice_cols" => {
            let (r, c) = (dim(rng, 4), dim(rng, 6));
            let start = rng.below(c as u64) as usize;
            let len = 1 + rng.below((c - start) as u64) as usize;
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.slice_cols(v[0], start, len)),
                reference: Box::new(move |x| {
                    mat(&x[0], c)
                        .iter()
                        .flat_map(|row| row[start..start + len].to_vec())
                        .collect()
                }),
            }
        }
        "concat_cols" => {
            let (r, a, b) = (dim(rng, 4), dim(rng, 3), dim(rng, 3));
            Case {
                inputs: vec![
                    randn(&[r, a], rng),
                    randn(&[r, b], rng),
                    randn(&[r, a], rng),
                ],
                build: Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[2]])),
                reference: Box::new(move |x| {
                    (0..r)
                        .flat_map(|i| {
                            let mut row = x[0][i * a..(i + 1) * a].to_vec();
                            row.extend_from_slice(&x[1][i * b..(i + 1) * b]);
                            row.extend_from_slice(&x[2][i * a..(i + 1) * a]);
                            row
                        })
                        .collect()
                }),
            }
        }
        "sum_all" => {
            let shape = [dim(rng, 4), dim(rng, 5)];
            Case {
                inputs: vec![randn(&shape, rng)],
                build: Box::new(|t, v| t.sum_all(v[0])),
                reference: Box::new(|x| vec![x[0].iter().sum()]),
            }
        }
        "mean_all" => {
            let shape = [dim(rng, 4), dim(rng, 5)];
            Case {
                inputs: vec![randn(&shape, rng)],
                build: Box::new(|t, v| t.mean_all(v[0])),
                reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
            }
        }
        "sum_rows" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(|t, v| t.sum_rows(v[0])),
                reference: Box::new(move |x| {
                    (0..c)
                        .map(|j| (0..r).map(|i| x[0][i * c + j]).sum())
                        .collect()
                }),
            }
        }
        "weighted_sum" => {
            let (r, c) = (dim(rng, 4), dim(rng, 5));
            let w: Vec<f32> = (0..r * c).map(|_| rng.normal() as f32).collect();
            let w2 = w.clone();
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: Box::new(move |t, v| t.weighted_sum(v[0], &w)),
                reference: Box::new(move |x| {
                    vec![x[0].iter().zip(&w2).map(|(a, &b)| a * b as f64).sum()]
                }),
            }
        }
        "attention" => {
            let (n, d) = (dim(rng, 4), 1 + dim(rng, 3));
            Case {
                inputs: vec![
                    Tensor::randn(&[n, d], 2.0, rng).with_grad(),
                    randn(&[d], rng),
                    randn(&[n, d], rng),
                    randn(&[n, d], rng),
                ],
                build: Box::new(|t, v| {
                    let q = t.rms_norm(v[0], v[1], 1e-5)?;
                    let s = t.matmul_nt(q, v[2])?;
                    let p = t.softmax_rows(s)?;
                    t.matmul(p, v[3])
                }),
                reference: Box::new(move |x| {
                    let mut out = Vec::new();
                    for i in 0..n {
                        let row = &x[0][i * d..(i + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (ms + 1e-5).sqrt();
                        let q: Vec<f64> = row.iter().zip(&x[1]).map(|(v, g)| v * inv * g).collect();
                        let scores: Vec<f64> = (0..n)
                            .map(|j| (0..d).map(|p| q[p] * x[2][j * d + p]).sum())
                            .collect();
                        let p = softmax64(&scores);
                        out.extend(
                            (0..d).map(|c| (0..n).map(|j| p[j] * x[3][j * d + c]).sum::<f64>()),
                        );
                    }
                    out
                }),
            }
        }
        _ => return None,
    };
    Some(case)
}
