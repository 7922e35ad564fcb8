//! Regressors from mixture weights to proxy loss.

use serde::{Deserialize, Serialize};

use crate::error::{MixtureError, Result};

/// `x[feature] <= threshold ? left : right`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

impl Stump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub trees: usize,
    pub learning_rate: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            trees: 400,
            learning_rate: 0.1,
        }
    }
}

/// Least-squares gradient boosting over depth-1 trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub base: f64,
    pub learning_rate: f64,
    pub stumps: Vec<Stump>,
}

impl StumpEnsemble {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &BoostConfig) -> Result<Self> {
        let (x, y) = canonical(x, y)?;
        let n = y.len();
        let d = x[0].len();
        let base = y.iter().sum::<f64>() / n as f64;
        // per-feature sort order, fixed across rounds
        let orders: Vec<Vec<usize>> = (0..d)
            .map(|j| {
                let mut o: Vec<usize> = (0..n).collect();
                o.sort_by(|&a, &b| x[a][j].total_cmp(&x[b][j]).then(a.cmp(&b)));
                o
            })
            .collect();
        let mut pred = vec![base; n];
        let mut stumps = Vec::with_capacity(cfg.trees);
        for _ in 0..cfg.trees {
            let r: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let total: f64 = r.iter().sum();
            let mut best: Option<(f64, Stump)> = None;
            for (j, order) in orders.iter().enumerate() {
                let mut left_sum = 0.0;
                for k in 0..n - 1 {
                    left_sum += r[order[k]];
                    let (xa, xb) = (x[order[k]][j], x[order[k + 1]][j]);
                    if xa == xb {
                        continue;
                    }
                    let nl = (k + 1) as f64;
                    let nr = (n - k - 1) as f64;
                    let right_sum = total - left_sum;
                    // SSE reduction of the split, up to a constant
                    let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
                    if best.is_none_or(|(g, _)| gain > g) {
                        best = Some((
                            gain,
                            Stump {
                                feature: j,
                                threshold: 0.5 * (xa + xb),
                                left: left_sum / nl,
                                right: right_sum / nr,
                            },
                        ));
                    }
                }
            }
            let Some((_, s)) = best else { break };
            for (p, xi) in pred.iter_mut().zip(&x) {
                *p += cfg.learning_rate * s.eval(xi);
            }
            stumps.push(s);
        }
        Ok(Self {
            base,
            learning_rate: cfg.learning_rate,
            stumps,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.learning_rate * self.stumps.iter().map(|s| s.eval(x)).sum::<f64>()
    }
}

/// Ridge regression with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
}

impl Ridge {
    pub fn fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Self> {
        let (x, y) = canonical(x, y)?;
        let (n, d) = (y.len(), x[0].len());
        let xm: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for (r, &t) in x.iter().zip(&y) {
            for i in 0..d {
                let ci = r[i] - xm[i];
                b[i] += ci * (t - ym);
                for j in 0..d {
                    a[i * d + j] += ci * (r[j] - xm[j]);
                }
            }
        }
        for i in 0..d {
            a[i * d + i] += lambda;
        }
        let coef = solve(a, b, d)?;
        let intercept = ym - coef.iter().zip(&xm).map(|(c, m)| c * m).sum::<f64>();
        Ok(Self {
            intercept,
            coef,
            lambda,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, d: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
            .unwrap();
        if a[piv * d + col].abs() < 1e-300 {
            return Err(MixtureError::InvalidArgument(
                "singular system; raise lambda".into(),
            ));
        }
        if piv != col {
            for k in 0..d {
                a.swap(piv * d + k, col * d + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..d {
            let f = a[row * d + col] / a[col * d + col];
            for k in col..d {
                a[row * d + k] -= f * a[col * d + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for row in (0..d).rev() {
        let s: f64 = (row + 1..d).map(|k| a[row * d + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * d + row];
    }
    Ok(x)
}

/// Rows sorted by (features, target) so fits do not depend on run order.
fn canonical(x: &[Vec<f64>], y: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if x.len() != y.len() || x.is_empty() || x[0].is_empty() {
        return Err(MixtureError::InvalidArgument(
            "empty or mismatched training data".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].total_cmp(&y[b]))
    });
    Ok((
        idx.iter().map(|&i| x[i].clone()).collect(),
        idx.iter().map(|&i| y[i]).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorKind {
    Stumps(BoostConfig),
    Ridge { lambda: f64 },
}

impl Default for RegressorKind {
    fn default() -> Self {
        RegressorKind::Stumps(BoostConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regressor {
    Stumps(StumpEnsemble),
    Ridge(Ridge),
}

impl Regressor {
    pub fn fit(x: &[Vec<f64>], y: &[f64], kind: &RegressorKind) -> Result<Self> {
        Ok(match kind {
            RegressorKind::Stumps(c) => Regressor::Stumps(StumpEnsemble::fit(x, y, c)?),
            RegressorKind::Ridge { lambda } => Regressor::Ridge(Ridge::fit(x, y, *lambda)?),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::Stumps(s) => s.predict(x),
            Regressor::Ridge(r) => r.predict(x),
        }
    }

    pub fn mse(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| (self.predict(xi) - yi).powi(2))
            .sum::<f64>()
            / y.len().max(1) as f64
    }
}
