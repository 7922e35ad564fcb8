use compass_core::Prng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{MixtureError, Result};

/// Sampling weights over shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if weights.is_empty()
            || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || (s - 1.0).abs() > 1e-9
        {
            return Err(MixtureError::NotSimplex(format!("{weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn corner(s: usize, k: usize) -> Self {
        let mut weights = vec![0.0; s];
        weights[k] = 1.0;
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// One Dirichlet(1, …, 1) draw.
pub fn dirichlet_ones(s: usize, rng: &mut Prng) -> MixtureSpec {
    let g: Vec<f64> = (0..s).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    MixtureSpec {
        weights: g.into_iter().map(|x| x / total).collect(),
    }
}

/// `n` Dirichlet(1) draws followed by the `s` one-hot corners.
pub fn sample_mixtures(s: usize, n: usize, rng: &mut Prng) -> Result<Vec<MixtureSpec>> {
    if s == 0 || n == 0 {
        return Err(MixtureError::InvalidArgument("need s ≥ 1 and n ≥ 1".into()));
    }
    let mut out: Vec<MixtureSpec> = (0..n).map(|_| dirichlet_ones(s, rng)).collect();
    out.extend((0..s).map(|k| MixtureSpec::corner(s, k)));
    Ok(out)
}

/// Integer counts summing to `total`: floors of `w·total`, then one extra
/// unit to each of the largest remainders (ties to the lower index).
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(&[0.5, 0.5], 10), vec![5, 5]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.0, 1.0, 0.0], 7), vec![0, 7, 0]);
    }

    #[test]
    fn single_shard_is_always_one() {
        let m = sample_mixtures(1, 5, &mut Prng::new(1)).unwrap();
        assert!(m.iter().all(|x| x.weights == vec![1.0]));
    }

    #[test]
    fn rejects_off_simplex() {
        assert!(MixtureSpec::new(vec![0.5, 0.6]).is_err());
        assert!(MixtureSpec::new(vec![-0.1, 1.1]).is_err());
    }
}
