//! Monte Carlo estimators and goodness-of-fit statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};

/// Sum by a fixed binary tree over the slice order, so the result does not
/// depend on how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    /// Sample mean and its standard error `s/√n`.
    pub fn of(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let se = if n > 1 {
            let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, se, n }
    }

    /// Whether `|mean − target| ≤ k·se` (exact equality passes when se = 0).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }

    /// `z = (mean − target)/se`.
    pub fn z(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// Kish effective sample size `(Σw)²/Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s = pairwise_sum(weights);
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    s * s / pairwise_sum(&sq)
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²x²}`.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // Dual series converges faster for small x:
        // P(K ≤ x) = √(2π)/x Σ e^{−(2k−1)²π²/(8x²)}.
        let mut s = 0.0;
        for k in 1..50 {
            let m = (2 * k - 1) as f64;
            s += (-m * m * std::f64::consts::PI.powi(2) / (8.0 * x * x)).exp();
        }
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Smallest `x` with `Q(x) ≤ alpha`, by bisection.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size entering the asymptotic distribution.
    pub n_eff: f64,
}

/// Asymptotic p-value with the Stephens small-sample correction.
fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_survival((s + 0.12 + 0.11 / s) * d)
}

/// One-sample KS test of `samples` against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(invalid("KS test needs at least one sample"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        n_eff: n,
    })
}

/// Two-sample KS test where either side may carry importance weights.
///
/// Each side's empirical CDF is the weight-normalized step function; the
/// asymptotic p-value uses Kish effective sizes `n_a·n_b/(n_a+n_b)`.
pub fn ks_two_sample(
    a: &[f64],
    weights_a: Option<&[f64]>,
    b: &[f64],
    weights_b: Option<&[f64]>,
) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("KS test needs samples on both sides"));
    }
    let prepare = |xs: &[f64], ws: Option<&[f64]>| -> Result<(Vec<(f64, f64)>, f64)> {
        let ws: Vec<f64> = match ws {
            Some(w) if w.len() != xs.len() => return Err(invalid("weight length mismatch")),
            Some(w) if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) => {
                return Err(invalid("weights must be finite and non-negative"))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; xs.len()],
        };
        let total = pairwise_sum(&ws);
        if !(total > 0.0) {
            return Err(invalid("total weight must be positive"));
        }
        let n_eff = effective_sample_size(&ws);
        let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ws.iter().map(|w| w / total)).collect();
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        Ok((pts, n_eff))
    };
    let (pa, na) = prepare(a, weights_a)?;
    let (pb, nb) = prepare(b, weights_b)?;
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut d: f64 = 0.0;
    while i < pa.len() || j < pb.len() {
        let x = match (pa.get(i), pb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < pa.len() && pa[i].0 <= x {
            fa += pa[i].1;
            i += 1;
        }
        while j < pb.len() && pb[j].0 <= x {
            fb += pb[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    let n_eff = na * nb / (na + nb);
    let p_value = if weights_a.is_none() && weights_b.is_none() && a.len() * b.len() <= 10_000 {
        ks_two_sample_exact_p(a.len(), b.len(), d)
    } else {
        ks_p_value(d, n_eff)
    };
    Ok(KsResult {
        statistic: d,
        p_value,
        n_eff,
    })
}

/// Exact `P(D ≥ d)` for the unweighted two-sample statistic with sizes
/// `n`, `m` and no ties, by counting monotone lattice paths that stay inside
/// the band `|i/n − j/m| < d`.
pub fn ks_two_sample_exact_p(n: usize, m: usize, d: f64) -> f64 {
    // Attainable statistics are multiples of 1/(n·m); the tolerance only absorbs rounding.
    let tol = 1e-9;
    let inside = |i: usize, j: usize| ((i as f64 / n as f64) - (j as f64 / m as f64)).abs() < d - tol;
    // row[j] = (number of admissible paths to (i, j)) / C(i+j, i).
    let mut row = vec![0.0f64; m + 1];
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                row[0] = 1.0;
                continue;
            }
            if !inside(i, j) {
                row[j] = 0.0;
                continue;
            }
            // row[j] still holds (i−1, j); row[j−1] already holds (i, j−1).
            let from_up = if i > 0 { row[j] * i as f64 } else { 0.0 };
            let from_left = if j > 0 { row[j - 1] * j as f64 } else { 0.0 };
            row[j] = (from_up + from_left) / (i + j) as f64;
        }
    }
    (1.0 - row[m]).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit. Adjacent cells are merged from the right until
/// each expected count is at least 5.
pub fn chi_square_gof(observed: &[u64], probabilities: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != probabilities.len() || observed.is_empty() {
        return Err(invalid("observed and expected bins differ"));
    }
    let total: u64 = observed.iter().sum();
    let n = total as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(probabilities) {
        o_acc += *o as f64;
        e_acc += p * n;
        if e_acc >= 5.0 {
            cells.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => cells.push((o_acc, e_acc)),
        }
    }
    if cells.len() < 2 {
        return Err(invalid("too few populated bins for a chi-square test"));
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}
