//! Wilcoxon signed-rank test for paired scores.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of nonzero pairs handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 12;
/// Fewest nonzero pairs accepted.
pub const MIN_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wilcoxon {
    /// Nonzero pairs used.
    pub n: usize,
    /// Rank sums of positive and negative differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W⁺, W⁻)`.
    pub w: f64,
    pub p_two_sided: f64,
    /// Against the alternative that `a` tends to exceed `b`: `P(W⁺ ≥ observed)`.
    pub p_one_sided: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Nonzero differences and their absolute-value ranks.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::NoNonzeroPairs);
    }
    if d.len() < MIN_N {
        return Err(Error::invalid(format!(
            "need at least {MIN_N} nonzero pairs, got {}",
            d.len()
        )));
    }
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    Ok((d, ranks))
}

/// Tail probabilities `(P(T ≥ t), P(T ≤ t))` of the rank sum of a random
/// sign assignment, by counting the `2^n` patterns. Doubled ranks are integers,
/// so the counts are exact.
fn exact_tails(ranks: &[f64], t: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let t2 = (2.0 * t).round() as usize;
    let ge: u64 = counts[t2..].iter().sum();
    let le: u64 = counts[..=t2].iter().sum();
    let total = (1u64 << ranks.len()) as f64;
    (ge as f64 / total, le as f64 / total)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let (d, ranks) = signed_ranks(a, b)?;
    let n = d.len();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);

    let (p_two_sided, p_one_sided, exact) = if n <= EXACT_MAX_N {
        let (ge, le) = exact_tails(&ranks, w_plus);
        ((2.0 * ge.min(le)).min(1.0), ge, true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|x, y| x == y) {
            let t = group.len() as f64;
            ties += t * t * t - t;
        }
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0).sqrt();
        let phi = Normal::standard();
        let z_two = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
        let z_one = (w_plus - mean - 0.5) / sd;
        ((2.0 * (1.0 - phi.cdf(z_two))).min(1.0), 1.0 - phi.cdf(z_one), false)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        w,
        p_two_sided,
        p_one_sided,
        exact,
    })
}

/// The exact test at any size, by enumerating all `2^n` sign patterns
/// (`n ≤ 24`). Reference for checking the normal approximation.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let (d, ranks) = signed_ranks(a, b)?;
    if d.len() > 24 {
        return Err(Error::invalid("exact enumeration limited to 24 pairs"));
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = ranks.iter().sum::<f64>() - w_plus;
    let (ge, le) = exact_tails(&ranks, w_plus);
    Ok(Wilcoxon {
        n: d.len(),
        w_plus,
        w_minus,
        w: w_plus.min(w_minus),
        p_two_sided: (2.0 * ge.min(le)).min(1.0),
        p_one_sided: ge,
        exact: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!((r.w, r.w_minus, r.w_plus), (0.0, 0.0, 15.0));
        assert_eq!(r.p_one_sided, 0.03125);
        assert_eq!(r.p_two_sided, 0.0625);
    }

    #[test]
    fn symmetric_differences() {
        let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6]),
            Err(Error::NoNonzeroPairs)
        ));
        assert_eq!(Error::NoNonzeroPairs.to_string(), "no nonzero pairs");
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[0.0; 6]).is_err());
        // zero differences are discarded before counting
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 0.0], &[0.0; 5]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
