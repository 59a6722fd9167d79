//! Accuracy and the Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions, {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;
/// Smallest number of non-zero differences the test accepts.
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// `min(W+, W−)`.
    pub w: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p` is reported as 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided signed-rank test of `a` against `b`.
///
/// Zero differences are dropped. With at most [`EXACT_MAX_N`] remaining the
/// p-value is exact: the null distribution of `W+` is counted over all sign
/// assignments of the (average) ranks. Larger samples use the normal
/// approximation with the tie-corrected variance.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon", format!("{} vs {} observations", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(Wilcoxon {
            w: 0.0,
            p: 1.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    if n < MIN_N {
        return Err(Error::Data(format!(
            "signed-rank test needs at least {MIN_N} non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= EXACT_MAX_N {
        // Doubled average ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (2.0 * w).round() as usize;
        let below: u64 = counts[..=limit].iter().sum();
        let p = (2.0 * below as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(Wilcoxon {
            w,
            p,
            n,
            exact: true,
            degenerate: false,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (w - mean) / var.sqrt();
        let std = Normal::new(0.0, 1.0).map_err(|e| Error::Usage(e.to_string()))?;
        (2.0 * std.cdf(z)).min(1.0)
    };
    Ok(Wilcoxon {
        w,
        p,
        n,
        exact: false,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn five_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p, 0.0625);
        assert_eq!(wilcoxon_signed_rank(&b, &a).unwrap().p, r.p);
    }

    #[test]
    fn equal_samples_degenerate() {
        let r = wilcoxon_signed_rank(&[0.5; 6], &[0.5; 6]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn normal_branch_is_reasonable() {
        let a: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &vec![0.0; 30]).unwrap();
        assert!(!r.exact);
        assert!(r.p < 1e-5);
    }
}
