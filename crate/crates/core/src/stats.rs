//! Signed-rank test, rank correlation and entropy.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest effective sample size handled by the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub ids: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PairedSample {
    pub fn new(ids: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || ids.len() != x.len() {
            return Err(Error::InvalidInput(format!(
                "paired sample lengths differ: ids {}, x {}, y {}",
                ids.len(),
                x.len(),
                y.len()
            )));
        }
        Ok(PairedSample { ids, x, y })
    }

    /// Convenience constructor with positional ids.
    pub fn unlabeled(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ids = (0..x.len()).map(|i| i.to_string()).collect();
        PairedSample::new(ids, x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub zeros_dropped: usize,
    pub method: PMethod,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

struct SignedRanks {
    /// Ranks of |d| for the nonzero differences, doubled so midranks are integers.
    doubled: Vec<u64>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
    zeros: usize,
}

fn signed_ranks(paired: &PairedSample) -> Result<SignedRanks> {
    let diffs: Vec<f64> = paired.x.iter().zip(&paired.y).map(|(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite value in paired sample".into(),
        ));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let zeros = diffs.len() - nonzero.len();
    if nonzero.is_empty() {
        return Err(Error::DegenerateSample(format!(
            "all {} differences are zero",
            diffs.len()
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);

    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        if j > 1 {
            tie_sizes.push(j);
        }
        i += j;
    }

    Ok(SignedRanks {
        doubled: ranks.iter().map(|r| (2.0 * r).round() as u64).collect(),
        positive: nonzero.iter().map(|&d| d > 0.0).collect(),
        tie_sizes,
        zeros,
    })
}

/// Two-sided signed-rank test. Exact null distribution for up to
/// [`EXACT_LIMIT`] nonzero differences, normal approximation with tie and
/// continuity correction above.
pub fn wilcoxon_signed_rank(paired: &PairedSample) -> Result<WilcoxonResult> {
    let sr = signed_ranks(paired)?;
    if sr.doubled.len() <= EXACT_LIMIT {
        Ok(exact_from_ranks(&sr))
    } else {
        Ok(normal_from_ranks(&sr))
    }
}

pub fn wilcoxon_exact(paired: &PairedSample) -> Result<WilcoxonResult> {
    let sr = signed_ranks(paired)?;
    if sr.doubled.len() > 62 {
        return Err(Error::InvalidParameter(
            "exact signed-rank test limited to 62 differences".into(),
        ));
    }
    Ok(exact_from_ranks(&sr))
}

pub fn wilcoxon_normal(paired: &PairedSample) -> Result<WilcoxonResult> {
    Ok(normal_from_ranks(&signed_ranks(paired)?))
}

fn rank_sums(sr: &SignedRanks) -> (u64, u64) {
    let plus: u64 = sr
        .doubled
        .iter()
        .zip(&sr.positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let total: u64 = sr.doubled.iter().sum();
    (plus, total - plus)
}

fn exact_from_ranks(sr: &SignedRanks) -> WilcoxonResult {
    let (plus2, minus2) = rank_sums(sr);
    let total2: u64 = sr.doubled.iter().sum();

    // counts[s] = number of sign assignments whose doubled positive rank sum is s
    let mut counts = vec![0u64; total2 as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in &sr.doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let le: u64 = counts[..=plus2 as usize].iter().sum();
    let ge: u64 = counts[plus2 as usize..].iter().sum();
    let assignments = 1u64 << sr.doubled.len();
    let p = ((2 * le.min(ge)) as f64 / assignments as f64).min(1.0);

    WilcoxonResult {
        w_plus: plus2 as f64 / 2.0,
        w_minus: minus2 as f64 / 2.0,
        statistic: plus2.min(minus2) as f64 / 2.0,
        p_value: p,
        n_effective: sr.doubled.len(),
        zeros_dropped: sr.zeros,
        method: PMethod::Exact,
    }
}

fn normal_from_ranks(sr: &SignedRanks) -> WilcoxonResult {
    let (plus2, minus2) = rank_sums(sr);
    let n = sr.doubled.len() as f64;
    let w_plus = plus2 as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = sr
        .tie_sizes
        .iter()
        .map(|&t| ((t * t * t - t) as f64) / 48.0)
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    WilcoxonResult {
        w_plus,
        w_minus: minus2 as f64 / 2.0,
        statistic: plus2.min(minus2) as f64 / 2.0,
        p_value: p,
        n_effective: sr.doubled.len(),
        zeros_dropped: sr.zeros,
        method: PMethod::Normal,
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(
            "correlation needs two equal-length vectors of length >= 2".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedScore(
            "correlation with a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of midranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman_rho needs two equal-length vectors of length >= 2".into(),
        ));
    }
    pearson(&midranks(x), &midranks(y))
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_bits(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum::<f64>()
        .max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diffs(d: &[f64]) -> PairedSample {
        PairedSample::unlabeled(d.to_vec(), vec![0.0; d.len()]).unwrap()
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let p = PairedSample::unlabeled(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            wilcoxon_signed_rank(&p),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn all_positive_three() {
        let r = wilcoxon_signed_rank(&diffs(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.w_plus, 6.0);
        assert_eq!(r.p_value, 0.25);
        assert_eq!(r.method, PMethod::Exact);
    }

    #[test]
    fn zeros_dropped_and_ties_midranked() {
        let r = wilcoxon_signed_rank(&diffs(&[0.0, 1.0, -1.0, 2.0])).unwrap();
        assert_eq!(r.zeros_dropped, 1);
        assert_eq!(r.n_effective, 3);
        // |d| = 1,1,2 -> ranks 1.5, 1.5, 3
        assert_eq!(r.w_plus, 4.5);
        assert_eq!(r.w_minus, 1.5);
        // doubled ranks 3,3,6; sums over 8 assignments: 0,3,3,6,6,9,9,12; W+ doubled = 9
        // P(S >= 9) = 3/8, P(S <= 9) = 7/8 -> p = 6/8
        assert_eq!(r.p_value, 0.75);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(PairedSample::unlabeled(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn normal_approximation_reasonable() {
        let d: Vec<f64> = (1..=30)
            .map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 })
            .collect();
        let r = wilcoxon_signed_rank(&diffs(&d)).unwrap();
        assert_eq!(r.method, PMethod::Normal);
        let e = wilcoxon_exact(&diffs(&d)).unwrap();
        assert!((r.p_value - e.p_value).abs() < 0.01);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_bits(&[1.0]).unwrap(), 0.0);
        assert_eq!(entropy_bits(&[0.5, 0.5]).unwrap(), 1.0);
        assert!((entropy_bits(&[0.25, 0.75]).unwrap() - 0.811_278_124_459_132_8).abs() < 1e-12);
        assert_eq!(entropy_bits(&[0.0, 1.0]).unwrap(), 0.0);
        assert!(entropy_bits(&[-0.1, 1.1]).is_err());
        assert!(entropy_bits(&[0.2, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariant(x in prop::collection::vec(-50.0f64..50.0, 3..30), y in prop::collection::vec(-50.0f64..50.0, 30)) {
            let y = &y[..x.len()];
            if let Ok(r) = spearman_rho(&x, y) {
                let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let ty: Vec<f64> = y.iter().map(|v| v * 3.0 - 7.0).collect();
                let r2 = spearman_rho(&tx, &ty).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
            }
        }

        #[test]
        fn uniform_maximizes_entropy(w in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 0.0);
            let p: Vec<f64> = w.iter().map(|v| v / total).collect();
            let h = entropy_bits(&p).unwrap();
            prop_assert!(h <= (p.len() as f64).log2() + 1e-12);
            prop_assert!(h >= 0.0);
        }
    }
}
