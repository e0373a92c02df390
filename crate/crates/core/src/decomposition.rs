//! Per-position structure of memorization.
//!
//! A continuation that matches the reference for `n` tokens survived `n`
//! positions. The hazard `p_j = P(n_pre >= j | n_pre >= j-1)` is estimated by
//! counting, and the survival function is its running product. Two parametric
//! forms are fitted to the hazard: constant (geometric length) and linear in
//! the position.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SamplePair;

/// Correct/incorrect flag per sample and position. `true` marks a correct
/// (matching) token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessMatrix {
    pub ids: Vec<String>,
    pub width: usize,
    bits: Vec<bool>,
    pub valid_len: Vec<usize>,
}

/// Serialised bit convention. Stored matrices always use `true = correct`.
pub const BIT_CONVENTION: &str = "1=correct";

impl CorrectnessMatrix {
    /// Builds a matrix from explicit rows; each row's length is its valid length.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<bool>], width: usize) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::InvalidInput("one id per row required".into()));
        }
        if width == 0 {
            return Err(Error::InvalidParameter("matrix width must be >= 1".into()));
        }
        let mut bits = vec![false; rows.len() * width];
        let mut valid_len = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let len = row.len().min(width);
            bits[i * width..i * width + len].copy_from_slice(&row[..len]);
            valid_len.push(len);
        }
        Ok(CorrectnessMatrix {
            ids,
            width,
            bits,
            valid_len,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// Bit at 1-based position `j`; `None` when masked.
    pub fn get(&self, row: usize, j: usize) -> Option<bool> {
        (j >= 1 && j <= self.valid_len[row]).then(|| self.bits[row * self.width + j - 1])
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.width..row * self.width + self.valid_len[row]]
    }

    /// Leading run of correct tokens in a row.
    pub fn row_prefix_match(&self, row: usize) -> usize {
        self.row(row).iter().take_while(|&&b| b).count()
    }

    /// Compact `'1'/'0'` rendering of a row's valid bits.
    pub fn row_string(&self, row: usize) -> String {
        self.row(row)
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

pub fn correctness_row<S: AsRef<str>>(
    generated: &[S],
    reference: &[S],
    max_pos: usize,
) -> Vec<bool> {
    let len = generated.len().min(reference.len()).min(max_pos);
    (0..len)
        .map(|j| generated[j].as_ref() == reference[j].as_ref())
        .collect()
}

pub fn build_correctness_matrix(
    corpus: &[SamplePair],
    max_pos: usize,
) -> Result<CorrectnessMatrix> {
    if max_pos == 0 {
        return Err(Error::InvalidParameter("max_pos must be >= 1".into()));
    }
    let rows: Vec<Vec<bool>> = corpus
        .iter()
        .map(|p| correctness_row(&p.generated_tokens, &p.reference_tokens, max_pos))
        .collect();
    let ids = corpus.iter().map(|p| p.id.clone()).collect();
    CorrectnessMatrix::from_rows(ids, &rows, max_pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardProfile {
    pub p_hat: BTreeMap<usize, f64>,
    pub at_risk: BTreeMap<usize, u64>,
    pub geometric_p: Option<f64>,
    pub linear_alpha: Option<f64>,
    pub linear_p0: Option<f64>,
}

/// Empirical hazard at every position whose at-risk set is non-empty.
pub fn hazard_estimate(values: &[u32]) -> Result<HazardProfile> {
    if values.is_empty() {
        return Err(Error::InsufficientData("hazard of an empty sample".into()));
    }
    let max = *values.iter().max().expect("non-empty") as usize;
    // ge[k] = #{n_pre >= k}
    let mut ge = vec![0u64; max + 2];
    for &v in values {
        ge[v as usize] += 1;
    }
    for k in (0..=max).rev() {
        ge[k] += ge[k + 1];
    }
    let mut p_hat = BTreeMap::new();
    let mut at_risk = BTreeMap::new();
    for j in 1..=max + 1 {
        let denom = ge[j - 1];
        if denom == 0 {
            break;
        }
        p_hat.insert(j, ge[j] as f64 / denom as f64);
        at_risk.insert(j, denom);
    }
    Ok(HazardProfile {
        p_hat,
        at_risk,
        geometric_p: None,
        linear_alpha: None,
        linear_p0: None,
    })
}

/// `S(n) = prod_{j<=n} p_hat(j)`, `S(0) = 1`, over the estimated positions.
pub fn survival_from_hazard(profile: &HazardProfile) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::from([(0, 1.0)]);
    let mut s = 1.0;
    for (expected, (&j, &p)) in (1..).zip(&profile.p_hat) {
        if j != expected {
            break;
        }
        s *= p;
        out.insert(j, s);
    }
    out
}

/// Maximum-likelihood continuation probability for `P(N = n) = p^n (1 - p)`.
pub fn fit_geometric(values: &[u32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData(
            "geometric fit of an empty sample".into(),
        ));
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    Ok(mean / (1.0 + mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub alpha: f64,
    pub p0: f64,
    pub points: usize,
}

/// Least-squares line `p_j = alpha * j + p0` through the hazard estimates,
/// using positions with at least `min_at_risk` samples at risk. With
/// `weighted`, each point is weighted by its at-risk count.
pub fn fit_linear_hazard(
    profile: &HazardProfile,
    weighted: bool,
    min_at_risk: u64,
) -> Result<LinearFit> {
    let pts: Vec<(f64, f64, f64)> = profile
        .p_hat
        .iter()
        .filter_map(|(&j, &p)| {
            let r = *profile.at_risk.get(&j)?;
            (r >= min_at_risk.max(1)).then_some((
                j as f64,
                p,
                if weighted { r as f64 } else { 1.0 },
            ))
        })
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "linear hazard fit needs 2 usable positions, found {}",
            pts.len()
        )));
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let alpha = sxy / sxx;
    Ok(LinearFit {
        alpha,
        p0: my - alpha * mx,
        points: pts.len(),
    })
}

/// Hazard at 1-based position `j` under the linear model, clamped to `[0, 1]`.
pub fn linear_hazard(alpha: f64, p0: f64, j: usize) -> f64 {
    (alpha * j as f64 + p0).clamp(0.0, 1.0)
}

/// `P(N = n) = prod_{j=1..n} p_j * (1 - p_{n+1})` with `p_j = clamp(alpha j + p0)`.
///
/// A running product rather than a sum of logs: at `alpha = 0` it is then the
/// same floating-point computation as `p0 * ... * p0 * (1 - p0)`.
pub fn linear_hazard_pmf(alpha: f64, p0: f64, n: usize) -> f64 {
    let mut surv = 1.0;
    for j in 1..=n {
        surv *= linear_hazard(alpha, p0, j);
        if surv == 0.0 {
            return 0.0;
        }
    }
    surv * (1.0 - linear_hazard(alpha, p0, n + 1))
}

/// Plug-in mutual information (bits) between two binary vectors.
pub fn mutual_information_binary(x: &[bool], y: &[bool]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidInput(
            "MI needs two equal-length, non-empty vectors".into(),
        ));
    }
    let mut joint = [[0u64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        joint[a as usize][b as usize] += 1;
    }
    Ok(mi_from_joint(&joint))
}

fn mi_from_joint(joint: &[[u64; 2]; 2]) -> f64 {
    let n: u64 = joint.iter().flatten().sum();
    let row = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let col = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let term = |a: usize, b: usize| {
        let c = joint[a][b];
        if c == 0 {
            return 0.0;
        }
        let ratio = (c as f64 * n as f64) / (row[a] as f64 * col[b] as f64);
        c as f64 / n as f64 * ratio.log2()
    };
    // off-diagonal terms swap under x <-> y; summing them as a pair keeps the
    // result bit-identical in both argument orders
    (term(0, 0) + term(1, 1) + (term(0, 1) + term(1, 0))).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiMode {
    /// `MI(C_k, C_j)` for every `k < j`.
    Pairwise,
    /// `MI(C_1 & ... & C_{j-1}, C_j)`.
    PrefixConjunction,
}

impl std::str::FromStr for MiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(MiMode::Pairwise),
            "prefix-conjunction" | "prefix" => Ok(MiMode::PrefixConjunction),
            other => Err(Error::InvalidParameter(format!(
                "unknown MI mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEntry {
    /// Source position `k` (pairwise) or the last position of the conjunction `j-1`.
    pub source: usize,
    pub target: usize,
    pub bits: f64,
    /// Rows valid at both positions.
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiProfile {
    pub mode: MiMode,
    pub entries: Vec<MiEntry>,
    /// `(source, target)` cells with no valid rows.
    pub omitted: Vec<(usize, usize)>,
}

pub fn mi_profile(matrix: &CorrectnessMatrix, mode: MiMode) -> Result<MiProfile> {
    use rayon::prelude::*;

    if matrix.rows() == 0 {
        return Err(Error::InsufficientData(
            "MI profile of an empty matrix".into(),
        ));
    }
    let width = matrix.width;
    let cells: Vec<(usize, usize)> = match mode {
        MiMode::Pairwise => (2..=width)
            .flat_map(|j| (1..j).map(move |k| (k, j)))
            .collect(),
        MiMode::PrefixConjunction => (2..=width).map(|j| (j - 1, j)).collect(),
    };
    let results: Vec<((usize, usize), Option<MiEntry>)> = cells
        .into_par_iter()
        .map(|(k, j)| {
            let mut joint = [[0u64; 2]; 2];
            for row in 0..matrix.rows() {
                if matrix.valid_len[row] < j {
                    continue;
                }
                let x = match mode {
                    MiMode::Pairwise => matrix.get(row, k).expect("valid"),
                    MiMode::PrefixConjunction => matrix.row(row)[..j - 1].iter().all(|&b| b),
                };
                let y = matrix.get(row, j).expect("valid");
                joint[x as usize][y as usize] += 1;
            }
            let rows: u64 = joint.iter().flatten().sum();
            let entry = (rows > 0).then(|| MiEntry {
                source: k,
                target: j,
                bits: mi_from_joint(&joint),
                rows,
            });
            ((k, j), entry)
        })
        .collect();

    let mut entries = Vec::new();
    let mut omitted = Vec::new();
    for (cell, entry) in results {
        match entry {
            Some(e) => entries.push(e),
            None => omitted.push(cell),
        }
    }
    Ok(MiProfile {
        mode,
        entries,
        omitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&str]) -> CorrectnessMatrix {
        let bits: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.chars().map(|c| c == '1').collect())
            .collect();
        let width = bits.iter().map(Vec::len).max().unwrap_or(1);
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        CorrectnessMatrix::from_rows(ids, &bits, width).unwrap()
    }

    #[test]
    fn correctness_matrix_examples() {
        let same = SamplePair::from_words("a", "a b c d", "a b c d");
        let m = build_correctness_matrix(&[same], 3).unwrap();
        assert_eq!(m.row(0), &[true, true, true]);

        let disjoint = SamplePair::from_words("b", "a b c", "x y z");
        let m = build_correctness_matrix(&[disjoint], 3).unwrap();
        assert_eq!(m.row(0), &[false, false, false]);

        let p = SamplePair::from_words("c", "a b c", "a b x");
        let m = build_correctness_matrix(&[p], 3).unwrap();
        assert_eq!(m.row(0), &[true, true, false]);
        assert_eq!(m.row_prefix_match(0), 2);
        assert_eq!(m.row_string(0), "110");
        assert_eq!(m.get(0, 4), None);

        assert!(build_correctness_matrix(&[], 0).is_err());
    }

    #[test]
    fn rows_mask_beyond_shorter_side() {
        let p = SamplePair::from_words("a", "a b c d e", "a b");
        let m = build_correctness_matrix(&[p], 4).unwrap();
        assert_eq!(m.valid_len, vec![2]);
        assert_eq!(m.get(0, 3), None);
    }

    #[test]
    fn hazard_examples() {
        let h = hazard_estimate(&[0, 0, 1, 2]).unwrap();
        assert_eq!(h.p_hat[&1], 0.5);
        assert_eq!(h.p_hat[&2], 0.5);
        assert_eq!(h.p_hat[&3], 0.0);
        assert_eq!(h.p_hat.len(), 3);
        assert_eq!(
            h.at_risk.values().copied().collect::<Vec<_>>(),
            vec![4, 2, 1]
        );

        assert_eq!(hazard_estimate(&[0, 0]).unwrap().p_hat[&1], 0.0);
        assert_eq!(hazard_estimate(&[1, 3, 2]).unwrap().p_hat[&1], 1.0);
        assert!(hazard_estimate(&[]).is_err());
    }

    #[test]
    fn survival_examples() {
        let s = survival_from_hazard(&hazard_estimate(&[0, 0, 1, 2]).unwrap());
        assert_eq!(s[&0], 1.0);
        assert_eq!(s[&1], 0.5);
        assert_eq!(s[&2], 0.25);
        assert_eq!(s[&3], 0.0);

        let ones = HazardProfile {
            p_hat: (1..=5).map(|j| (j, 1.0)).collect(),
            at_risk: (1..=5).map(|j| (j, 3)).collect(),
            geometric_p: None,
            linear_alpha: None,
            linear_p0: None,
        };
        assert_eq!(survival_from_hazard(&ones)[&5], 1.0);
    }

    #[test]
    fn geometric_fit_examples() {
        assert_eq!(fit_geometric(&[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(fit_geometric(&[1, 1]).unwrap(), 0.5);
        assert!(fit_geometric(&[]).is_err());
    }

    fn profile(points: &[(usize, f64, u64)]) -> HazardProfile {
        HazardProfile {
            p_hat: points.iter().map(|&(j, p, _)| (j, p)).collect(),
            at_risk: points.iter().map(|&(j, _, r)| (j, r)).collect(),
            geometric_p: None,
            linear_alpha: None,
            linear_p0: None,
        }
    }

    #[test]
    fn linear_fit_examples() {
        let flat = profile(&[(1, 0.7, 10), (2, 0.7, 7), (3, 0.7, 5)]);
        let f = fit_linear_hazard(&flat, true, 1).unwrap();
        assert!(f.alpha.abs() < 1e-12 && (f.p0 - 0.7).abs() < 1e-12);

        let slope = profile(&[(1, 0.9, 100), (2, 0.8, 90), (3, 0.7, 72)]);
        let f = fit_linear_hazard(&slope, false, 1).unwrap();
        assert!((f.alpha + 0.1).abs() < 1e-12);
        assert!((f.p0 - 1.0).abs() < 1e-12);

        assert!(matches!(
            fit_linear_hazard(&slope, false, 95),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn linear_pmf_examples() {
        assert!((linear_hazard_pmf(-0.1, 1.0, 2) - 0.216).abs() < 1e-12);
        for n in 0..10 {
            let geo = 0.6f64.powi(n as i32) * 0.4;
            assert!((linear_hazard_pmf(0.0, 0.6, n) - geo).abs() < 1e-15);
        }
        let total: f64 = (0..20).map(|n| linear_hazard_pmf(-0.1, 1.0, n)).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let total: f64 = (0..40).map(|n| linear_hazard_pmf(-0.05, 0.9, n)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mi_examples() {
        assert_eq!(
            mutual_information_binary(&[true, true, true], &[true, false, true]).unwrap(),
            0.0
        );
        let x = [true, false, true, false];
        assert!((mutual_information_binary(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        // rows 01, 10, 11, 00
        let c1 = [false, true, true, false];
        let c2 = [true, false, true, false];
        assert_eq!(mutual_information_binary(&c1, &c2).unwrap(), 0.0);
        assert!(mutual_information_binary(&c1, &c2[..2]).is_err());
    }

    #[test]
    fn mi_profile_fixture_and_duplicates() {
        let m = matrix(&["01", "10", "11", "00"]);
        let p = mi_profile(&m, MiMode::Pairwise).unwrap();
        assert_eq!(p.entries.len(), 1);
        assert_eq!(p.entries[0].bits, 0.0);
        // memorization differs by row while MI is zero
        let lens: Vec<usize> = (0..4).map(|r| m.row_prefix_match(r)).collect();
        assert_eq!(lens, vec![0, 1, 2, 0]);

        let dup = matrix(&["11", "00", "11", "00", "11", "00"]);
        let p = mi_profile(&dup, MiMode::Pairwise).unwrap();
        assert!((p.entries[0].bits - 1.0).abs() < 1e-15);

        let pc = mi_profile(
            &matrix(&["111", "110", "011", "000"]),
            MiMode::PrefixConjunction,
        )
        .unwrap();
        assert_eq!(
            pc.entries.iter().map(|e| e.target).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn mi_profile_flags_empty_columns() {
        let m = CorrectnessMatrix::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![true], vec![false, true]],
            3,
        )
        .unwrap();
        let p = mi_profile(&m, MiMode::Pairwise).unwrap();
        assert_eq!(p.omitted, vec![(1, 3), (2, 3)]);
        assert_eq!(p.entries.len(), 1);
        assert_eq!(p.entries[0].rows, 1);
    }

    proptest! {
        #[test]
        fn mi_nonnegative_and_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let (x, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let a = mutual_information_binary(&x, &y).unwrap();
            let b = mutual_information_binary(&y, &x).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn survival_matches_empirical(values in prop::collection::vec(0u32..30, 1..200)) {
            let s = survival_from_hazard(&hazard_estimate(&values).unwrap());
            for (&n, &sv) in &s {
                let emp = values.iter().filter(|&&v| v as usize >= n).count() as f64 / values.len() as f64;
                prop_assert!((sv - emp).abs() < 1e-12);
            }
        }

        #[test]
        fn at_risk_nonincreasing(values in prop::collection::vec(0u32..30, 1..200)) {
            let h = hazard_estimate(&values).unwrap();
            let r: Vec<u64> = h.at_risk.values().copied().collect();
            prop_assert!(r.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(h.p_hat.values().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
