//! Distribution of prefix match lengths across a corpus.
//!
//! Memorization is heavily right-skewed, so the summaries here focus on the
//! upper tail: top-k curves, type-1 quantiles, the chance that a subsample
//! misses the most memorized records, and resampled uncertainty for tail
//! statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RunMetadata;

/// Name recorded alongside every resampled result.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.3/seed^replicate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationSample {
    pub values: Vec<u32>,
    pub run: RunMetadata,
}

impl MemorizationSample {
    pub fn new(values: Vec<u32>, run: RunMetadata) -> Self {
        MemorizationSample { values, run }
    }
}

/// Empirical CDF over the observed support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl Ecdf {
    pub fn from_values(values: &[u32]) -> Self {
        let mut counts = BTreeMap::new();
        for &v in values {
            *counts.entry(v).or_insert(0u64) += 1;
        }
        Ecdf {
            counts,
            total: values.len() as u64,
        }
    }

    /// Builds an ECDF from explicit `value -> F(value)` points (must be
    /// nondecreasing and end at 1). Used for hypothetical distributions.
    pub fn from_cdf_points(points: &BTreeMap<u32, f64>) -> Result<CdfTable> {
        let mut prev = 0.0;
        for (&v, &f) in points {
            if !(f >= prev && f <= 1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "CDF not nondecreasing in [0,1] at {v}"
                )));
            }
            prev = f;
        }
        if (prev - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("CDF must reach 1".into()));
        }
        Ok(CdfTable {
            points: points.clone(),
        })
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    /// Number of observations `<= n`.
    pub fn count_le(&self, n: u32) -> u64 {
        self.counts.range(..=n).map(|(_, c)| c).sum()
    }

    pub fn table(&self) -> CdfTable {
        let mut acc = 0u64;
        let points = self
            .counts
            .iter()
            .map(|(&v, &c)| {
                acc += c;
                (v, acc as f64 / self.total as f64)
            })
            .collect();
        CdfTable { points }
    }
}

/// A step CDF given by its values at the support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub points: BTreeMap<u32, f64>,
}

impl CdfTable {
    /// `F(n)`; zero below the support.
    pub fn at(&self, n: i64) -> f64 {
        if n < 0 {
            return 0.0;
        }
        let n = n.min(u32::MAX as i64) as u32;
        self.points
            .range(..=n)
            .next_back()
            .map(|(_, &f)| f)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub ecdf: BTreeMap<u32, f64>,
    pub counts: BTreeMap<u32, u64>,
    pub quantiles: BTreeMap<String, u32>,
    pub max: u32,
    pub topk_curve: Vec<u32>,
    pub mean: f64,
    pub variance: f64,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub jarque_bera: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Type-1 (inverse-ECDF) quantile of sorted data: smallest x with F(x) >= q.
pub fn lower_quantile(sorted: &[u32], q: f64) -> Result<u32> {
    if sorted.is_empty() {
        return Err(Error::InsufficientData(
            "quantile of an empty sample".into(),
        ));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!(
            "quantile level {q} outside [0,1]"
        )));
    }
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

fn quantile_key(q: f64) -> String {
    format!("{q}")
}

pub fn summarize(
    sample: &MemorizationSample,
    ks: &[usize],
    qs: &[f64],
) -> Result<DistributionSummary> {
    let values = &sample.values;
    if values.is_empty() {
        return Err(Error::InsufficientData(
            "cannot summarize an empty sample".into(),
        ));
    }
    let n = values.len() as f64;
    let mut sorted = values.clone();
    sorted.sort_unstable();

    let ecdf = Ecdf::from_values(values);
    let mut quantiles = BTreeMap::new();
    for &q in qs {
        quantiles.insert(quantile_key(q), lower_quantile(&sorted, q)?);
    }

    let kmax = ks.iter().copied().max().unwrap_or(0).min(sorted.len());
    let topk_curve: Vec<u32> = sorted.iter().rev().take(kmax).copied().collect();

    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;

    let mut flags = Vec::new();
    let (skewness, excess_kurtosis, jarque_bera) = if m2 > 0.0 {
        let g1 = m3 / m2.powf(1.5);
        let g2 = m4 / (m2 * m2) - 3.0;
        (
            Some(g1),
            Some(g2),
            Some(n / 6.0 * (g1 * g1 + g2 * g2 / 4.0)),
        )
    } else {
        flags.push("zero variance: skewness and kurtosis undefined".to_owned());
        (None, None, None)
    };

    Ok(DistributionSummary {
        count: values.len(),
        ecdf: ecdf.table().points,
        counts: ecdf.counts().clone(),
        quantiles,
        max: *sorted.last().expect("non-empty"),
        topk_curve,
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        jarque_bera,
        flags,
    })
}

/// Probability that a size-`z` sample drawn without replacement from `m`
/// records contains none of the `k` largest: `C(m-k, z) / C(m, z)`.
///
/// Evaluated as the product `prod_{i<k} (m-z-i)/(m-i)`, which stays exact in
/// spirit and never overflows.
pub fn prob_missing_topk(m: u64, k: u64, z: u64) -> Result<f64> {
    if z > m {
        return Err(Error::InvalidParameter(format!(
            "sample size {z} exceeds population {m}"
        )));
    }
    if k < 1 || k > m {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must lie in 1..={m}"
        )));
    }
    if z + k > m {
        return Ok(0.0);
    }
    let mut p = 1.0;
    for i in 0..k {
        p *= (m - z - i) as f64 / (m - i) as f64;
    }
    Ok(p)
}

/// `P(max of z draws < n) ~= F(n-1)^z` under sampling with replacement.
pub fn prob_max_below(cdf: &CdfTable, z: u32, n: i64) -> Result<f64> {
    if z < 1 {
        return Err(Error::InvalidParameter("sample size must be >= 1".into()));
    }
    Ok(cdf.at(n - 1).powi(z as i32))
}

/// Distribution of the maximum of `z` with-replacement draws:
/// `P(max = v) = F(v)^z - F(v_prev)^z` over the support.
pub fn sampled_max_pmf(cdf: &CdfTable, z: u32) -> Result<BTreeMap<u32, f64>> {
    if z < 1 {
        return Err(Error::InvalidParameter("sample size must be >= 1".into()));
    }
    let mut prev = 0.0;
    Ok(cdf
        .points
        .iter()
        .map(|(&v, &f)| {
            let cur = f.powi(z as i32);
            let p = cur - prev;
            prev = cur;
            (v, p)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Statistic {
    Max,
    Mean,
    Quantile { q: f64 },
    TopkMean { k: usize },
}

impl Statistic {
    pub fn evaluate(&self, values: &[u32]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::InsufficientData(
                "statistic of an empty sample".into(),
            ));
        }
        Ok(match *self {
            Statistic::Max => *values.iter().max().expect("non-empty") as f64,
            Statistic::Mean => values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64,
            Statistic::Quantile { q } => {
                let mut sorted = values.to_vec();
                sorted.sort_unstable();
                lower_quantile(&sorted, q)? as f64
            }
            Statistic::TopkMean { k } => {
                let mut sorted = values.to_vec();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                let k = k.clamp(1, sorted.len());
                sorted[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64
            }
        })
    }
}

impl FromStr for Statistic {
    type Err = Error;

    /// Accepts `max`, `mean`, `quantile:0.99` and `topk-mean:10`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::InvalidParameter(format!("unknown statistic '{s}'"));
        match (name, arg) {
            ("max", None) => Ok(Statistic::Max),
            ("mean", None) => Ok(Statistic::Mean),
            ("quantile", Some(a)) => {
                let q: f64 = a.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(bad());
                }
                Ok(Statistic::Quantile { q })
            }
            ("topk-mean", Some(a)) => {
                let k: usize = a.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(Statistic::TopkMean { k })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Max => f.write_str("max"),
            Statistic::Mean => f.write_str("mean"),
            Statistic::Quantile { q } => write!(f, "quantile:{q}"),
            Statistic::TopkMean { k } => write!(f, "topk-mean:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub statistic: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
    pub rng: String,
}

/// Seeds replicate `i` with `seed ^ i` so any schedule gives identical draws.
fn replicate_rng(seed: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ i)
}

/// Percentile bootstrap interval for `statistic`.
pub fn bootstrap(
    values: &[u32],
    statistic: Statistic,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates < 1 {
        return Err(Error::InvalidParameter(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    if values.is_empty() {
        return Err(Error::InsufficientData(
            "bootstrap of an empty sample".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level {level} outside (0,1)"
        )));
    }
    let estimate = statistic.evaluate(values)?;
    let m = values.len();
    let mut stats: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, i);
            let resample: Vec<u32> = (0..m).map(|_| values[rng.gen_range(0..m)]).collect();
            statistic.evaluate(&resample)
        })
        .collect::<Result<_>>()?;
    stats.sort_by(|a, b| a.total_cmp(b));

    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let rank = (q * stats.len() as f64).ceil() as usize;
        stats[rank.clamp(1, stats.len()) - 1]
    };
    Ok(BootstrapResult {
        statistic: statistic.to_string(),
        estimate,
        lower: pick(alpha),
        upper: pick(1.0 - alpha),
        level,
        replicates,
        seed,
        rng: RNG_ALGORITHM.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(values: &[u32]) -> MemorizationSample {
        MemorizationSample::new(values.to_vec(), RunMetadata::default())
    }

    #[test]
    fn summarize_constant() {
        let s = summarize(&sample(&[0, 0, 0, 0]), &[2], &[0.5]).unwrap();
        assert_eq!(s.max, 0);
        assert_eq!(s.mean, 0.0);
        assert!(s.skewness.is_none());
        assert!(!s.flags.is_empty());
        assert_eq!(s.ecdf[&0], 1.0);
    }

    #[test]
    fn summarize_topk_and_symmetry() {
        let s = summarize(&sample(&[1, 5, 9]), &[2], &[]).unwrap();
        assert_eq!(s.topk_curve, vec![9, 5]);
        let s = summarize(&sample(&[0, 1, 1, 2]), &[1], &[]).unwrap();
        assert_eq!(s.skewness, Some(0.0));
        // m2 = 0.5, m4 = 0.5 -> kurtosis 2, excess -1
        assert!((s.excess_kurtosis.unwrap() + 1.0).abs() < 1e-12);
        assert!((s.jarque_bera.unwrap() - 4.0 / 6.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn summarize_right_skew_is_positive() {
        let s = summarize(
            &sample(&[0, 0, 0, 0, 0, 1, 1, 2, 16]),
            &[3],
            &[0.5, 0.9, 1.0],
        )
        .unwrap();
        assert!(s.skewness.unwrap() > 1.0);
        assert_eq!(s.quantiles["0.5"], 0);
        assert_eq!(s.quantiles["0.9"], 16);
        assert_eq!(s.quantiles["1"], 16);
    }

    #[test]
    fn type1_quantiles() {
        let v = [1, 2, 3, 4];
        assert_eq!(lower_quantile(&v, 0.0).unwrap(), 1);
        assert_eq!(lower_quantile(&v, 0.25).unwrap(), 1);
        assert_eq!(lower_quantile(&v, 0.26).unwrap(), 2);
        assert_eq!(lower_quantile(&v, 0.5).unwrap(), 2);
        assert_eq!(lower_quantile(&v, 1.0).unwrap(), 4);
        assert!(lower_quantile(&v, 1.5).is_err());
    }

    #[test]
    fn missing_topk_examples() {
        let p = prob_missing_topk(9723, 1, 455).unwrap();
        assert!((p - (9723.0 - 455.0) / 9723.0).abs() < 1e-12);
        assert!((p - 0.953204).abs() < 1e-6);
        assert_eq!(prob_missing_topk(50, 3, 0).unwrap(), 1.0);
        assert_eq!(prob_missing_topk(5, 2, 4).unwrap(), 0.0);
        // C(8,2)/C(10,2) = 28/45
        assert!((prob_missing_topk(10, 2, 2).unwrap() - 28.0 / 45.0).abs() < 1e-15);
        assert!(prob_missing_topk(5, 1, 6).is_err());
        assert!(prob_missing_topk(5, 6, 1).is_err());
        assert!(prob_missing_topk(5, 0, 1).is_err());
    }

    #[test]
    fn max_below_examples() {
        let one = Ecdf::from_cdf_points(&BTreeMap::from([(3, 1.0)])).unwrap();
        assert_eq!(prob_max_below(&one, 7, 4).unwrap(), 1.0);
        let half = Ecdf::from_cdf_points(&BTreeMap::from([(0, 0.5), (1, 1.0)])).unwrap();
        assert_eq!(prob_max_below(&half, 3, 1).unwrap(), 0.125);
        let tail = Ecdf::from_cdf_points(&BTreeMap::from([(7, 0.99), (16, 1.0)])).unwrap();
        let p = prob_max_below(&tail, 455, 8).unwrap();
        assert!((p - 0.99f64.powi(455)).abs() < 1e-15);
        assert!((p - 0.0103).abs() < 1e-3);
        assert!(prob_max_below(&tail, 0, 8).is_err());
    }

    #[test]
    fn sampled_max_examples() {
        let values = [0, 0, 3, 7, 7];
        let cdf = Ecdf::from_values(&values).table();
        let pmf = sampled_max_pmf(&cdf, 1).unwrap();
        assert!((pmf[&0] - 0.4).abs() < 1e-15);
        assert!((pmf[&3] - 0.2).abs() < 1e-15);
        assert!((pmf[&7] - 0.4).abs() < 1e-15);

        let two = Ecdf::from_cdf_points(&BTreeMap::from([(0, 0.5), (10, 1.0)])).unwrap();
        let pmf = sampled_max_pmf(&two, 2).unwrap();
        assert_eq!(pmf[&0], 0.25);
        assert_eq!(pmf[&10], 0.75);
    }

    #[test]
    fn statistic_parsing() {
        assert_eq!("max".parse::<Statistic>().unwrap(), Statistic::Max);
        assert_eq!(
            "quantile:0.9".parse::<Statistic>().unwrap(),
            Statistic::Quantile { q: 0.9 }
        );
        assert_eq!(
            "topk-mean:5".parse::<Statistic>().unwrap(),
            Statistic::TopkMean { k: 5 }
        );
        assert!("median".parse::<Statistic>().is_err());
        assert!("quantile:2".parse::<Statistic>().is_err());
        assert!("quantile".parse::<Statistic>().is_err());
    }

    #[test]
    fn bootstrap_constant_collapses() {
        let r = bootstrap(&[4; 30], Statistic::Mean, 200, 0.95, 1).unwrap();
        assert_eq!((r.lower, r.estimate, r.upper), (4.0, 4.0, 4.0));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let v: Vec<u32> = (0..300).map(|i| (i * 7919 % 23) as u32).collect();
        let a = bootstrap(&v, Statistic::Quantile { q: 0.9 }, 300, 0.9, 42).unwrap();
        let b = bootstrap(&v, Statistic::Quantile { q: 0.9 }, 300, 0.9, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rng, RNG_ALGORITHM);
        assert!(bootstrap(&v, Statistic::Max, 0, 0.9, 1).is_err());
        assert!(bootstrap(&[], Statistic::Max, 10, 0.9, 1).is_err());
    }

    #[test]
    fn bootstrap_mean_centres_on_sample_mean() {
        let v: Vec<u32> = (0..2000u64)
            .map(|i| ((i * 2654435761) % 13) as u32)
            .collect();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let se = (var / v.len() as f64).sqrt();
        let r = bootstrap(&v, Statistic::Mean, 2000, 0.95, 9).unwrap();
        let centre = (r.lower + r.upper) / 2.0;
        assert!((centre - mean).abs() < 3.0 * se);
        assert!(r.lower < mean && mean < r.upper);
    }

    proptest! {
        #[test]
        fn max_below_and_pmf_tail_sum_to_one(values in prop::collection::vec(0u32..12, 1..40), z in 1u32..30, n in 0i64..14) {
            let cdf = Ecdf::from_values(&values).table();
            let pmf = sampled_max_pmf(&cdf, z).unwrap();
            let tail: f64 = pmf.iter().filter(|(&v, _)| v as i64 >= n).map(|(_, p)| p).sum();
            let below = prob_max_below(&cdf, z, n).unwrap();
            prop_assert!((below + tail - 1.0).abs() < 1e-12);
            prop_assert!((pmf.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn max_below_nonincreasing_in_z(values in prop::collection::vec(0u32..12, 1..40), n in 0i64..14) {
            let cdf = Ecdf::from_values(&values).table();
            let mut prev = 1.0;
            for z in 1..50 {
                let p = prob_max_below(&cdf, z, n).unwrap();
                prop_assert!(p <= prev);
                prev = p;
            }
        }

        #[test]
        fn summary_reproduces_counts(values in prop::collection::vec(0u32..20, 1..80)) {
            let s = summarize(&sample(&values), &[3], &[0.5]).unwrap();
            prop_assert_eq!(s.max, *values.iter().max().unwrap());
            let mut prev = 0.0;
            for (&v, &f) in &s.ecdf {
                prop_assert!(f >= prev);
                let expected = values.iter().filter(|&&x| x <= v).count() as f64 / values.len() as f64;
                prop_assert!((f - expected).abs() < 1e-12);
                prev = f;
            }
            prop_assert_eq!(*s.ecdf.values().last().unwrap(), 1.0);
            for (&v, &c) in &s.counts {
                prop_assert_eq!(c as usize, values.iter().filter(|&&x| x == v).count());
            }
            prop_assert!(s.topk_curve.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
