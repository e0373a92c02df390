//! Word-level similarity and memorization metrics for one generated/reference pair.
//!
//! Positions are compared under a padding convention: over the padded length
//! `max(N1, N2)`, a position where only one side has a token counts as a
//! mismatch. Under that convention the weighted distance is a metric.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap as HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SamplePair;

/// Maps both token lists to dense ids shared between them.
fn ids<S: AsRef<str>>(a: &[S], b: &[S]) -> (Vec<u32>, Vec<u32>) {
    let mut vocab = HashMap::with_capacity_and_hasher(a.len() + b.len(), Default::default());
    (intern(&mut vocab, a), intern(&mut vocab, b))
}

fn intern<'a, S: AsRef<str>>(vocab: &mut HashMap<&'a str, u32>, toks: &'a [S]) -> Vec<u32> {
    toks.iter()
        .map(|t| {
            let next = vocab.len() as u32;
            *vocab.entry(t.as_ref()).or_insert(next)
        })
        .collect()
}

fn vocab_size(a: &[u32], b: &[u32]) -> usize {
    a.iter().chain(b).max().map_or(0, |&m| m as usize + 1)
}

/// Number of leading tokens on which both sequences agree.
pub fn prefix_match_length<S: AsRef<str>>(generated: &[S], reference: &[S]) -> usize {
    generated
        .iter()
        .zip(reference)
        .take_while(|(a, b)| a.as_ref() == b.as_ref())
        .count()
}

/// Longest common (not necessarily contiguous) subsequence.
pub fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (a, b) = ids(a, b);
    lcs_ids(&a, &b)
}

/// Bit-parallel LCS length: bit `i` of `v` is cleared once `a[i]` is used
/// by the current LCS; one multiword add per token of `b`.
fn lcs_ids(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let words = a.len().div_ceil(64);
    let vocab = vocab_size(a, b);
    let mut peq = vec![0u64; vocab * words];
    for (i, &t) in a.iter().enumerate() {
        peq[t as usize * words + i / 64] |= 1 << (i % 64);
    }
    let mut v = vec![u64::MAX; words];
    for &t in b {
        let m = &peq[t as usize * words..][..words];
        let mut carry = false;
        for (vw, &mw) in v.iter_mut().zip(m) {
            let u = *vw & mw;
            let (sum, c1) = vw.overflowing_add(u);
            let (sum, c2) = sum.overflowing_add(carry as u64);
            carry = c1 || c2;
            *vw = sum | (*vw & !mw);
        }
    }
    let ones: usize = v
        .iter()
        .enumerate()
        .map(|(w, &vw)| {
            let bits = (a.len() - w * 64).min(64);
            let mask = if bits == 64 {
                u64::MAX
            } else {
                (1u64 << bits) - 1
            };
            (vw & mask).count_ones() as usize
        })
        .sum();
    a.len() - ones
}

/// Word-level Levenshtein distance (unit-cost insert, delete, substitute).
pub fn levenshtein_words<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (a, b) = ids(a, b);
    levenshtein_ids(&a, &b)
}

fn levenshtein_ids(a: &[u32], b: &[u32]) -> usize {
    let mut row: Vec<u32> = (0..=b.len() as u32).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        let mut left = i as u32 + 1;
        row[0] = left;
        for (cell, y) in row[1..].iter_mut().zip(b) {
            let up = *cell;
            left = (diag + u32::from(x != y)).min(up + 1).min(left + 1);
            diag = up;
            *cell = left;
        }
    }
    row[b.len()] as usize
}

/// Length of the longest contiguous n-gram shared by `a` and `b`
/// (longest common substring over tokens).
pub fn max_shared_ngram<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (a, b) = ids(a, b);
    max_shared_ngram_ids(&a, &b)
}

/// Longest run of equal tokens along any diagonal.
fn max_shared_ngram_ids(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    let diagonal = |x: &[u32], y: &[u32], best: &mut usize| {
        let mut run = 0;
        for (p, q) in x.iter().zip(y) {
            run = if p == q { run + 1 } else { 0 };
            *best = (*best).max(run);
        }
    };
    for i in 0..a.len() {
        if a.len() - i <= best {
            break;
        }
        diagonal(&a[i..], b, &mut best);
    }
    for j in 1..b.len() {
        if b.len() - j <= best {
            break;
        }
        diagonal(a, &b[j..], &mut best);
    }
    best
}

/// Size of the multiset intersection of the two token bags.
pub fn multiset_overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (a, b) = ids(a, b);
    multiset_overlap_ids(&a, &b)
}

fn multiset_overlap_ids(a: &[u32], b: &[u32]) -> usize {
    let mut counts = vec![0u32; vocab_size(a, b)];
    for &t in a {
        counts[t as usize] += 1;
    }
    b.iter()
        .filter(|&&t| {
            let c = &mut counts[t as usize];
            let hit = *c > 0;
            *c -= u32::from(hit);
            hit
        })
        .count()
}

/// Positional mismatch indicators over `len` positions; a position missing on
/// exactly one side is a mismatch.
pub fn mismatch_vector<S: AsRef<str>>(a: &[S], b: &[S], len: usize) -> Vec<bool> {
    let (a, b) = ids(a, b);
    mismatch_vector_ids(&a, &b, len)
}

fn mismatch_vector_ids(a: &[u32], b: &[u32], len: usize) -> Vec<bool> {
    (0..len).map(|j| a.get(j) != b.get(j)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InplaceStats {
    pub inplace_run: usize,
    pub d1: usize,
    pub matched: usize,
}

pub fn inplace_stats<S: AsRef<str>>(a: &[S], b: &[S]) -> InplaceStats {
    let (a, b) = ids(a, b);
    inplace_stats_ids(&a, &b)
}

fn inplace_stats_ids(a: &[u32], b: &[u32]) -> InplaceStats {
    let len = a.len().max(b.len());
    let (mut run, mut best, mut d1) = (0, 0, 0);
    for miss in mismatch_vector_ids(a, b, len) {
        if miss {
            d1 += 1;
            run = 0;
        } else {
            run += 1;
            best = best.max(run);
        }
    }
    InplaceStats {
        inplace_run: best,
        d1,
        matched: len - d1,
    }
}

/// `sum_{j=1..len} w^-j * mismatch[j]` for a precomputed mismatch vector.
pub fn weighted_distance_from_mismatches(mismatches: &[bool], w: f64) -> Result<f64> {
    check_base(w)?;
    // same powi as the band check, so a lone first mismatch lands exactly on its lower edge
    let mut total = 0.0;
    for (j, &miss) in mismatches.iter().enumerate() {
        if miss {
            let weight = w.powi(-(j.min(i32::MAX as usize - 1) as i32 + 1));
            if weight == 0.0 {
                break;
            }
            total += weight;
        }
    }
    Ok(total)
}

fn check_base(w: f64) -> Result<()> {
    if !(w > 1.0) || !w.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "weighted distance base must be > 1, got {w}"
        )));
    }
    Ok(())
}

/// Weighted positional distance truncated to the first `truncation` positions.
pub fn weighted_distance<S: AsRef<str>>(
    a: &[S],
    b: &[S],
    w: f64,
    truncation: usize,
) -> Result<f64> {
    check_base(w)?;
    if truncation == 0 {
        return Err(Error::InvalidParameter(
            "truncation length must be >= 1".into(),
        ));
    }
    weighted_distance_from_mismatches(&mismatch_vector(a, b, truncation), w)
}

/// ROUGE-L recall: LCS over reference length.
pub fn rouge_l<S: AsRef<str>>(generated: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedScore(
            "ROUGE-L needs a non-empty reference".into(),
        ));
    }
    Ok(lcs_length(generated, reference) as f64 / reference.len() as f64)
}

/// Clipped count of contiguous n-grams shared between the two sequences.
pub fn shared_ngram_count<S: AsRef<str>>(a: &[S], b: &[S], n: usize) -> usize {
    let (a, b) = ids(a, b);
    shared_ngram_count_ids(&a, &b, n)
}

fn shared_ngram_count_ids(a: &[u32], b: &[u32], n: usize) -> usize {
    if n == 0 || a.len() < n || b.len() < n {
        return 0;
    }
    let mut counts: HashMap<&[u32], usize> =
        HashMap::with_capacity_and_hasher(a.len(), Default::default());
    for g in a.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    let mut shared = 0;
    for g in b.windows(n) {
        if let Some(c) = counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeN {
    pub recall: f64,
    pub precision: f64,
}

pub fn rouge_n<S: AsRef<str>>(generated: &[S], reference: &[S], n: usize) -> Result<RougeN> {
    let (g, r) = ids(generated, reference);
    rouge_n_ids(&g, &r, n)
}

fn rouge_n_ids(generated: &[u32], reference: &[u32], n: usize) -> Result<RougeN> {
    if n == 0 {
        return Err(Error::InvalidParameter("ROUGE-n needs n >= 1".into()));
    }
    if generated.len() < n || reference.len() < n {
        return Err(Error::UndefinedScore(format!(
            "ROUGE-{n} needs both sequences to have at least {n} tokens (got {} and {})",
            generated.len(),
            reference.len()
        )));
    }
    let shared = shared_ngram_count_ids(generated, reference, n) as f64;
    Ok(RougeN {
        recall: shared / (reference.len() - n + 1) as f64,
        precision: shared / (generated.len() - n + 1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub rouge_n: Vec<usize>,
    pub d_w_base: f64,
    /// Positions summed by the weighted distance; `None` means `max(N1, N2)`.
    pub truncation: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            rouge_n: vec![1, 2],
            d_w_base: 3.0,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub n_pre: usize,
    pub lcs: usize,
    pub levenshtein: usize,
    pub n_max: usize,
    pub inplace_run: usize,
    pub d1: usize,
    pub d_w: f64,
    pub rouge_l: Option<f64>,
    pub rouge_n_precision: BTreeMap<usize, Option<f64>>,
    pub rouge_n_recall: BTreeMap<usize, Option<f64>>,
    pub n1: usize,
    pub n2: usize,
    /// Multiset intersection size of the two token bags.
    pub overlap: usize,
    /// Which scores were undefined for this pair (e.g. `rouge_2`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn metric_bundle(pair: &SamplePair, config: &MetricConfig) -> Result<MetricBundle> {
    metric_bundle_tokens(&pair.generated_tokens, &pair.reference_tokens, config)
}

pub fn metric_bundle_tokens<S: AsRef<str>>(
    generated: &[S],
    reference: &[S],
    config: &MetricConfig,
) -> Result<MetricBundle> {
    let (g, r) = ids(generated, reference);
    check_base(config.d_w_base)?;

    let (n1, n2) = (g.len(), r.len());
    let inplace = inplace_stats_ids(&g, &r);
    let truncation = config.truncation.unwrap_or(n1.max(n2)).max(1);
    let lcs = lcs_ids(&g, &r);
    let mut undefined = Vec::new();

    let rouge_l = if n2 == 0 {
        undefined.push("rouge_l".to_owned());
        None
    } else {
        Some(lcs as f64 / n2 as f64)
    };
    let mut precision = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &n in &config.rouge_n {
        match rouge_n_ids(&g, &r, n) {
            Ok(v) => {
                precision.insert(n, Some(v.precision));
                recall.insert(n, Some(v.recall));
            }
            Err(Error::UndefinedScore(_)) => {
                precision.insert(n, None);
                recall.insert(n, None);
                undefined.push(format!("rouge_{n}"));
            }
            Err(e) => return Err(e),
        }
    }

    Ok(MetricBundle {
        n_pre: g.iter().zip(&r).take_while(|(a, b)| a == b).count(),
        lcs,
        levenshtein: levenshtein_ids(&g, &r),
        n_max: max_shared_ngram_ids(&g, &r),
        inplace_run: inplace.inplace_run,
        d1: inplace.d1,
        d_w: weighted_distance_from_mismatches(
            &mismatch_vector_ids(&g, &r, truncation),
            config.d_w_base,
        )?,
        rouge_l,
        rouge_n_precision: precision,
        rouge_n_recall: recall,
        n1,
        n2,
        overlap: multiset_overlap_ids(&g, &r),
        undefined,
    })
}

/// Named relations among the metrics of one bundle. Each must hold for every
/// pair; a failing check indicates a bug, not a property of the data.
pub const CHAIN_CHECKS: &[&str] = &[
    "overlap>=lcs",
    "lcs>=n_max",
    "n_max>=inplace_run",
    "inplace_run>=n_pre",
    "lcs<=min_len",
    "n1+n2-2lcs>=levenshtein",
    "d1>=max_len-lcs",
    "2(max_len-lcs)>=levenshtein",
    "d_w_band",
    "rouge_l>=n_max/n2",
    "rouge_n_numerator>=n_max-n+1",
];

/// Relation printed in the reports but not asserted: it fails under positional
/// Hamming distance whenever a mismatch is followed by a match.
pub const REPORTED_ONLY_CHECK: &str = "n_pre>=min_len-d1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChainReport {
    pub violations: Vec<&'static str>,
    pub reported_only: Vec<&'static str>,
}

impl ChainReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_chain(b: &MetricBundle, config: &MetricConfig) -> ChainReport {
    let mut report = ChainReport::default();
    let max_len = b.n1.max(b.n2);
    let min_len = b.n1.min(b.n2);
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            report.violations.push(name);
        }
    };
    check(b.overlap >= b.lcs, CHAIN_CHECKS[0]);
    check(b.lcs >= b.n_max, CHAIN_CHECKS[1]);
    check(b.n_max >= b.inplace_run, CHAIN_CHECKS[2]);
    check(b.inplace_run >= b.n_pre, CHAIN_CHECKS[3]);
    check(b.lcs <= min_len, CHAIN_CHECKS[4]);
    check(b.n1 + b.n2 >= 2 * b.lcs + b.levenshtein, CHAIN_CHECKS[5]);
    check(b.d1 + b.lcs >= max_len, CHAIN_CHECKS[6]);
    check(
        2 * (max_len - b.lcs.min(max_len)) >= b.levenshtein,
        CHAIN_CHECKS[7],
    );

    // positions past both sequences always match, so the first mismatch lies within max_len
    let window = config.truncation.unwrap_or(max_len).min(max_len);
    check(
        d_w_in_band(b.d_w, b.n_pre, config.d_w_base, window),
        CHAIN_CHECKS[8],
    );

    if let Some(rl) = b.rouge_l {
        check(rl * b.n2 as f64 + 1e-9 >= b.n_max as f64, CHAIN_CHECKS[9]);
    }
    for (&n, r) in &b.rouge_n_recall {
        if let Some(recall) = r {
            let numerator = (recall * (b.n2 - n + 1) as f64).round() as i64;
            check(numerator > b.n_max as i64 - n as i64, CHAIN_CHECKS[10]);
        }
    }

    if (b.n_pre as i64) < min_len as i64 - b.d1 as i64 {
        report.reported_only.push(REPORTED_ONLY_CHECK);
    }
    report
}

/// `w^-(n_pre+1) <= d_w < w^-(n_pre+1) * w/(w-1)` when the first mismatch falls
/// inside the truncation window, and `d_w == 0` otherwise.
///
/// Both ends are compared with a relative slack of 1e-12: over long windows
/// the true distance to the upper end (`w^-truncation`) is below f64
/// resolution, while a genuine miss is off by a factor of `w - 1` or more.
pub fn d_w_in_band(d_w: f64, n_pre: usize, w: f64, truncation: usize) -> bool {
    if n_pre >= truncation {
        return d_w == 0.0;
    }
    let low = w.powi(-(n_pre as i32 + 1));
    let high = low * w / (w - 1.0);
    let eps = 1e-12 * low;
    d_w + eps >= low && d_w < high + eps
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn band_holds_for_long_mismatch_tails() {
        for n_pre in 0..40 {
            let mut miss = vec![false; n_pre];
            miss.resize(40, true);
            let d = weighted_distance_from_mismatches(&miss, 3.0).unwrap();
            assert!(d_w_in_band(d, n_pre, 3.0, 40), "n_pre {n_pre}: {d}");
            assert!(!d_w_in_band(d, n_pre + 1, 3.0, 40));
            if n_pre > 0 {
                assert!(!d_w_in_band(d, n_pre - 1, 3.0, 40));
            }
        }
    }

    #[test]
    fn prefix_match_examples() {
        assert_eq!(prefix_match_length(&t("a b c"), &t("a b c")), 3);
        assert_eq!(prefix_match_length(&t("x b c"), &t("a b c")), 0);
        assert_eq!(prefix_match_length(&t("a b x d e"), &t("a b c d e")), 2);
        assert_eq!(prefix_match_length::<&str>(&[], &t("a")), 0);
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&t("a b c d"), &t("a b c d")), 4);
        assert_eq!(lcs_length(&t("a b c"), &t("b c d")), 2);
        assert_eq!(lcs_length(&t("a b c"), &t("x y z")), 0);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein_words(&t("a b c"), &t("a b c")), 0);
        assert_eq!(levenshtein_words(&[], &t("a b c d")), 4);
        assert_eq!(levenshtein_words(&t("a b c"), &t("b c d")), 2);
        assert_eq!(levenshtein_words(&t("kitten sat"), &t("sitting sat on")), 2);
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(max_shared_ngram(&t("a b c"), &t("a b c")), 3);
        assert_eq!(max_shared_ngram(&t("x a b y"), &t("z a b w")), 2);
        assert_eq!(max_shared_ngram(&t("a b"), &t("c d")), 0);
    }

    #[test]
    fn inplace_examples() {
        assert_eq!(
            inplace_stats(&t("a b"), &t("a b c")),
            InplaceStats {
                inplace_run: 2,
                d1: 1,
                matched: 2
            }
        );
        assert_eq!(
            inplace_stats(&t("a b c"), &t("a b c")),
            InplaceStats {
                inplace_run: 3,
                d1: 0,
                matched: 3
            }
        );
        assert_eq!(
            inplace_stats(&t("a b c"), &t("x y z")),
            InplaceStats {
                inplace_run: 0,
                d1: 3,
                matched: 0
            }
        );
    }

    #[test]
    fn weighted_distance_examples() {
        assert_eq!(
            weighted_distance(&t("a b c"), &t("a b c"), 3.0, 3).unwrap(),
            0.0
        );
        let d = weighted_distance(&t("x b c"), &t("a b c"), 3.0, 3).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        let d = weighted_distance(&t("a x y z"), &t("a b c d"), 3.0, 4).unwrap();
        assert!((d - 13.0 / 81.0).abs() < 1e-15);
        assert!(matches!(
            weighted_distance(&t("a"), &t("b"), 1.0, 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(weighted_distance(&t("a"), &t("b"), 0.5, 1).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")).unwrap(), 1.0);
        assert!((rouge_l(&t("a b c"), &t("b c d")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l(&t("a b"), &t("c d")).unwrap(), 0.0);
        assert!(matches!(
            rouge_l(&t("a"), &[]),
            Err(Error::UndefinedScore(_))
        ));

        let r = rouge_n(&t("a b c d"), &t("a b c d"), 1).unwrap();
        assert_eq!((r.recall, r.precision), (1.0, 1.0));
        let r = rouge_n(&t("a b c"), &t("b c d"), 2).unwrap();
        assert_eq!((r.recall, r.precision), (0.5, 0.5));
        let r = rouge_n(&t("a b c"), &t("x y z"), 2).unwrap();
        assert_eq!((r.recall, r.precision), (0.0, 0.0));
        assert!(matches!(
            rouge_n(&t("a"), &t("a b"), 2),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn rouge_n_clips_repeated_ngrams() {
        // "a a a" has three unigram copies of a, "a b" only one
        let r = rouge_n(&t("a a a"), &t("a b"), 1).unwrap();
        assert_eq!(r.recall, 0.5);
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bundle_examples() {
        let cfg = MetricConfig::default();
        let b = metric_bundle_tokens(&t("a b c d e"), &t("a b c d e"), &cfg).unwrap();
        assert_eq!(
            (b.n_pre, b.lcs, b.levenshtein, b.rouge_l),
            (5, 5, 0, Some(1.0))
        );

        let b = metric_bundle_tokens(&t("x b c d e"), &t("a b c d e"), &cfg).unwrap();
        assert_eq!((b.n_pre, b.d1, b.lcs), (0, 1, 4));

        let b = metric_bundle_tokens(&[], &t("a b c d e"), &cfg).unwrap();
        assert_eq!((b.n_pre, b.levenshtein, b.d1), (0, 5, 5));
        assert_eq!(b.rouge_n_recall[&1], None);
        assert!(b.undefined.contains(&"rouge_1".to_owned()));
        assert!(check_chain(&b, &cfg).is_clean());
    }

    #[test]
    fn reported_only_link_can_fail() {
        // match, mismatch, match: n_pre = 1 but min_len - d1 = 2
        let cfg = MetricConfig::default();
        let b = metric_bundle_tokens(&t("a x c"), &t("a b c"), &cfg).unwrap();
        let report = check_chain(&b, &cfg);
        assert!(report.is_clean());
        assert_eq!(report.reported_only, vec![REPORTED_ONLY_CHECK]);
    }

    /// Textbook full-table recurrences for LCS, edit distance and longest common substring.
    fn plain_dp(a: &[String], b: &[String]) -> (usize, usize, usize) {
        let (n, m) = (a.len(), b.len());
        let mut l = vec![vec![0usize; m + 1]; n + 1];
        let mut e = vec![vec![0usize; m + 1]; n + 1];
        let mut c = vec![vec![0usize; m + 1]; n + 1];
        let mut best = 0;
        for i in 0..=n {
            for j in 0..=m {
                if i == 0 || j == 0 {
                    e[i][j] = i + j;
                    continue;
                }
                let eq = a[i - 1] == b[j - 1];
                l[i][j] = if eq {
                    l[i - 1][j - 1] + 1
                } else {
                    l[i - 1][j].max(l[i][j - 1])
                };
                e[i][j] = (e[i - 1][j - 1] + usize::from(!eq))
                    .min(e[i - 1][j] + 1)
                    .min(e[i][j - 1] + 1);
                c[i][j] = if eq { c[i - 1][j - 1] + 1 } else { 0 };
                best = best.max(c[i][j]);
            }
        }
        (l[n][m], e[n][m], best)
    }

    fn tokens(max_len: usize, vocab: u8) -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0..vocab).prop_map(|v| format!("w{v}")), 0..=max_len)
    }

    proptest! {
        #[test]
        fn chain_holds(a in tokens(25, 6), b in tokens(25, 6)) {
            let cfg = MetricConfig::default();
            let bundle = metric_bundle_tokens(&a, &b, &cfg).unwrap();
            let report = check_chain(&bundle, &cfg);
            prop_assert!(report.is_clean(), "{:?} for {:?} / {:?}", report, a, b);
            prop_assert!(bundle.d1 <= bundle.n1.max(bundle.n2));
            prop_assert!(bundle.d_w <= 1.0 / (cfg.d_w_base - 1.0));
        }

        #[test]
        fn triangle_inequality(a in tokens(12, 3), b in tokens(12, 3), c in tokens(12, 3), w in 1.5f64..5.0) {
            let n = 12;
            let ac = weighted_distance(&a, &c, w, n).unwrap();
            let ab = weighted_distance(&a, &b, w, n).unwrap();
            let bc = weighted_distance(&b, &c, w, n).unwrap();
            prop_assert!(ac <= ab + bc + 1e-15);
        }

        #[test]
        fn fast_paths_match_plain_dp(a in tokens(150, 4), b in tokens(150, 4)) {
            let (lcs, lev, sub) = plain_dp(&a, &b);
            prop_assert_eq!(lcs_length(&a, &b), lcs);
            prop_assert_eq!(levenshtein_words(&a, &b), lev);
            prop_assert_eq!(max_shared_ngram(&a, &b), sub);
        }

        #[test]
        fn metrics_are_symmetric_where_expected(a in tokens(15, 4), b in tokens(15, 4)) {
            prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
            prop_assert_eq!(levenshtein_words(&a, &b), levenshtein_words(&b, &a));
            prop_assert_eq!(max_shared_ngram(&a, &b), max_shared_ngram(&b, &a));
        }
    }
}
