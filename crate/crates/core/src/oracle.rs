//! Exact classifiers over small discrete sequence distributions, and the
//! synthetic generators used to validate estimators.
//!
//! A [`ToyDistribution`] lists whole token sequences with their mass. The first
//! `prefix_len` tokens are the conditioning prefix; the classifiers predict the
//! next `n` tokens. Everything is computed by enumeration, so the results are
//! exact up to floating-point rounding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawRecord;

pub const MAX_ALPHABET: usize = 8;
pub const MAX_SUFFIX: usize = 8;

/// Sequences with the digit fixture used throughout the tests.
pub const GAP_SEQUENCES: &str = include_str!("../fixtures/gap_sequences.toy");
/// Four-row correctness fixture (`01`, `10`, `11`, `00`).
pub const INDEPENDENT_BITS: &str = include_str!("../fixtures/independent_bits.txt");

type Seq = Vec<String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDistribution {
    alphabet: BTreeSet<String>,
    probs: BTreeMap<Seq, f64>,
    seq_len: usize,
    prefix_len: usize,
}

impl ToyDistribution {
    /// Builds a distribution from sequences with nonnegative weights (counts or
    /// probabilities); weights are normalised. Repeated sequences accumulate.
    pub fn from_weights<I>(entries: I, prefix_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (Seq, f64)>,
    {
        let mut probs: BTreeMap<Seq, f64> = BTreeMap::new();
        let mut seq_len = None;
        for (seq, w) in entries {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "weight {w} for {seq:?} is not a finite nonnegative number"
                )));
            }
            if *seq_len.get_or_insert(seq.len()) != seq.len() {
                return Err(Error::InvalidInput(
                    "all sequences must have the same length".into(),
                ));
            }
            *probs.entry(seq).or_insert(0.0) += w;
        }
        probs.retain(|_, w| *w > 0.0);
        let total: f64 = probs.values().sum();
        if probs.is_empty() || total <= 0.0 {
            return Err(Error::InvalidInput("distribution has no mass".into()));
        }
        let seq_len = seq_len.unwrap_or(0);
        if prefix_len > seq_len {
            return Err(Error::InvalidParameter(format!(
                "prefix_len {prefix_len} exceeds sequence length {seq_len}"
            )));
        }
        for w in probs.values_mut() {
            *w /= total;
        }
        let alphabet = probs.keys().flatten().cloned().collect();
        Ok(ToyDistribution {
            alphabet,
            probs,
            seq_len,
            prefix_len,
        })
    }

    /// Parses the toy text format:
    ///
    /// ```text
    /// # comment
    /// prefix_len = 0
    /// split = chars      # or `space` (default)
    /// 2 000000
    /// 1 123456
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut prefix_len = 0;
        let mut by_char = false;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err =
                |m: String| Error::InvalidInput(format!("toy distribution line {}: {m}", i + 1));
            if let Some((key, value)) = line.split_once('=') {
                match (key.trim(), value.trim()) {
                    ("prefix_len", v) => {
                        prefix_len = v
                            .parse()
                            .map_err(|_| err(format!("bad prefix_len '{v}'")))?
                    }
                    ("split", "chars") => by_char = true,
                    ("split", "space") => by_char = false,
                    (k, v) => return Err(err(format!("unknown directive '{k} = {v}'"))),
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let weight: f64 = parts
                .next()
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| err("expected '<count> <sequence>'".into()))?;
            let seq: Seq = if by_char {
                parts
                    .flat_map(|p| p.chars().map(String::from).collect::<Vec<_>>())
                    .collect()
            } else {
                parts.map(str::to_owned).collect()
            };
            entries.push((seq, weight));
        }
        ToyDistribution::from_weights(entries, prefix_len)
    }

    /// Adds tokens to the alphabet without giving them mass.
    pub fn with_alphabet<I: IntoIterator<Item = String>>(mut self, tokens: I) -> Self {
        self.alphabet.extend(tokens);
        self
    }

    pub fn alphabet(&self) -> &BTreeSet<String> {
        &self.alphabet
    }

    pub fn probs(&self) -> &BTreeMap<Seq, f64> {
        &self.probs
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn prob(&self, seq: &[String]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    /// Mass of all sequences starting with `head`.
    pub fn mass_with_head(&self, head: &[String]) -> f64 {
        self.probs
            .iter()
            .filter(|(s, _)| s.starts_with(head))
            .map(|(_, p)| p)
            .sum()
    }

    /// Distribution of the token following `head`.
    pub fn next_token(&self, head: &[String]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (s, &p) in &self.probs {
            if s.len() > head.len() && s.starts_with(head) {
                *out.entry(s[head.len()].clone()).or_insert(0.0) += p;
            }
        }
        out
    }

    /// Prefix values with positive mass, in lexicographic order.
    pub fn prefixes(&self) -> BTreeMap<Seq, f64> {
        let mut out = BTreeMap::new();
        for (s, &p) in &self.probs {
            *out.entry(s[..self.prefix_len].to_vec()).or_insert(0.0) += p;
        }
        out
    }

    fn check_limits(&self, n: usize) -> Result<()> {
        if n > self.seq_len - self.prefix_len {
            return Err(Error::InvalidParameter(format!(
                "suffix length {n} exceeds the {} tokens after the prefix",
                self.seq_len - self.prefix_len
            )));
        }
        if n > MAX_SUFFIX || self.alphabet.len() > MAX_ALPHABET {
            return Err(Error::InvalidParameter(format!(
                "enumeration limited to alphabet <= {MAX_ALPHABET} and suffix length <= {MAX_SUFFIX} (got {} and {n})",
                self.alphabet.len()
            )));
        }
        Ok(())
    }
}

/// Token order used to break ties: earlier in the list wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieBreak {
    rank: BTreeMap<String, usize>,
}

impl TieBreak {
    pub fn lexicographic(dist: &ToyDistribution) -> Self {
        TieBreak::from_order(dist.alphabet.iter().cloned())
    }

    pub fn from_order<I: IntoIterator<Item = String>>(order: I) -> Self {
        TieBreak {
            rank: order.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
        }
    }

    fn rank(&self, t: &str) -> usize {
        self.rank.get(t).copied().unwrap_or(usize::MAX)
    }

    fn cmp_seq(&self, a: &[String], b: &[String]) -> Ordering {
        a.iter()
            .map(|t| self.rank(t))
            .cmp(b.iter().map(|t| self.rank(t)))
            .then_with(|| a.cmp(b))
    }

    /// Highest-mass key; ties go to the key ranked first.
    fn argmax<'a>(
        &self,
        masses: impl IntoIterator<Item = (&'a String, f64)>,
    ) -> Option<(&'a String, f64)> {
        pick_max(masses, |a, b| self.rank(a).cmp(&self.rank(b)))
    }
}

/// Masses this close (relative) count as tied: equal sums reached by
/// different float paths differ in the last bits.
const TIE_TOL: f64 = 1e-12;

/// Largest mass, with near-ties resolved by `order` (smallest wins).
fn pick_max<K, I, F>(items: I, mut order: F) -> Option<(K, f64)>
where
    I: IntoIterator<Item = (K, f64)>,
    F: FnMut(&K, &K) -> Ordering,
{
    let items: Vec<(K, f64)> = items.into_iter().collect();
    let top = items
        .iter()
        .map(|(_, p)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    items
        .into_iter()
        .filter(|(_, p)| *p >= top - TIE_TOL * top.abs())
        .min_by(|(a, _), (b, _)| order(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prefix: Seq,
    pub prefix_mass: f64,
    pub suffix: Seq,
    /// Joint mass of the prefix followed by the predicted suffix.
    pub match_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResult {
    pub predictions: Vec<Prediction>,
    pub expected_full_match: f64,
    pub bayes_risk: f64,
    /// Conditional probability of matching position `j` given the prediction
    /// matched positions `1..j-1`, averaged over prefixes.
    pub per_position_match: Vec<f64>,
}

impl ClassifierResult {
    /// Prediction for the empty (or only) prefix.
    pub fn predicted(&self) -> &[String] {
        &self.predictions[0].suffix
    }

    fn assemble(dist: &ToyDistribution, predictions: Vec<Prediction>, n: usize) -> Self {
        let expected_full_match: f64 = predictions.iter().map(|p| p.match_mass).sum();
        let mut per_position_match = vec![0.0; n];
        for pred in &predictions {
            let mut head = pred.prefix.clone();
            let mut prev = pred.prefix_mass;
            for (j, tok) in pred.suffix.iter().enumerate() {
                head.push(tok.clone());
                let cur = dist.mass_with_head(&head);
                if prev > 0.0 {
                    per_position_match[j] += pred.prefix_mass * cur / prev;
                }
                prev = cur;
            }
        }
        ClassifierResult {
            predictions,
            bayes_risk: 1.0 - expected_full_match,
            expected_full_match,
            per_position_match,
        }
    }
}

/// Predicts, for every prefix, the single most probable length-`n` suffix.
pub fn bayes_optimal(dist: &ToyDistribution, n: usize) -> Result<ClassifierResult> {
    bayes_optimal_with(dist, n, &TieBreak::lexicographic(dist))
}

pub fn bayes_optimal_with(
    dist: &ToyDistribution,
    n: usize,
    ties: &TieBreak,
) -> Result<ClassifierResult> {
    dist.check_limits(n)?;
    let k = dist.prefix_len;
    let mut groups: BTreeMap<Seq, BTreeMap<Seq, f64>> = BTreeMap::new();
    for (s, &p) in &dist.probs {
        *groups
            .entry(s[..k].to_vec())
            .or_default()
            .entry(s[k..k + n].to_vec())
            .or_insert(0.0) += p;
    }
    let predictions = groups
        .into_iter()
        .map(|(prefix, suffixes)| {
            let prefix_mass = suffixes.values().sum();
            let (suffix, match_mass) =
                pick_max(suffixes, |a: &Seq, b: &Seq| ties.cmp_seq(a, b)).expect("non-empty group");
            Prediction {
                prefix,
                prefix_mass,
                suffix,
                match_mass,
            }
        })
        .collect();
    Ok(ClassifierResult::assemble(dist, predictions, n))
}

/// Chooses each next token as the most probable one given the prefix and the
/// tokens chosen so far.
pub fn termwise_boc(dist: &ToyDistribution, n: usize) -> Result<ClassifierResult> {
    termwise_boc_with(dist, n, &TieBreak::lexicographic(dist))
}

pub fn termwise_boc_with(
    dist: &ToyDistribution,
    n: usize,
    ties: &TieBreak,
) -> Result<ClassifierResult> {
    dist.check_limits(n)?;
    let predictions = dist
        .prefixes()
        .into_iter()
        .map(|(prefix, prefix_mass)| {
            let path = greedy_path(dist, &prefix, n, ties);
            let mut full = prefix.clone();
            full.extend(path.iter().cloned());
            Prediction {
                match_mass: dist.mass_with_head(&full),
                prefix,
                prefix_mass,
                suffix: path,
            }
        })
        .collect::<Vec<_>>();
    if predictions.iter().any(|p| p.match_mass <= 0.0) {
        return Err(Error::Internal(
            "greedy path reached a zero-mass context".into(),
        ));
    }
    Ok(ClassifierResult::assemble(dist, predictions, n))
}

fn greedy_path(dist: &ToyDistribution, prefix: &[String], n: usize, ties: &TieBreak) -> Seq {
    let mut head = prefix.to_vec();
    let mut path = Vec::with_capacity(n);
    for _ in 0..n {
        let next = dist.next_token(&head);
        let Some((tok, _)) = ties.argmax(next.iter().map(|(t, &p)| (t, p))) else {
            break;
        };
        let tok = tok.clone();
        head.push(tok.clone());
        path.push(tok);
    }
    path
}

/// `sum_i p_i q_i`: chance that a token drawn from `q` equals one drawn from `p`.
pub fn expected_match_under_sampling(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::InvalidInput(format!(
            "alphabet sizes differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|&v| !(v >= 0.0) || !v.is_finite())
            || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidInput(format!(
                "{name} is not a probability distribution"
            )));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyComparison {
    /// `matches[j-1]`: greedy decoding under the model reproduces the
    /// term-wise classifier of the true distribution on positions `1..=j`.
    pub matches: Vec<bool>,
    /// `argmax_agree[j-1]`: at position `j`, along the model's greedy path,
    /// the model's and the true conditional argmax coincide.
    pub argmax_agree: Vec<bool>,
}

/// Compares greedy decoding under `model` with the term-wise classifier of
/// `truth`, for every prefix value in `truth`'s support.
pub fn greedy_matches_termwise(
    truth: &ToyDistribution,
    model: &ToyDistribution,
    n: usize,
) -> Result<GreedyComparison> {
    if truth.seq_len != model.seq_len || truth.prefix_len != model.prefix_len {
        return Err(Error::InvalidInput(
            "distributions must share sequence and prefix lengths".into(),
        ));
    }
    truth.check_limits(n)?;
    let alphabet: BTreeSet<String> = truth.alphabet.union(&model.alphabet).cloned().collect();
    let ties = TieBreak::from_order(alphabet);

    let mut matches = vec![true; n];
    let mut argmax_agree = vec![true; n];
    for prefix in truth.prefixes().into_keys() {
        let termwise = greedy_path(truth, &prefix, n, &ties);
        let mut head = prefix.clone();
        let mut agree_so_far = true;
        let mut same_path = true;
        for j in 0..n {
            let model_next = model.next_token(&head);
            let truth_next = truth.next_token(&head);
            let m_tok = ties
                .argmax(model_next.iter().map(|(t, &p)| (t, p)))
                .map(|(t, _)| t.clone());
            let t_tok = ties
                .argmax(truth_next.iter().map(|(t, &p)| (t, p)))
                .map(|(t, _)| t.clone());
            let agree = m_tok.is_some() && m_tok == t_tok;
            agree_so_far &= agree;
            argmax_agree[j] &= agree;
            same_path &= m_tok.as_ref() == termwise.get(j);
            matches[j] &= same_path;
            match m_tok {
                Some(t) => head.push(t),
                None => {
                    // the model has no continuation; everything after fails
                    for k in j + 1..n {
                        argmax_agree[k] = false;
                        matches[k] = false;
                    }
                    break;
                }
            }
            debug_assert!(!agree_so_far || same_path);
        }
    }
    Ok(GreedyComparison {
        matches,
        argmax_agree,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlResult {
    /// Natural-log divergence over full sequences; `inf` on a support violation.
    pub value: f64,
    pub support_violation: bool,
    /// Chain-rule terms: expected per-position conditional divergence. They
    /// sum to `value`.
    pub per_position: Vec<f64>,
}

/// `D_KL(truth || model)` over whole sequences.
pub fn kl_divergence(truth: &ToyDistribution, model: &ToyDistribution) -> Result<KlResult> {
    if truth.seq_len != model.seq_len {
        return Err(Error::InvalidInput(
            "distributions must share sequence length".into(),
        ));
    }
    let mut value = 0.0;
    let mut violation = false;
    for (s, &p) in &truth.probs {
        let q = model.prob(s);
        if q == 0.0 {
            violation = true;
        } else {
            value += p * (p / q).ln();
        }
    }
    if violation {
        value = f64::INFINITY;
    }

    let mut per_position = vec![0.0; truth.seq_len];
    for (j, term) in per_position.iter_mut().enumerate() {
        let contexts: BTreeSet<Seq> = truth.probs.keys().map(|s| s[..j].to_vec()).collect();
        for ctx in contexts {
            let p_next = truth.next_token(&ctx);
            let q_next = model.next_token(&ctx);
            let (p_tot, q_tot): (f64, f64) = (p_next.values().sum(), q_next.values().sum());
            for (tok, &p) in &p_next {
                let q = q_next.get(tok).copied().unwrap_or(0.0);
                if q == 0.0 {
                    *term = f64::INFINITY;
                } else {
                    *term += p * ((p / p_tot) / (q / q_tot)).ln();
                }
            }
        }
    }
    Ok(KlResult {
        value: value.max(0.0),
        support_violation: violation,
        per_position,
    })
}

/// Tokens and masses at the first point where two predictions part ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceDetail {
    pub prefix: Seq,
    pub position: usize,
    pub boc_token: String,
    pub termwise_token: String,
    /// Conditional masses of each token given the shared context.
    pub boc_token_mass: f64,
    pub termwise_token_mass: f64,
    /// Conditional masses of each full predicted suffix given the prefix.
    pub boc_suffix_mass: f64,
    pub termwise_suffix_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub boc_full_match: f64,
    pub termwise_full_match: f64,
    pub divergence_index: Option<usize>,
    pub detail: Option<DivergenceDetail>,
}

pub fn boc_vs_termwise_gap(dist: &ToyDistribution, n: usize) -> Result<GapResult> {
    let boc = bayes_optimal(dist, n)?;
    let tw = termwise_boc(dist, n)?;
    let mut detail: Option<DivergenceDetail> = None;
    for (b, t) in boc.predictions.iter().zip(&tw.predictions) {
        debug_assert_eq!(b.prefix, t.prefix);
        let Some(j) = b.suffix.iter().zip(&t.suffix).position(|(x, y)| x != y) else {
            continue;
        };
        if detail.as_ref().is_some_and(|d| d.position <= j + 1) {
            continue;
        }
        let mut ctx = b.prefix.clone();
        ctx.extend(b.suffix[..j].iter().cloned());
        let next = dist.next_token(&ctx);
        let total: f64 = next.values().sum();
        detail = Some(DivergenceDetail {
            prefix: b.prefix.clone(),
            position: j + 1,
            boc_token: b.suffix[j].clone(),
            termwise_token: t.suffix[j].clone(),
            boc_token_mass: next.get(&b.suffix[j]).copied().unwrap_or(0.0) / total,
            termwise_token_mass: next.get(&t.suffix[j]).copied().unwrap_or(0.0) / total,
            boc_suffix_mass: b.match_mass / b.prefix_mass,
            termwise_suffix_mass: t.match_mass / t.prefix_mass,
        });
    }
    Ok(GapResult {
        boc_full_match: boc.expected_full_match,
        termwise_full_match: tw.expected_full_match,
        divergence_index: detail.as_ref().map(|d| d.position),
        detail,
    })
}

/// Rebuilds `dist` token by token with every conditional distribution raised to
/// `1/temperature` and renormalised. Conditional argmaxes (and ties) are kept.
pub fn temper(dist: &ToyDistribution, temperature: f64) -> Result<ToyDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter("temperature must be > 0".into()));
    }
    let entries = dist.probs.keys().map(|s| {
        let mut p = 1.0;
        for j in 0..s.len() {
            let next = dist.next_token(&s[..j]);
            let z: f64 = next.values().map(|q| q.powf(1.0 / temperature)).sum();
            p *= next[&s[j]].powf(1.0 / temperature) / z;
        }
        (s.clone(), p)
    });
    ToyDistribution::from_weights(entries.collect::<Vec<_>>(), dist.prefix_len)
}

/// Swaps the two most probable first-suffix tokens within each prefix group,
/// so the conditional argmax at position 1 changes wherever they differ in mass.
pub fn flip_first_argmax(dist: &ToyDistribution) -> Result<ToyDistribution> {
    let k = dist.prefix_len;
    if k >= dist.seq_len {
        return Err(Error::InvalidParameter("no suffix position to flip".into()));
    }
    let ties = TieBreak::lexicographic(dist);
    let mut swaps: BTreeMap<Seq, (String, String)> = BTreeMap::new();
    for prefix in dist.prefixes().into_keys() {
        let mut next: Vec<(String, f64)> = dist.next_token(&prefix).into_iter().collect();
        next.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| ties.rank(&a.0).cmp(&ties.rank(&b.0)))
        });
        if next.len() >= 2 {
            swaps.insert(prefix, (next[0].0.clone(), next[1].0.clone()));
        }
    }
    let entries: Vec<(Seq, f64)> = dist
        .probs
        .iter()
        .map(|(s, &p)| {
            let mut s = s.clone();
            if let Some((a, b)) = swaps.get(&s[..k]) {
                if &s[k] == a {
                    s[k] = b.clone();
                } else if &s[k] == b {
                    s[k] = a.clone();
                }
            }
            (s, p)
        })
        .collect();
    ToyDistribution::from_weights(entries, k)
}

/// Random distribution over `support` distinct sequences drawn from an
/// alphabet of size `alphabet` (tokens `a`, `b`, ...).
pub fn random_toy<R: Rng>(
    rng: &mut R,
    alphabet: usize,
    len: usize,
    prefix_len: usize,
    support: usize,
) -> Result<ToyDistribution> {
    if alphabet == 0 || alphabet > 26 || len == 0 {
        return Err(Error::InvalidParameter(
            "alphabet must be 1..=26 and length >= 1".into(),
        ));
    }
    let tokens: Vec<String> = (0..alphabet)
        .map(|i| ((b'a' + i as u8) as char).to_string())
        .collect();
    let entries: Vec<(Seq, f64)> = (0..support.max(1))
        .map(|_| {
            let seq = (0..len)
                .map(|_| tokens[rng.gen_range(0..alphabet)].clone())
                .collect();
            // small integer weights make exact ties common
            (seq, rng.gen_range(1..=4) as f64)
        })
        .collect();
    ToyDistribution::from_weights(entries, prefix_len.min(len - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum NpreModel {
    Geometric { p: f64 },
    Linear { alpha: f64, p0: f64 },
}

impl NpreModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NpreModel::Geometric { p } if (0.0..=1.0).contains(&p) => Ok(()),
            NpreModel::Linear { alpha, p0 } if alpha.is_finite() && p0.is_finite() => Ok(()),
            other => Err(Error::InvalidParameter(format!(
                "invalid model parameters {other:?}"
            ))),
        }
    }

    /// Continuation probability at 1-based position `j`.
    pub fn hazard(&self, j: usize) -> f64 {
        match *self {
            NpreModel::Geometric { p } => p,
            NpreModel::Linear { alpha, p0 } => crate::decomposition::linear_hazard(alpha, p0, j),
        }
    }
}

/// Draws prefix match lengths: position `j` continues with probability
/// `hazard(j)`, stopping at the first failure or at `max_len`.
pub fn simulate_npre(model: NpreModel, count: usize, max_len: u32, seed: u64) -> Result<Vec<u32>> {
    model.validate()?;
    if count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut n = 0;
            while n < max_len && rng.gen::<f64>() < model.hazard(n as usize + 1) {
                n += 1;
            }
            n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub records: usize,
    pub vocab: usize,
    pub suffix_words: usize,
    pub cut: usize,
    pub model: NpreModel,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            records: 500,
            vocab: 400,
            suffix_words: 60,
            cut: crate::ingest::DEFAULT_CUT,
            model: NpreModel::Geometric { p: 0.7 },
            seed: 17,
        }
    }
}

/// Generates a generation log whose continuations copy the reference suffix
/// for a model-drawn number of words and then wander off.
///
/// References depend only on the seed, so logs drawn under different models
/// with the same seed share ids and references. The reference prefix is padded
/// to exactly `cut` characters so the character split lands on a word boundary.
pub fn synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<RawRecord>> {
    cfg.model.validate()?;
    if cfg.vocab < 2 || cfg.suffix_words == 0 || cfg.records == 0 {
        return Err(Error::InvalidParameter(
            "synthetic corpus needs records >= 1, vocab >= 2 and suffix_words >= 1".into(),
        ));
    }
    let mut ref_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen_rng = ChaCha8Rng::seed_from_u64(cfg.seed.rotate_left(17) ^ 0x9e37_79b9);
    let word = |i: usize| format!("w{i}");
    let lengths = simulate_npre(
        cfg.model,
        cfg.records,
        cfg.suffix_words as u32,
        cfg.seed ^ 0x5eed,
    )?;
    let mut out = Vec::with_capacity(cfg.records);
    for (i, &n_pre) in lengths.iter().enumerate() {
        let mut prefix = String::new();
        while prefix.chars().count() < cfg.cut {
            prefix.push_str(&word(ref_rng.gen_range(0..cfg.vocab)));
            prefix.push(' ');
        }
        let prefix: String = prefix
            .chars()
            .take(cfg.cut.saturating_sub(1))
            .collect::<String>()
            + " ";
        let suffix: Vec<String> = (0..cfg.suffix_words)
            .map(|_| word(ref_rng.gen_range(0..cfg.vocab)))
            .collect();
        let n_pre = n_pre as usize;
        let mut generated: Vec<String> = suffix[..n_pre].to_vec();
        if n_pre < suffix.len() {
            let mut miss = word(gen_rng.gen_range(0..cfg.vocab));
            while miss == suffix[n_pre] {
                miss = word(gen_rng.gen_range(0..cfg.vocab));
            }
            generated.push(miss);
            generated.extend(
                (n_pre + 1..cfg.suffix_words).map(|_| word(gen_rng.gen_range(0..cfg.vocab))),
            );
        }
        out.push(RawRecord {
            id: format!("s{i:05}"),
            reference: format!("{prefix}{}", suffix.join(" ")),
            generated: Some(generated.join(" ")),
        });
    }
    Ok(out)
}

/// Random embeddings for `(id, n_pre)` pairs. The full-sequence vector drifts
/// away from the prefix vector by `1 / (1 + n_pre)`, so the similarity gap
/// tracks memorization.
pub fn synthetic_embeddings(
    items: &[(String, u32)],
    dim: usize,
    seed: u64,
) -> Result<Vec<crate::embedding::EmbeddingRecord>> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(items
        .iter()
        .map(|(id, n_pre)| {
            let input: Vec<f64> = centre
                .iter()
                .map(|c| c + rng.gen_range(-0.5..0.5))
                .collect();
            let drift = 1.0 / (1.0 + *n_pre as f64);
            let full = input
                .iter()
                .map(|x| x + drift * rng.gen_range(-2.0..2.0))
                .collect();
            crate::embedding::EmbeddingRecord {
                id: id.clone(),
                input_vec: Some(input),
                full_vec: Some(full),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seed: u64,
    pub instances: usize,
    pub optimality_violations: usize,
    pub max_termwise_excess: f64,
    pub sampling_pairs: usize,
    pub sampling_violations: usize,
    pub max_sampling_excess: f64,
    pub biconditional_violations: usize,
    pub kl_negative: usize,
    pub fixture_boc: f64,
    pub fixture_termwise: f64,
    pub fixture_divergence: Option<usize>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.optimality_violations == 0
            && self.sampling_violations == 0
            && self.biconditional_violations == 0
            && self.kl_negative == 0
            && (self.fixture_boc - 2.0 / 7.0).abs() < 1e-12
            && (self.fixture_termwise - 1.0 / 7.0).abs() < 1e-12
            && self.fixture_divergence == Some(1)
    }
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k)
        .map(|_| -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Runs the optimality, sampling, biconditional and divergence checks on
/// random instances. Instance `i` draws from its own generator seeded with
/// `seed ^ i`, so results do not depend on the thread count.
pub fn verify_theorems(
    instances: usize,
    sampling_pairs: usize,
    seed: u64,
) -> Result<TheoremReport> {
    use rayon::prelude::*;

    let per_instance: Vec<(bool, f64, bool, bool)> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i);
            let alphabet = rng.gen_range(1..=4);
            let len = rng.gen_range(1..=4);
            let prefix_len = rng.gen_range(0..len);
            let support = rng.gen_range(1..=12);
            let d = random_toy(&mut rng, alphabet, len, prefix_len, support)?;
            let n = len - prefix_len;
            let b = bayes_optimal(&d, n)?;
            let t = termwise_boc(&d, n)?;
            let excess = t.expected_full_match - b.expected_full_match;

            let model = if rng.gen_bool(0.5) {
                temper(&d, rng.gen_range(0.3..3.0))?
            } else {
                flip_first_argmax(&d)?
            };
            let g = greedy_matches_termwise(&d, &model, n)?;
            let mut prefix_agree = true;
            let bicond = g.argmax_agree.iter().zip(&g.matches).all(|(&a, &m)| {
                prefix_agree &= a;
                prefix_agree == m
            });
            let kl = kl_divergence(&d, &model)?;
            Ok((excess > 1e-12, excess, bicond, kl.value < 0.0))
        })
        .collect::<Result<_>>()?;

    let sampling: Vec<f64> = (0..sampling_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(32) ^ i);
            let k = rng.gen_range(1..=8);
            let p = random_simplex(&mut rng, k);
            let q = random_simplex(&mut rng, k);
            let max_p = p.iter().copied().fold(0.0, f64::max);
            Ok(expected_match_under_sampling(&p, &q)? - max_p)
        })
        .collect::<Result<_>>()?;

    let gap_fixture = ToyDistribution::parse(GAP_SEQUENCES)?;
    let gap = boc_vs_termwise_gap(&gap_fixture, gap_fixture.seq_len())?;
    Ok(TheoremReport {
        seed,
        instances,
        optimality_violations: per_instance.iter().filter(|r| r.0).count(),
        max_termwise_excess: per_instance
            .iter()
            .map(|r| r.1)
            .fold(f64::NEG_INFINITY, f64::max),
        sampling_pairs,
        sampling_violations: sampling.iter().filter(|&&e| e > 1e-12).count(),
        max_sampling_excess: sampling.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        biconditional_violations: per_instance.iter().filter(|r| !r.2).count(),
        kl_negative: per_instance.iter().filter(|r| r.3).count(),
        fixture_boc: gap.boc_full_match,
        fixture_termwise: gap.termwise_full_match,
        fixture_divergence: gap.divergence_index,
    })
}
