//! Embedding similarity gap.
//!
//! For every record, `S_input` is its mean cosine similarity to all other
//! prompts and `S_full` the same over full sequences. `ΔS = S_full - S_input`;
//! negative values mean the continuations are more diverse than the prompts.
//! Vectors are supplied by the caller, this module does not embed text.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RecordError;
use crate::stats::spearman_rho;

pub const BINARY_MAGIC: &[u8; 8] = b"MSKEMB1\0";

/// Above this many records the exact O(M^2) pass is usually replaced by
/// [`SimilarityMode::Sampled`].
pub const EXACT_RECORD_LIMIT: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    #[serde(default)]
    pub input_vec: Option<Vec<f64>>,
    #[serde(default)]
    pub full_vec: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Input,
    Full,
}

impl EmbeddingRecord {
    pub fn vector(&self, field: Field) -> Option<&[f64]> {
        match field {
            Field::Input => self.input_vec.as_deref(),
            Field::Full => self.full_vec.as_deref(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::InvalidInput(
            "cosine of a zero or non-finite vector".into(),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimilarityMode {
    Exact,
    /// Mean over `others` randomly chosen partners per record.
    Sampled {
        others: usize,
        seed: u64,
    },
}

/// Mean cosine similarity of each record to every other record, on one field.
///
/// Records are processed in id order so the result does not depend on input order.
pub fn mean_similarity(
    records: &[EmbeddingRecord],
    field: Field,
    mode: SimilarityMode,
) -> Result<BTreeMap<String, f64>> {
    let mut usable: Vec<(&str, Vec<f64>)> = Vec::new();
    let mut dim = None;
    for r in records {
        let Some(v) = r.vector(field) else { continue };
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(Error::InvalidInput(format!(
                "record '{}' has dimension {}",
                r.id,
                v.len()
            )));
        }
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidInput(format!(
                "record '{}' has a zero or non-finite vector",
                r.id
            )));
        }
        usable.push((&r.id, v.iter().map(|x| x / n).collect()));
    }
    if usable.len() < 2 {
        return Err(Error::InsufficientData(
            "mean similarity needs at least two records".into(),
        ));
    }
    usable.sort_by(|a, b| a.0.cmp(b.0));
    if usable.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidInput("duplicate embedding ids".into()));
    }

    let m = usable.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let means: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| match mode {
            SimilarityMode::Exact => {
                let total: f64 = (0..m)
                    .filter(|&j| j != i)
                    .map(|j| dot(&usable[i].1, &usable[j].1))
                    .sum();
                total / (m - 1) as f64
            }
            SimilarityMode::Sampled { others, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
                let draws = others.max(1);
                let total: f64 = (0..draws)
                    .map(|_| {
                        let mut j = rng.gen_range(0..m - 1);
                        if j >= i {
                            j += 1;
                        }
                        dot(&usable[i].1, &usable[j].1)
                    })
                    .sum();
                total / draws as f64
            }
        })
        .collect();
    Ok(usable
        .iter()
        .zip(means)
        .map(|((id, _), s)| (id.to_string(), s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGap {
    pub s_input: BTreeMap<String, f64>,
    pub s_full: BTreeMap<String, f64>,
    pub delta_s: BTreeMap<String, f64>,
    /// Records missing one of the vectors.
    pub flagged: Vec<String>,
}

pub fn similarity_gap(records: &[EmbeddingRecord], mode: SimilarityMode) -> Result<SimilarityGap> {
    let (complete, missing): (Vec<_>, Vec<_>) = records
        .iter()
        .partition(|r| r.input_vec.is_some() && r.full_vec.is_some());
    let complete: Vec<EmbeddingRecord> = complete.into_iter().cloned().collect();
    let mut flagged: Vec<String> = missing.into_iter().map(|r| r.id.clone()).collect();
    flagged.sort();

    let s_input = mean_similarity(&complete, Field::Input, mode)?;
    let s_full = mean_similarity(&complete, Field::Full, mode)?;
    let delta_s = s_full
        .iter()
        .map(|(id, f)| (id.clone(), f - s_input[id]))
        .collect();
    Ok(SimilarityGap {
        s_input,
        s_full,
        delta_s,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub id: String,
    pub s_input: f64,
    pub s_full: f64,
    pub delta_s: f64,
    pub n_pre: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl Correlation {
    fn of(x: &[f64], y: &[f64]) -> Self {
        match spearman_rho(x, y) {
            Ok(rho) => Correlation {
                rho: Some(rho),
                flag: None,
            },
            Err(e) => Correlation {
                rho: None,
                flag: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    pub rho_s_input: Correlation,
    pub rho_s_full: Correlation,
    pub rho_delta_s: Correlation,
    /// Ids with similarity but no memorization value.
    pub missing_n_pre: Vec<String>,
    /// Ids with a memorization value but no similarity.
    pub missing_similarity: Vec<String>,
}

/// Joins similarity values with prefix match lengths by id and reports the
/// Spearman correlation of each similarity quantity with `n_pre`.
pub fn memorization_similarity_report(
    gap: &SimilarityGap,
    n_pre: &BTreeMap<String, u32>,
) -> SimilarityReport {
    let mut rows = Vec::new();
    let mut missing_n_pre = Vec::new();
    for (id, &ds) in &gap.delta_s {
        match n_pre.get(id) {
            Some(&n) => rows.push(SimilarityRow {
                id: id.clone(),
                s_input: gap.s_input[id],
                s_full: gap.s_full[id],
                delta_s: ds,
                n_pre: n,
            }),
            None => missing_n_pre.push(id.clone()),
        }
    }
    let missing_similarity = n_pre
        .keys()
        .filter(|id| !gap.delta_s.contains_key(*id))
        .cloned()
        .collect();

    let n: Vec<f64> = rows.iter().map(|r| r.n_pre as f64).collect();
    let col = |f: fn(&SimilarityRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    SimilarityReport {
        rho_s_input: Correlation::of(&col(|r| r.s_input), &n),
        rho_s_full: Correlation::of(&col(|r| r.s_full), &n),
        rho_delta_s: Correlation::of(&col(|r| r.delta_s), &n),
        rows,
        missing_n_pre,
        missing_similarity,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingFile {
    pub records: Vec<EmbeddingRecord>,
    pub errors: Vec<RecordError>,
}

/// Reads line-delimited records with fields `id`, `input_vec`, `full_vec`.
pub fn parse_embeddings_jsonl(text: &str) -> EmbeddingFile {
    let mut out = EmbeddingFile::default();
    let mut dim: Option<usize> = None;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: EmbeddingRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RecordError {
                    line: line_no,
                    message: format!("malformed embedding record: {e}"),
                });
                continue;
            }
        };
        let mut problem = None;
        for v in [&rec.input_vec, &rec.full_vec].into_iter().flatten() {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                problem = Some(format!("dimension {} differs from {d}", v.len()));
            } else if norm(v) == 0.0 {
                problem = Some("zero-norm vector".to_owned());
            }
        }
        if !seen.insert(rec.id.clone()) {
            problem = Some(format!("duplicate id '{}'", rec.id));
        }
        match problem {
            Some(message) => out.errors.push(RecordError {
                line: line_no,
                message,
            }),
            None => out.records.push(rec),
        }
    }
    out
}

/// Packed little-endian layout: magic, `dim: u32`, `count: u32`, then per
/// record `id_len: u32`, id bytes, `dim` f32 prompt values and `dim` f32
/// full-sequence values. A vector of NaNs marks a missing field.
pub fn write_embeddings_binary<W: Write>(mut w: W, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records
        .iter()
        .find_map(|r| r.input_vec.as_ref().or(r.full_vec.as_ref()).map(Vec::len))
        .unwrap_or(0);
    let io = |e| Error::io("<embedding writer>", e);
    w.write_all(BINARY_MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u32).to_le_bytes())
        .map_err(io)?;
    for r in records {
        w.write_all(&(r.id.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(r.id.as_bytes()).map_err(io)?;
        for v in [&r.input_vec, &r.full_vec] {
            match v {
                Some(v) if v.len() == dim => {
                    for x in v {
                        w.write_all(&(*x as f32).to_le_bytes()).map_err(io)?;
                    }
                }
                Some(v) => {
                    return Err(Error::InvalidInput(format!(
                        "record '{}' has dimension {} instead of {dim}",
                        r.id,
                        v.len()
                    )))
                }
                None => {
                    for _ in 0..dim {
                        w.write_all(&f32::NAN.to_le_bytes()).map_err(io)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn read_embeddings_binary<R: Read>(mut r: R) -> Result<Vec<EmbeddingRecord>> {
    let bad = |m: &str| Error::InvalidInput(format!("embedding binary: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|_| bad("truncated id"))?;
        let id = String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?;
        let mut vecs = [None, None];
        for slot in &mut vecs {
            let mut raw = vec![0u8; dim * 4];
            r.read_exact(&mut raw)
                .map_err(|_| bad("truncated vector"))?;
            let v: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if !v.iter().all(|x| x.is_nan()) || dim == 0 {
                *slot = Some(v);
            }
        }
        let [input_vec, full_vec] = vecs;
        records.push(EmbeddingRecord {
            id,
            input_vec,
            full_vec,
        });
    }
    Ok(records)
}

/// Loads `.jsonl` or packed binary embeddings, chosen by sniffing the magic.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings_bytes(&bytes).map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_embeddings_bytes(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.starts_with(BINARY_MAGIC) {
        Ok(EmbeddingFile {
            records: read_embeddings_binary(bytes)?,
            errors: Vec::new(),
        })
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::InvalidInput("embedding file is not UTF-8".into()))?;
        Ok(parse_embeddings_jsonl(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, input: &[f64], full: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            input_vec: Some(input.to_vec()),
            full_vec: Some(full.to_vec()),
        }
    }

    /// O(M^2) oracle straight from the definition.
    fn brute_mean(vs: &[(&str, Vec<f64>)]) -> BTreeMap<String, f64> {
        vs.iter()
            .enumerate()
            .map(|(i, (id, u))| {
                let s: f64 = vs
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, (_, v))| cosine(u, v).unwrap())
                    .sum();
                (id.to_string(), s / (vs.len() - 1) as f64)
            })
            .collect()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(
            (cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-15
        );
        assert!(cosine(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn mean_similarity_examples() {
        let same: Vec<_> = (0..4)
            .map(|i| rec(&i.to_string(), &[1.0, 2.0], &[1.0, 2.0]))
            .collect();
        let s = mean_similarity(&same, Field::Input, SimilarityMode::Exact).unwrap();
        assert!(s.values().all(|&v| (v - 1.0).abs() < 1e-12));

        let ortho = [
            rec("a", &[1.0, 0.0], &[1.0, 0.0]),
            rec("b", &[0.0, 1.0], &[0.0, 1.0]),
        ];
        let s = mean_similarity(&ortho, Field::Input, SimilarityMode::Exact).unwrap();
        assert_eq!(s["a"], 0.0);
        assert_eq!(s["b"], 0.0);

        // pairwise cosines: a-b = 1/sqrt2, b-c = 1/sqrt2, a-c = 0
        let three = [
            rec("a", &[1.0, 0.0], &[1.0, 0.0]),
            rec("b", &[1.0, 1.0], &[1.0, 1.0]),
            rec("c", &[0.0, 1.0], &[0.0, 1.0]),
        ];
        let s = mean_similarity(&three, Field::Input, SimilarityMode::Exact).unwrap();
        let oracle = brute_mean(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 1.0]),
            ("c", vec![0.0, 1.0]),
        ]);
        for (id, v) in &oracle {
            assert!((s[id] - v).abs() < 1e-12);
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s["a"] - h / 2.0).abs() < 1e-12);
        assert!((s["b"] - h).abs() < 1e-12);

        assert!(matches!(
            mean_similarity(&three[..1], Field::Input, SimilarityMode::Exact),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let recs = [
            rec("a", &[1.0, 0.2], &[1.0, 0.2]),
            rec("b", &[0.3, 1.0], &[0.3, 1.0]),
            rec("c", &[1.0, 1.0], &[1.0, 1.0]),
        ];
        let g = similarity_gap(&recs, SimilarityMode::Exact).unwrap();
        assert!(g.delta_s.values().all(|&d| d == 0.0));

        // prompts all alike, continuations spread out
        let diverse = [
            rec("a", &[1.0, 0.01, 0.0], &[1.0, 0.0, 0.0]),
            rec("b", &[1.0, 0.0, 0.01], &[0.0, 1.0, 0.0]),
            rec("c", &[1.0, 0.01, 0.01], &[0.0, 0.0, 1.0]),
        ];
        let g = similarity_gap(&diverse, SimilarityMode::Exact).unwrap();
        assert!(g.delta_s.values().all(|&d| d < 0.0));

        let mut partial = recs.to_vec();
        partial.push(EmbeddingRecord {
            id: "z".into(),
            input_vec: None,
            full_vec: Some(vec![1.0, 0.0]),
        });
        let g = similarity_gap(&partial, SimilarityMode::Exact).unwrap();
        assert_eq!(g.flagged, vec!["z"]);
        assert_eq!(g.delta_s.len(), 3);
    }

    #[test]
    fn report_correlations() {
        let gap = SimilarityGap {
            s_input: BTreeMap::from([("a".into(), 0.1), ("b".into(), 0.2), ("c".into(), 0.3)]),
            s_full: BTreeMap::from([("a".into(), 0.5), ("b".into(), 0.4), ("c".into(), 0.3)]),
            delta_s: BTreeMap::from([("a".into(), 0.4), ("b".into(), 0.2), ("c".into(), 0.0)]),
            flagged: vec![],
        };
        let n_pre = BTreeMap::from([
            ("a".into(), 1),
            ("b".into(), 4),
            ("c".into(), 9),
            ("d".into(), 2),
        ]);
        let r = memorization_similarity_report(&gap, &n_pre);
        assert_eq!(r.rho_s_input.rho, Some(1.0));
        assert_eq!(r.rho_delta_s.rho, Some(-1.0));
        assert_eq!(r.missing_similarity, vec!["d"]);

        let flat = BTreeMap::from([("a".into(), 3), ("b".into(), 3), ("c".into(), 3)]);
        let r = memorization_similarity_report(&gap, &flat);
        assert!(r.rho_s_input.rho.is_none());
        assert!(r.rho_s_input.flag.is_some());
    }

    #[test]
    fn binary_round_trip() {
        let recs = vec![
            rec("x", &[0.5, -1.0, 2.0], &[1.0, 1.0, 1.0]),
            EmbeddingRecord {
                id: "y".into(),
                input_vec: Some(vec![1.0, 0.0, 0.25]),
                full_vec: None,
            },
        ];
        let mut buf = Vec::new();
        write_embeddings_binary(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..8], BINARY_MAGIC);
        assert_eq!(read_embeddings_binary(&buf[..]).unwrap(), recs);
        assert!(read_embeddings_binary(&buf[..20]).is_err());
    }

    #[test]
    fn jsonl_validation() {
        let text = [
            r#"{"id":"a","input_vec":[1,0],"full_vec":[1,1]}"#,
            r#"{"id":"b","input_vec":[1,0,0],"full_vec":[1,1,0]}"#,
            r#"{"id":"c","input_vec":[0,0],"full_vec":[1,1]}"#,
            r#"not json"#,
            r#"{"id":"a","input_vec":[1,0],"full_vec":[1,1]}"#,
        ]
        .join("\n");
        let f = parse_embeddings_jsonl(&text);
        assert_eq!(f.records.len(), 1);
        assert_eq!(
            f.errors.iter().map(|e| e.line).collect::<Vec<_>>(),
            vec![2, 3, 4, 5]
        );
    }

    #[test]
    fn sampled_mode_is_deterministic_and_close() {
        let recs: Vec<_> = (0..60)
            .map(|i| {
                let t = i as f64 * 0.1;
                rec(&format!("{i:03}"), &[t.cos(), t.sin(), 0.3], &[1.0, t, 0.0])
            })
            .collect();
        let mode = SimilarityMode::Sampled {
            others: 400,
            seed: 5,
        };
        let a = mean_similarity(&recs, Field::Input, mode).unwrap();
        assert_eq!(a, mean_similarity(&recs, Field::Input, mode).unwrap());
        let exact = mean_similarity(&recs, Field::Input, SimilarityMode::Exact).unwrap();
        for (id, v) in &exact {
            assert!((a[id] - v).abs() < 0.1);
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_properties(u in prop::collection::vec(-5.0f64..5.0, 1..8), c in 0.01f64..100.0) {
            prop_assume!(norm(&u) > 1e-3);
            let cu: Vec<f64> = u.iter().map(|x| x * c).collect();
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            prop_assert!((cosine(&u, &cu).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn permutation_and_scale_invariance(
            vs in prop::collection::vec((prop::collection::vec(0.1f64..2.0, 3), prop::collection::vec(0.1f64..2.0, 3)), 2..10),
            shift in 0usize..10,
            scale in 0.1f64..10.0,
        ) {
            let recs: Vec<_> = vs.iter().enumerate().map(|(i, (a, b))| rec(&format!("r{i}"), a, b)).collect();
            let mut rotated = recs.clone();
            rotated.rotate_left(shift % recs.len());
            let g1 = similarity_gap(&recs, SimilarityMode::Exact).unwrap();
            let g2 = similarity_gap(&rotated, SimilarityMode::Exact).unwrap();
            prop_assert_eq!(&g1, &g2);

            let scaled: Vec<_> = recs.iter().map(|r| EmbeddingRecord {
                full_vec: r.full_vec.as_ref().map(|v| v.iter().map(|x| x * scale).collect()),
                ..r.clone()
            }).collect();
            let g3 = similarity_gap(&scaled, SimilarityMode::Exact).unwrap();
            for (id, d) in &g1.delta_s {
                prop_assert!((g3.delta_s[id] - d).abs() < 1e-12);
            }
        }
    }
}
