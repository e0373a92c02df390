//! Score and report pipelines.
//!
//! `score` turns a generation log into a metric file: a header line carrying
//! the configuration, one line per input pair and a footer with counts and
//! chain-check tallies. `report` reads one or more metric files and assembles
//! the per-run summaries, cross-run comparisons and plot-ready CSV tables.
//! Every output is a pure function of the inputs and the configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::{
    fit_geometric, fit_linear_hazard, hazard_estimate, linear_hazard, mi_profile,
    survival_from_hazard, CorrectnessMatrix, HazardProfile, LinearFit, MiMode, MiProfile,
    BIT_CONVENTION,
};
use crate::distribution::{
    bootstrap, prob_max_below, prob_missing_topk, summarize, BootstrapResult, DistributionSummary,
    Ecdf, MemorizationSample, Statistic, RNG_ALGORITHM,
};
use crate::embedding::{
    memorization_similarity_report, similarity_gap, EmbeddingRecord, SimilarityMode,
    SimilarityReport,
};
use crate::error::{Error, Result};
use crate::ingest::{Corpus, Format, LoadOptions, RunMetadata};
use crate::stats::{wilcoxon_signed_rank, PairedSample, WilcoxonResult};
use crate::textmetrics::{
    check_chain, metric_bundle, MetricBundle, MetricConfig, CHAIN_CHECKS, REPORTED_ONLY_CHECK,
};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Analysis settings. Read from a flat TOML file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub cut: usize,
    pub rouge_n: Vec<usize>,
    pub d_w_base: f64,
    /// Longest position tracked in correctness strings, hazards and MI.
    pub max_pos: usize,
    pub seed: u64,
    pub bootstrap_b: usize,
    pub output_dir: PathBuf,
    pub format: Format,
    pub snap_word_boundary: bool,
    pub ks: Vec<usize>,
    pub quantiles: Vec<f64>,
    pub level: f64,
    pub bootstrap_statistics: Vec<String>,
    pub mi_mode: MiMode,
    pub min_at_risk: u64,
    pub weighted_linear_fit: bool,
    /// Subsample sizes for the missing-probability table; empty picks a grid.
    pub z_grid: Vec<u64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            cut: crate::ingest::DEFAULT_CUT,
            rouge_n: vec![1, 2],
            d_w_base: 3.0,
            max_pos: 128,
            seed: 0,
            bootstrap_b: 1000,
            output_dir: PathBuf::from("out"),
            format: Format::Jsonl,
            snap_word_boundary: false,
            ks: vec![1, 5, 10, 50],
            quantiles: vec![0.5, 0.9, 0.99],
            level: 0.95,
            bootstrap_statistics: vec!["max".into(), "quantile:0.99".into(), "mean".into()],
            mi_mode: MiMode::Pairwise,
            min_at_risk: 30,
            weighted_linear_fit: true,
            z_grid: Vec::new(),
        }
    }
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AnalysisConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidParameter(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AnalysisConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.rouge_n.contains(&0) {
            return bad("rouge_n entries must be >= 1".into());
        }
        if !(self.d_w_base > 2.0) || !self.d_w_base.is_finite() {
            return bad(format!(
                "d_w_base must be a finite number > 2, got {}",
                self.d_w_base
            ));
        }
        if self.max_pos == 0 {
            return bad("max_pos must be >= 1".into());
        }
        if self.bootstrap_b == 0 {
            return bad("bootstrap_b must be >= 1".into());
        }
        if self.ks.contains(&0) {
            return bad("ks entries must be >= 1".into());
        }
        if self.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("quantiles must lie in [0, 1]".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        for s in &self.bootstrap_statistics {
            s.parse::<Statistic>()?;
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            format: self.format,
            cut: self.cut,
            snap_word_boundary: self.snap_word_boundary,
            require_generated: true,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            rouge_n: self.rouge_n.clone(),
            d_w_base: self.d_w_base,
            truncation: None,
        }
    }

    fn statistics(&self) -> Vec<Statistic> {
        self.bootstrap_statistics
            .iter()
            .map(|s| s.parse().expect("validated"))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// score

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Scored,
    EmptySuffix,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHeader {
    pub kind: String,
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunMetadata>,
    pub config: AnalysisConfig,
    pub bit_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub kind: String,
    pub id: String,
    pub status: RecordStatus,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricBundle>,
    /// `'1'` where the generated token equals the reference token, up to `max_pos`.
    pub correctness: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub chain_violations: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reported_only: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Record fields other than the flattened metrics.
#[derive(Deserialize)]
struct RecordEnvelope {
    kind: String,
    id: String,
    status: RecordStatus,
    #[serde(default)]
    correctness: String,
    #[serde(default)]
    chain_violations: Vec<String>,
    #[serde(default)]
    reported_only: Vec<String>,
    #[serde(default)]
    message: Option<String>,
}

const ENVELOPE_FIELDS: &[&str] = &[
    "kind",
    "id",
    "status",
    "correctness",
    "chain_violations",
    "reported_only",
    "message",
];

impl ScoreRecord {
    /// Inverse of the flattened JSON form. The metric fields are split off and
    /// decoded separately because flattened maps with integer keys do not
    /// survive serde's buffered path.
    pub fn from_json(value: serde_json::Value) -> std::result::Result<Self, serde_json::Error> {
        let serde_json::Value::Object(mut map) = value else {
            return Err(serde::de::Error::custom("record is not a JSON object"));
        };
        let mut envelope = serde_json::Map::new();
        for key in ENVELOPE_FIELDS {
            if let Some(v) = map.remove(*key) {
                envelope.insert(key.to_string(), v);
            }
        }
        let env: RecordEnvelope = serde_json::from_value(serde_json::Value::Object(envelope))?;
        let metrics = if env.status == RecordStatus::Scored {
            Some(serde_json::from_value(serde_json::Value::Object(map))?)
        } else {
            None
        };
        Ok(ScoreRecord {
            kind: env.kind,
            id: env.id,
            status: env.status,
            metrics,
            correctness: env.correctness,
            chain_violations: env.chain_violations,
            reported_only: env.reported_only,
            message: env.message,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFooter {
    pub kind: String,
    pub records: usize,
    pub scored: usize,
    pub empty_suffix: usize,
    pub record_errors: usize,
    pub parse_errors: Vec<LineError>,
    pub chain_violations: BTreeMap<String, u64>,
    pub chain_violation_total: u64,
    /// How often the reported-only relation failed; not counted as a violation.
    pub reported_only: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    pub header: ScoreHeader,
    pub records: Vec<ScoreRecord>,
    pub footer: ScoreFooter,
}

fn empty_tallies(names: &[&str]) -> BTreeMap<String, u64> {
    names.iter().map(|n| (n.to_string(), 0)).collect()
}

/// Scores every pair of a loaded corpus. Pairs are processed in parallel and
/// reassembled in input order.
pub fn cmd_score(corpus: &Corpus, config: &AnalysisConfig) -> Result<ScoreOutput> {
    config.validate()?;
    let metric_cfg = config.metric_config();
    let records: Vec<ScoreRecord> = corpus
        .pairs
        .par_iter()
        .map(|pair| {
            let mut rec = ScoreRecord {
                kind: "record".into(),
                id: pair.id.clone(),
                status: RecordStatus::Scored,
                metrics: None,
                correctness: String::new(),
                chain_violations: Vec::new(),
                reported_only: Vec::new(),
                message: None,
            };
            if pair.empty_suffix {
                rec.status = RecordStatus::EmptySuffix;
                rec.message = Some("reference has no suffix after the cut".into());
                return rec;
            }
            match metric_bundle(pair, &metric_cfg) {
                Ok(bundle) => {
                    let chain = check_chain(&bundle, &metric_cfg);
                    rec.chain_violations = chain.violations.iter().map(|s| s.to_string()).collect();
                    rec.reported_only = chain.reported_only.iter().map(|s| s.to_string()).collect();
                    rec.correctness = pair
                        .generated_tokens
                        .iter()
                        .zip(&pair.reference_tokens)
                        .take(config.max_pos)
                        .map(|(g, r)| if g == r { '1' } else { '0' })
                        .collect();
                    rec.metrics = Some(bundle);
                }
                Err(e) => {
                    rec.status = RecordStatus::Error;
                    rec.message = Some(e.to_string());
                }
            }
            rec
        })
        .collect();

    let mut footer = ScoreFooter {
        kind: "footer".into(),
        records: records.len(),
        scored: 0,
        empty_suffix: 0,
        record_errors: 0,
        parse_errors: corpus
            .errors
            .iter()
            .map(|e| LineError {
                line: e.line,
                message: e.message.clone(),
            })
            .collect(),
        chain_violations: empty_tallies(CHAIN_CHECKS),
        chain_violation_total: 0,
        reported_only: empty_tallies(&[REPORTED_ONLY_CHECK]),
        warnings: corpus.warnings.clone(),
    };
    for rec in &records {
        match rec.status {
            RecordStatus::Scored => footer.scored += 1,
            RecordStatus::EmptySuffix => footer.empty_suffix += 1,
            RecordStatus::Error => footer.record_errors += 1,
        }
        for v in &rec.chain_violations {
            *footer.chain_violations.entry(v.clone()).or_insert(0) += 1;
            footer.chain_violation_total += 1;
        }
        for v in &rec.reported_only {
            *footer.reported_only.entry(v.clone()).or_insert(0) += 1;
        }
    }
    if footer.chain_violation_total > 0 {
        log::warn!("{} metric chain violations", footer.chain_violation_total);
    }

    Ok(ScoreOutput {
        header: ScoreHeader {
            kind: "header".into(),
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            run: corpus.run.clone(),
            config: config.clone(),
            bit_convention: BIT_CONVENTION.into(),
        },
        records,
        footer,
    })
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Internal(format!("serialisation failed: {e}")))
}

pub fn write_score_jsonl<W: Write>(out: &ScoreOutput, mut w: W) -> Result<()> {
    let lines: Vec<String> = out
        .records
        .par_iter()
        .map(json_line)
        .collect::<Result<_>>()?;
    let io = |e| Error::io("<metric output>", e);
    writeln!(w, "{}", json_line(&out.header)?).map_err(io)?;
    for line in lines {
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    writeln!(w, "{}", json_line(&out.footer)?).map_err(io)?;
    w.flush().map_err(io)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat table with one row per record; ROUGE-n columns are suffixed by `n`.
pub fn write_score_csv<W: Write>(out: &ScoreOutput, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Internal(format!("csv output: {e}"));
    let mut header: Vec<String> = [
        "id",
        "status",
        "n_pre",
        "lcs",
        "levenshtein",
        "n_max",
        "inplace_run",
        "d1",
        "d_w",
        "rouge_l",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for n in &out.header.config.rouge_n {
        header.push(format!("rouge_n_precision_{n}"));
        header.push(format!("rouge_n_recall_{n}"));
    }
    header.extend(["n1", "n2", "overlap", "correctness", "chain_violations"].map(String::from));
    wtr.write_record(&header).map_err(csv_err)?;
    for rec in &out.records {
        let status = match rec.status {
            RecordStatus::Scored => "scored",
            RecordStatus::EmptySuffix => "empty_suffix",
            RecordStatus::Error => "error",
        };
        let mut row = vec![rec.id.clone(), status.to_string()];
        match &rec.metrics {
            Some(m) => {
                row.extend(
                    [m.n_pre, m.lcs, m.levenshtein, m.n_max, m.inplace_run, m.d1]
                        .map(|v| v.to_string()),
                );
                row.push(m.d_w.to_string());
                row.push(fmt_opt(m.rouge_l));
                for n in &out.header.config.rouge_n {
                    row.push(fmt_opt(m.rouge_n_precision.get(n).copied().flatten()));
                    row.push(fmt_opt(m.rouge_n_recall.get(n).copied().flatten()));
                }
                row.extend([m.n1, m.n2, m.overlap].map(|v| v.to_string()));
            }
            None => row.resize(header.len() - 2, String::new()),
        }
        row.push(rec.correctness.clone());
        row.push(rec.chain_violations.join(";"));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<metric output>", e))
}

/// A metric file read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFile {
    pub path: PathBuf,
    pub sha256: String,
    pub header: ScoreHeader,
    pub records: Vec<ScoreRecord>,
    pub footer: ScoreFooter,
}

impl MetricFile {
    pub fn run_id(&self) -> String {
        self.header
            .run
            .as_ref()
            .map(|r| r.run_id.clone())
            .unwrap_or_else(|| {
                self.path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
    }

    pub fn scored(&self) -> impl Iterator<Item = (&ScoreRecord, &MetricBundle)> {
        self.records
            .iter()
            .filter(|r| r.status == RecordStatus::Scored)
            .filter_map(|r| r.metrics.as_ref().map(|m| (r, m)))
    }

    pub fn n_pre_values(&self) -> Vec<u32> {
        self.scored().map(|(_, m)| m.n_pre as u32).collect()
    }

    pub fn n_pre_by_id(&self) -> BTreeMap<String, u32> {
        self.scored()
            .map(|(r, m)| (r.id.clone(), m.n_pre as u32))
            .collect()
    }

    pub fn correctness_matrix(&self, width: usize) -> Result<CorrectnessMatrix> {
        let (ids, rows): (Vec<String>, Vec<Vec<bool>>) = self
            .scored()
            .map(|(r, _)| {
                (
                    r.id.clone(),
                    r.correctness.chars().map(|c| c == '1').collect(),
                )
            })
            .unzip();
        CorrectnessMatrix::from_rows(ids, &rows, width)
    }
}

pub fn parse_metric_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<MetricFile> {
    let path = path.as_ref();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header = None;
    let mut footer = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| perr(i + 1, e.to_string()))?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .unwrap_or("")
            .to_owned();
        match kind.as_str() {
            "header" => {
                header =
                    Some(serde_json::from_value(value).map_err(|e| perr(i + 1, e.to_string()))?)
            }
            "record" => {
                records.push(ScoreRecord::from_json(value).map_err(|e| perr(i + 1, e.to_string()))?)
            }
            "footer" => {
                footer =
                    Some(serde_json::from_value(value).map_err(|e| perr(i + 1, e.to_string()))?)
            }
            other => return Err(perr(i + 1, format!("unknown line kind '{other}'"))),
        }
    }
    let header = header.ok_or_else(|| perr(1, "metric file has no header line".into()))?;
    let footer = footer.ok_or_else(|| {
        perr(
            records.len() + 1,
            "metric file has no footer line (truncated?)".into(),
        )
    })?;
    Ok(MetricFile {
        path: path.to_path_buf(),
        sha256: sha256_hex(bytes),
        header,
        records,
        footer,
    })
}

pub fn read_metric_file(path: impl AsRef<Path>) -> Result<MetricFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_metric_file(path, &bytes)
}

// ---------------------------------------------------------------------------
// analyses on one metric file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingProbability {
    pub z: u64,
    pub k: u64,
    pub prob_missing_topk: f64,
    /// Chance a with-replacement subsample of size `z` stays below the observed max.
    pub prob_max_below_observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionAnalysis {
    pub summary: DistributionSummary,
    pub bootstrap: Vec<BootstrapResult>,
    pub missing: Vec<MissingProbability>,
}

fn z_grid(config: &AnalysisConfig, m: u64) -> Vec<u64> {
    let mut grid: BTreeSet<u64> = if config.z_grid.is_empty() {
        let mut g = BTreeSet::new();
        let mut base = 1;
        while base <= m {
            for step in [1, 2, 5] {
                if base * step <= m {
                    g.insert(base * step);
                }
            }
            base *= 10;
        }
        g.insert(m);
        g
    } else {
        config.z_grid.iter().copied().filter(|&z| z <= m).collect()
    };
    grid.remove(&0);
    grid.into_iter().collect()
}

pub fn analyze_distribution(
    values: &[u32],
    run: RunMetadata,
    config: &AnalysisConfig,
) -> Result<DistributionAnalysis> {
    let summary = summarize(
        &MemorizationSample::new(values.to_vec(), run),
        &config.ks,
        &config.quantiles,
    )?;
    let bootstrap = config
        .statistics()
        .into_iter()
        .map(|s| bootstrap(values, s, config.bootstrap_b, config.level, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let m = values.len() as u64;
    let cdf = Ecdf::from_values(values).table();
    let mut missing = Vec::new();
    for z in z_grid(config, m) {
        let below = prob_max_below(&cdf, z.min(u32::MAX as u64) as u32, summary.max as i64)?;
        for &k in &config.ks {
            let k = k as u64;
            if k <= m {
                missing.push(MissingProbability {
                    z,
                    k,
                    prob_missing_topk: prob_missing_topk(m, k, z)?,
                    prob_max_below_observed: below,
                });
            }
        }
    }
    Ok(DistributionAnalysis {
        summary,
        bootstrap,
        missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRow {
    pub j: usize,
    pub p_hat: f64,
    pub at_risk: u64,
    pub survival: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub mode: MiMode,
    pub cells: usize,
    pub omitted: usize,
    pub max_bits: Option<f64>,
    pub mean_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionAnalysis {
    pub hazard: HazardProfile,
    pub linear_fit: Option<LinearFit>,
    pub rows: Vec<HazardRow>,
    pub mi: MiSummary,
    #[serde(skip)]
    pub mi_profile: Option<MiProfile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub fn analyze_decomposition(
    values: &[u32],
    matrix: &CorrectnessMatrix,
    config: &AnalysisConfig,
) -> Result<DecompositionAnalysis> {
    let mut flags = Vec::new();
    let capped: Vec<u32> = values
        .iter()
        .map(|&v| v.min(config.max_pos as u32))
        .collect();
    let mut hazard = hazard_estimate(&capped)?;
    hazard.geometric_p = Some(fit_geometric(&capped)?);
    let linear_fit =
        match fit_linear_hazard(&hazard, config.weighted_linear_fit, config.min_at_risk) {
            Ok(fit) => {
                hazard.linear_alpha = Some(fit.alpha);
                hazard.linear_p0 = Some(fit.p0);
                Some(fit)
            }
            Err(Error::InsufficientData(m)) => {
                flags.push(format!("linear fit skipped: {m}"));
                None
            }
            Err(e) => return Err(e),
        };
    let survival = survival_from_hazard(&hazard);
    let rows = hazard
        .p_hat
        .iter()
        .map(|(&j, &p)| HazardRow {
            j,
            p_hat: p,
            at_risk: hazard.at_risk[&j],
            survival: survival.get(&j).copied().unwrap_or(0.0),
            geometric: hazard.geometric_p,
            linear: linear_fit.map(|f| linear_hazard(f.alpha, f.p0, j)),
        })
        .collect();

    let (mi, mi_profile) = match mi_profile(matrix, config.mi_mode) {
        Ok(p) => {
            let bits: Vec<f64> = p.entries.iter().map(|e| e.bits).collect();
            let summary = MiSummary {
                mode: p.mode,
                cells: p.entries.len(),
                omitted: p.omitted.len(),
                max_bits: bits.iter().copied().reduce(f64::max),
                mean_bits: (!bits.is_empty()).then(|| bits.iter().sum::<f64>() / bits.len() as f64),
            };
            (summary, Some(p))
        }
        Err(Error::InsufficientData(m)) => {
            flags.push(format!("MI skipped: {m}"));
            let empty = MiSummary {
                mode: config.mi_mode,
                cells: 0,
                omitted: 0,
                max_bits: None,
                mean_bits: None,
            };
            (empty, None)
        }
        Err(e) => return Err(e),
    };
    Ok(DecompositionAnalysis {
        hazard,
        linear_fit,
        rows,
        mi,
        mi_profile,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<WilcoxonResult>,
    /// Mean of `n_pre(b) - n_pre(a)` over the shared ids.
    pub mean_shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// Signed-rank comparison of two runs' `n_pre`, paired by id. The id sets must
/// match; otherwise the error lists the ids present in only one run.
pub fn compare_runs(a: &MetricFile, b: &MetricFile) -> Result<Comparison> {
    let (xa, xb) = (a.n_pre_by_id(), b.n_pre_by_id());
    let only_a: Vec<&String> = xa.keys().filter(|k| !xb.contains_key(*k)).collect();
    let only_b: Vec<&String> = xb.keys().filter(|k| !xa.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::InvalidInput(format!(
            "ids differ between runs '{}' and '{}'\n  only in {}: [{}]\n  only in {}: [{}]",
            a.run_id(),
            b.run_id(),
            a.run_id(),
            list(&only_a),
            b.run_id(),
            list(&only_b)
        )));
    }
    let ids: Vec<String> = xa.keys().cloned().collect();
    let x: Vec<f64> = ids.iter().map(|id| xb[id] as f64).collect();
    let y: Vec<f64> = ids.iter().map(|id| xa[id] as f64).collect();
    let n = ids.len();
    let mean_shift = if n == 0 {
        0.0
    } else {
        x.iter().zip(&y).map(|(p, q)| p - q).sum::<f64>() / n as f64
    };
    let paired = PairedSample::new(ids, x, y)?;
    let (test, flag) = match wilcoxon_signed_rank(&paired) {
        Ok(t) => (Some(t), None),
        Err(Error::DegenerateSample(m)) => (None, Some(format!("degenerate: {m}"))),
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        run_a: a.run_id(),
        run_b: b.run_id(),
        n,
        test,
        mean_shift,
        flag,
    })
}

pub fn analyze_embeddings(
    records: &[EmbeddingRecord],
    n_pre: &BTreeMap<String, u32>,
) -> Result<SimilarityReport> {
    let gap = similarity_gap(records, SimilarityMode::Exact)?;
    Ok(memorization_similarity_report(&gap, n_pre))
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub run: Option<RunMetadata>,
    pub input: InputDigest,
    pub records: usize,
    pub scored: usize,
    pub empty_suffix: usize,
    pub record_errors: usize,
    pub chain_violations: BTreeMap<String, u64>,
    pub distribution: DistributionAnalysis,
    pub decomposition: DecompositionAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub config: AnalysisConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub rng: String,
    pub inputs: Vec<InputDigest>,
    pub runs: Vec<RunReport>,
    /// Chain-check violations summed over all runs.
    pub chain_violation_total: u64,
    pub reported_only_total: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<SimilarityReport>,
}

fn display_path(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Builds the combined report. Consecutive runs are compared pairwise; an
/// embedding file, when given, is joined with the first run.
pub fn cmd_report(
    runs: &[MetricFile],
    embeddings: Option<(&Path, &[u8], &[EmbeddingRecord])>,
    config: &AnalysisConfig,
) -> Result<Report> {
    config.validate()?;
    if runs.is_empty() {
        return Err(Error::InvalidInput(
            "report needs at least one metric file".into(),
        ));
    }
    let config_json = serde_json::to_vec(config).map_err(|e| Error::Internal(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut run_reports = Vec::new();
    let mut total = 0;
    let mut reported = 0;
    for file in runs {
        let mut tally = empty_tallies(CHAIN_CHECKS);
        for rec in &file.records {
            for v in &rec.chain_violations {
                *tally.entry(v.clone()).or_insert(0) += 1;
            }
            reported += rec.reported_only.len() as u64;
        }
        if tally != file.footer.chain_violations {
            return Err(Error::InvalidInput(format!(
                "{}: footer violation tallies do not match the records",
                file.path.display()
            )));
        }
        total += tally.values().sum::<u64>();

        let values = file.n_pre_values();
        let run = file.header.run.clone().unwrap_or_else(|| RunMetadata {
            run_id: file.run_id(),
            ..RunMetadata::default()
        });
        let distribution = analyze_distribution(&values, run, config)?;
        let matrix = file.correctness_matrix(config.max_pos)?;
        let decomposition = analyze_decomposition(&values, &matrix, config)?;
        let input = InputDigest {
            path: display_path(&file.path),
            sha256: file.sha256.clone(),
        };
        inputs.push(input.clone());
        run_reports.push(RunReport {
            run_id: file.run_id(),
            run: file.header.run.clone(),
            input,
            records: file.footer.records,
            scored: file.footer.scored,
            empty_suffix: file.footer.empty_suffix,
            record_errors: file.footer.record_errors,
            chain_violations: tally,
            distribution,
            decomposition,
        });
    }
    let comparisons = runs
        .windows(2)
        .map(|w| compare_runs(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let embedding = match embeddings {
        Some((path, bytes, records)) => {
            inputs.push(InputDigest {
                path: display_path(path),
                sha256: sha256_hex(bytes),
            });
            Some(analyze_embeddings(records, &runs[0].n_pre_by_id())?)
        }
        None => None,
    };
    Ok(Report {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        config: config.clone(),
        config_sha256: sha256_hex(&config_json),
        seed: config.seed,
        rng: RNG_ALGORITHM.into(),
        inputs,
        runs: run_reports,
        chain_violation_total: total,
        reported_only_total: reported,
        comparisons,
        embedding,
    })
}

/// Plot-ready tables derived from a report, as `(file name, CSV bytes)`.
pub fn report_tables(report: &Report) -> Result<Vec<(String, Vec<u8>)>> {
    let mut tables = Vec::new();
    let mut table = |name: &str, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Internal(format!("csv output: {e}"));
        wtr.write_record(&header).map_err(err)?;
        for r in rows {
            wtr.write_record(&r).map_err(err)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Internal(e.to_string()))?;
        tables.push((name.to_owned(), bytes));
        Ok(())
    };
    let s = |v: &dyn ToString| v.to_string();

    let qkeys: Vec<String> = report
        .config
        .quantiles
        .iter()
        .map(|q| format!("{q}"))
        .collect();
    let mut header: Vec<String> = [
        "run_id",
        "checkpoint",
        "epoch",
        "loss",
        "count",
        "mean",
        "max",
    ]
    .map(String::from)
    .to_vec();
    header.extend(qkeys.iter().map(|q| format!("q{q}")));
    header.extend(["skewness", "excess_kurtosis", "jarque_bera"].map(String::from));
    let rows = report
        .runs
        .iter()
        .map(|r| {
            let sm = &r.distribution.summary;
            let meta = r.run.clone().unwrap_or_default();
            let mut row = vec![
                r.run_id.clone(),
                meta.checkpoint_label,
                meta.epoch.map(|e| e.to_string()).unwrap_or_default(),
                fmt_opt(meta.mean_loss),
                s(&sm.count),
                s(&sm.mean),
                s(&sm.max),
            ];
            row.extend(qkeys.iter().map(|q| {
                sm.quantiles
                    .get(q)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
            row.extend([sm.skewness, sm.excess_kurtosis, sm.jarque_bera].map(fmt_opt));
            row
        })
        .collect();
    table("distribution_vs_epoch.csv", header, rows)?;

    let rows = report
        .runs
        .iter()
        .flat_map(|r| {
            let sm = &r.distribution.summary;
            sm.ecdf
                .iter()
                .map(|(n, f)| vec![r.run_id.clone(), s(n), s(f), s(&sm.counts[n])])
                .collect::<Vec<_>>()
        })
        .collect();
    table(
        "ecdf.csv",
        ["run_id", "n", "F", "count"].map(String::from).to_vec(),
        rows,
    )?;

    let rows = report
        .runs
        .iter()
        .flat_map(|r| {
            r.distribution.missing.iter().map(|m| {
                vec![
                    r.run_id.clone(),
                    s(&m.z),
                    s(&m.k),
                    s(&m.prob_missing_topk),
                    s(&m.prob_max_below_observed),
                ]
            })
        })
        .collect();
    table(
        "missing_probability.csv",
        [
            "run_id",
            "z",
            "k",
            "prob_missing_topk",
            "prob_max_below_observed",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    )?;

    let rows = report
        .runs
        .iter()
        .flat_map(|r| {
            r.decomposition.rows.iter().map(|h| {
                vec![
                    r.run_id.clone(),
                    s(&h.j),
                    s(&h.p_hat),
                    s(&h.at_risk),
                    s(&h.survival),
                    fmt_opt(h.geometric),
                    fmt_opt(h.linear),
                ]
            })
        })
        .collect();
    table(
        "hazard.csv",
        [
            "run_id",
            "j",
            "p_hat",
            "at_risk",
            "survival",
            "geometric",
            "linear",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    )?;

    let rows = report
        .runs
        .iter()
        .flat_map(|r| {
            r.decomposition
                .mi_profile
                .iter()
                .flat_map(|p| p.entries.iter())
                .map(|e| {
                    vec![
                        r.run_id.clone(),
                        s(&e.source),
                        s(&e.target),
                        s(&e.bits),
                        s(&e.rows),
                    ]
                })
                .collect::<Vec<_>>()
        })
        .collect();
    table(
        "mi.csv",
        ["run_id", "source", "target", "bits", "rows"]
            .map(String::from)
            .to_vec(),
        rows,
    )?;

    if let Some(emb) = &report.embedding {
        let rows = emb
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.id.clone(),
                    s(&r.s_input),
                    s(&r.s_full),
                    s(&r.delta_s),
                    s(&r.n_pre),
                ]
            })
            .collect();
        table(
            "delta_s.csv",
            ["id", "s_input", "s_full", "delta_s", "n_pre"]
                .map(String::from)
                .to_vec(),
            rows,
        )?;
    }
    Ok(tables)
}

pub fn report_json(report: &Report) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `report.json` and the CSV tables into `dir`; returns the paths written.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![("report.json".to_owned(), report_json(report)?)];
    files.extend(report_tables(report)?);
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
