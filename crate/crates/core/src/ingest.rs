//! Generation-log parsing and the prefix/suffix split.
//!
//! Records are cut at a character offset (100 by default). The characters
//! before the cut are the prompt, the rest is the reference suffix. Both the
//! suffix and the model continuation are split into word tokens on Unicode
//! whitespace.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_CUT: usize = 100;

/// One line of a generation log before splitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

/// A training record split into prompt, reference suffix and continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub id: String,
    pub prefix_tokens: Vec<String>,
    pub reference_tokens: Vec<String>,
    pub generated_tokens: Vec<String>,
    /// The reference was no longer than the cut, so there is nothing to recall.
    /// Such pairs keep their slot in the corpus but are left out of statistics.
    pub empty_suffix: bool,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        prefix_tokens: Vec<String>,
        reference_tokens: Vec<String>,
        generated_tokens: Vec<String>,
    ) -> Self {
        let empty_suffix = reference_tokens.is_empty();
        SamplePair {
            id: id.into(),
            prefix_tokens,
            reference_tokens,
            generated_tokens,
            empty_suffix,
        }
    }

    /// Builds a pair from whitespace-separated strings; handy for tests and fixtures.
    pub fn from_words(id: &str, reference: &str, generated: &str) -> Self {
        SamplePair::new(
            id,
            Vec::new(),
            tokenize_words(reference),
            tokenize_words(generated),
        )
    }
}

/// Run-level metadata used to line up checkpoints and datasets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    #[serde(default, rename = "checkpoint")]
    pub checkpoint_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u32>,
    #[serde(default, rename = "loss", skip_serializing_if = "Option::is_none")]
    pub mean_loss: Option<f64>,
}

impl RunMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::InvalidInput("run_id must be non-empty".into()));
        }
        if let Some(loss) = self.mean_loss {
            if !(loss >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "loss must be >= 0, got {loss}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidParameter(format!("unknown format '{other}'"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Format::Jsonl => f.write_str("jsonl"),
            Format::Csv => f.write_str("csv"),
        }
    }
}

/// Splits `text` after `cut` characters (not bytes).
///
/// Texts shorter than the cut come back whole with an empty suffix.
pub fn split_prefix(text: &str, cut: usize) -> (&str, &str) {
    match text.char_indices().nth(cut) {
        Some((byte, _)) => text.split_at(byte),
        None => (text, ""),
    }
}

/// Like [`split_prefix`], but a cut that lands inside a word is moved forward
/// to the end of that word, so the suffix starts on a word boundary.
pub fn split_prefix_snapped(text: &str, cut: usize) -> (&str, &str) {
    let (prefix, suffix) = split_prefix(text, cut);
    let mid_word = matches!(prefix.chars().last(), Some(c) if !c.is_whitespace())
        && matches!(suffix.chars().next(), Some(c) if !c.is_whitespace());
    if !mid_word {
        return (prefix, suffix);
    }
    let extra = suffix
        .char_indices()
        .find(|(_, c)| c.is_whitespace())
        .map(|(i, _)| i)
        .unwrap_or(suffix.len());
    text.split_at(prefix.len() + extra)
}

/// Maximal runs of non-whitespace characters, in order.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: Format,
    pub cut: usize,
    pub snap_word_boundary: bool,
    /// Treat a missing `generated` field as a record error.
    pub require_generated: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: Format::Jsonl,
            cut: DEFAULT_CUT,
            snap_word_boundary: false,
            require_generated: true,
        }
    }
}

impl LoadOptions {
    pub fn split<'a>(&self, text: &'a str) -> (&'a str, &'a str) {
        if self.snap_word_boundary {
            split_prefix_snapped(text, self.cut)
        } else {
            split_prefix(text, self.cut)
        }
    }

    pub fn make_pair(&self, raw: &RawRecord) -> SamplePair {
        let (prefix, suffix) = self.split(&raw.reference);
        SamplePair::new(
            raw.id.clone(),
            tokenize_words(prefix),
            tokenize_words(suffix),
            raw.generated
                .as_deref()
                .map(tokenize_words)
                .unwrap_or_default(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub run: Option<RunMetadata>,
    pub records: Vec<RawRecord>,
    pub pairs: Vec<SamplePair>,
    pub errors: Vec<RecordError>,
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn scorable(&self) -> impl Iterator<Item = &SamplePair> {
        self.pairs.iter().filter(|p| !p.empty_suffix)
    }
}

enum Line {
    Blank,
    Header(RunMetadata),
    Record(RawRecord),
}

fn field_str(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> std::result::Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) if key == "id" => Ok(Some(n.to_string())),
        Some(other) => Err(format!("field '{key}' must be a string, got {other}")),
    }
}

fn parse_json_line(line: &str, require_generated: bool) -> std::result::Result<Line, String> {
    if line.trim().is_empty() {
        return Ok(Line::Blank);
    }
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    if !obj.contains_key("id") && obj.contains_key("run_id") {
        let meta: RunMetadata = serde_json::from_value(value.clone())
            .map_err(|e| format!("malformed run header: {e}"))?;
        meta.validate().map_err(|e| e.to_string())?;
        return Ok(Line::Header(meta));
    }
    let id = field_str(obj, "id")?.ok_or("missing required field 'id'")?;
    let reference = field_str(obj, "reference")?.ok_or("missing required field 'reference'")?;
    let generated = field_str(obj, "generated")?;
    build_record(id, reference, generated, require_generated).map(Line::Record)
}

fn build_record(
    id: String,
    reference: String,
    generated: Option<String>,
    require_generated: bool,
) -> std::result::Result<RawRecord, String> {
    if id.is_empty() {
        return Err("field 'id' is empty".into());
    }
    if reference.is_empty() {
        return Err("field 'reference' is empty".into());
    }
    if require_generated && generated.is_none() {
        return Err("missing required field 'generated'".into());
    }
    Ok(RawRecord {
        id,
        reference,
        generated,
    })
}

/// Parses a corpus already held in memory.
pub fn parse_corpus(text: &str, opts: &LoadOptions) -> Result<Corpus> {
    let parsed: Vec<(usize, std::result::Result<Line, String>)> = match opts.format {
        Format::Jsonl => text
            .lines()
            .enumerate()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(i, line)| (i + 1, parse_json_line(line, opts.require_generated)))
            .collect(),
        Format::Csv => parse_csv(text, opts.require_generated)?,
    };

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (line, item) in parsed {
        match item {
            Ok(Line::Blank) => {}
            Ok(Line::Header(meta)) => {
                if corpus.run.is_some() {
                    corpus.errors.push(RecordError {
                        line,
                        message: "duplicate run header".into(),
                    });
                } else {
                    corpus.run = Some(meta);
                }
            }
            Ok(Line::Record(rec)) => {
                if !seen.insert(rec.id.clone()) {
                    corpus.errors.push(RecordError {
                        line,
                        message: format!("duplicate id '{}'", rec.id),
                    });
                    continue;
                }
                corpus.records.push(rec);
            }
            Err(message) => corpus.errors.push(RecordError { line, message }),
        }
    }

    corpus.pairs = corpus
        .records
        .par_iter()
        .map(|r| opts.make_pair(r))
        .collect();
    let short = corpus.pairs.iter().filter(|p| p.empty_suffix).count();
    if corpus.records.is_empty() && corpus.errors.is_empty() {
        corpus.warnings.push("corpus is empty".into());
    }
    if short > 0 {
        corpus.warnings.push(format!(
            "{short} record(s) have no text beyond the {}-character cut and are excluded from statistics",
            opts.cut
        ));
    }
    Ok(corpus)
}

fn parse_csv(
    text: &str,
    require_generated: bool,
) -> Result<Vec<(usize, std::result::Result<Line, String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidInput(format!("unreadable CSV header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, ref_col, gen_col) = (col("id"), col("reference"), col("generated"));

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = row
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line() as usize))
            .unwrap_or(i + 2);
        let item = match row {
            Err(e) => Err(format!("malformed record: {e}")),
            Ok(row) => {
                let get = |c: Option<usize>| c.and_then(|c| row.get(c)).map(str::to_owned);
                match (get(id_col), get(ref_col)) {
                    (None, _) => Err("missing required field 'id'".into()),
                    (_, None) => Err("missing required field 'reference'".into()),
                    (Some(id), Some(reference)) => {
                        let generated =
                            get(gen_col).filter(|g| !(g.is_empty() && !require_generated));
                        build_record(id, reference, generated, require_generated).map(Line::Record)
                    }
                }
            }
        };
        out.push((line, item));
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, opts)
}

/// Reads a standalone run manifest: one JSON object with `run_id`,
/// `checkpoint`, `epoch` and `loss`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunMetadata> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: RunMetadata = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })?;
    meta.validate()?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_prefix("abcdef", 3), ("abc", "def"));
        assert_eq!(split_prefix("ab", 100), ("ab", ""));
        assert_eq!(split_prefix("ab", 2), ("ab", ""));
        assert_eq!(split_prefix("", 0), ("", ""));
        let text: String = "x".repeat(150);
        let (p, s) = split_prefix(&text, 100);
        assert_eq!((p.chars().count(), s.chars().count()), (100, 50));
    }

    #[test]
    fn split_counts_characters_not_bytes() {
        let (p, s) = split_prefix("héllo wörld", 7);
        assert_eq!(p, "héllo w");
        assert_eq!(s, "örld");
    }

    #[test]
    fn snapped_split_moves_to_word_end() {
        assert_eq!(
            split_prefix_snapped("hello world foo", 8),
            ("hello world", " foo")
        );
        // already on a boundary
        assert_eq!(split_prefix_snapped("hello world", 5), ("hello", " world"));
        assert_eq!(split_prefix_snapped("hello world", 6), ("hello ", "world"));
        assert_eq!(split_prefix_snapped("helloworld", 3), ("helloworld", ""));
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_words("a b  c"), vec!["a", "b", "c"]);
        assert!(tokenize_words("").is_empty());
        assert_eq!(tokenize_words(" x "), vec!["x"]);
        assert_eq!(tokenize_words("a\u{00A0}b\tc\nd"), vec!["a", "b", "c", "d"]);
    }

    fn jsonl(lines: &[&str]) -> String {
        lines.join("\n")
    }

    #[test]
    fn load_well_formed() {
        let text = jsonl(&[
            r#"{"id":"1","reference":"aaaa bbb","generated":"bbb"}"#,
            r#"{"id":"2","reference":"cccc ddd","generated":"ddd"}"#,
            r#"{"id":"3","reference":"eeee fff","generated":"fff"}"#,
        ]);
        let opts = LoadOptions {
            cut: 5,
            ..Default::default()
        };
        let c = parse_corpus(&text, &opts).unwrap();
        assert_eq!(c.pairs.len(), 3);
        assert!(c.errors.is_empty());
        assert_eq!(c.pairs[0].reference_tokens, vec!["bbb"]);
        assert_eq!(c.pairs[0].prefix_tokens, vec!["aaaa"]);
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let text = jsonl(&[
            r#"{"id":"1","reference":"aaaa bbb","generated":"bbb"}"#,
            r#"{"id":"2","reference": oops"#,
            r#"{"id":"3","reference":"eeee fff","generated":"fff"}"#,
        ]);
        let c = parse_corpus(&text, &LoadOptions::default()).unwrap();
        assert_eq!(c.pairs.len(), 2);
        assert_eq!(c.errors.len(), 1);
        assert_eq!(c.errors[0].line, 2);
    }

    #[test]
    fn load_missing_field_and_duplicates() {
        let text = jsonl(&[
            r#"{"id":"1","reference":"aaaa"}"#,
            r#"{"id":"2","generated":"x"}"#,
            r#"{"id":"3","reference":"r","generated":"g"}"#,
            r#"{"id":"3","reference":"r","generated":"g"}"#,
        ]);
        let c = parse_corpus(&text, &LoadOptions::default()).unwrap();
        assert_eq!(c.pairs.len(), 1);
        let lines: Vec<usize> = c.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 2, 4]);

        let relaxed = LoadOptions {
            require_generated: false,
            ..Default::default()
        };
        let c = parse_corpus(&text, &relaxed).unwrap();
        assert_eq!(c.pairs.len(), 2);
    }

    #[test]
    fn load_empty_file_warns() {
        let c = parse_corpus("", &LoadOptions::default()).unwrap();
        assert!(c.pairs.is_empty());
        assert!(c.errors.is_empty());
        assert!(c.warnings.iter().any(|w| w.contains("empty")));
    }

    #[test]
    fn header_line_sets_run_metadata() {
        let text = jsonl(&[
            r#"{"run_id":"lavita-e10","checkpoint":"ckpt-760","epoch":10,"loss":1.2}"#,
            r#"{"id":"1","reference":"ab","generated":"x"}"#,
        ]);
        let opts = LoadOptions {
            cut: 1,
            ..Default::default()
        };
        let c = parse_corpus(&text, &opts).unwrap();
        let run = c.run.unwrap();
        assert_eq!(run.run_id, "lavita-e10");
        assert_eq!(run.checkpoint_label, "ckpt-760");
        assert_eq!(run.epoch, Some(10));
        assert_eq!(run.mean_loss, Some(1.2));
        assert_eq!(c.pairs.len(), 1);
    }

    #[test]
    fn short_records_are_flagged_not_dropped() {
        let text = jsonl(&[
            r#"{"id":"a","reference":"short","generated":"x"}"#,
            r#"{"id":"b","reference":"longer text here","generated":"here"}"#,
        ]);
        let opts = LoadOptions {
            cut: 10,
            ..Default::default()
        };
        let c = parse_corpus(&text, &opts).unwrap();
        assert_eq!(c.pairs.len(), 2);
        assert!(c.pairs[0].empty_suffix);
        assert!(!c.pairs[1].empty_suffix);
        assert_eq!(c.scorable().count(), 1);
        assert!(!c.warnings.is_empty());
    }

    #[test]
    fn csv_format() {
        let text = "id,reference,generated\n1,\"hello there world\",\"world\"\n2,\"x\"\n3,\"abc def\",def\n";
        let opts = LoadOptions {
            format: Format::Csv,
            cut: 12,
            ..Default::default()
        };
        let c = parse_corpus(text, &opts).unwrap();
        assert_eq!(c.pairs.len(), 2);
        assert_eq!(c.errors.len(), 1);
        assert_eq!(c.errors[0].line, 3);
        assert_eq!(c.pairs[0].reference_tokens, vec!["world"]);
    }

    #[test]
    fn load_is_deterministic() {
        let text: String = (0..200)
            .map(|i| {
                format!(
                    r#"{{"id":"{i}","reference":"word {i} and more text","generated":"more text"}}"#
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let opts = LoadOptions {
            cut: 8,
            ..Default::default()
        };
        assert_eq!(
            parse_corpus(&text, &opts).unwrap(),
            parse_corpus(&text, &opts).unwrap()
        );
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(text in "\\PC{0,60}", cut in 0usize..80) {
            let (p, s) = split_prefix(&text, cut);
            prop_assert_eq!(format!("{p}{s}"), text.clone());
            prop_assert_eq!(p.chars().count(), cut.min(text.chars().count()));
            let (p, s) = split_prefix_snapped(&text, cut);
            prop_assert_eq!(format!("{p}{s}"), text);
        }

        #[test]
        fn tokenize_join_is_fixed_point(text in "[a-c \\t\\n\u{3000}]{0,40}") {
            let toks = tokenize_words(&text);
            prop_assert!(toks.iter().all(|t| !t.is_empty()));
            prop_assert_eq!(tokenize_words(&toks.join(" ")), toks);
        }
    }
}
