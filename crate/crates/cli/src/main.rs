use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use memskew::decomposition::MiMode;
use memskew::embedding::{self, SimilarityMode};
use memskew::ingest::{self, Format};
use memskew::oracle::{self, NpreModel, SyntheticCorpusConfig, ToyDistribution};
use memskew::pipeline::{self, AnalysisConfig, MetricFile};
use memskew::Error;

#[derive(Parser, Debug)]
#[command(
    name = "memskew",
    version,
    about = "Memorization analysis for generation logs"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat TOML file with analysis settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Default)]
struct SplitFlags {
    /// Character offset of the prefix/suffix cut.
    #[arg(long)]
    cut: Option<usize>,
    #[arg(long)]
    format: Option<Format>,
    /// Move a cut that lands inside a word to the end of that word.
    #[arg(long)]
    snap_word_boundary: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a generation log into prefix, reference suffix and continuation tokens.
    Split {
        input: PathBuf,
        #[command(flatten)]
        split: SplitFlags,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute per-pair metrics and write a metric file.
    Score {
        input: PathBuf,
        #[command(flatten)]
        split: SplitFlags,
        #[arg(long)]
        max_pos: Option<usize>,
        /// Metric file path (default: <output-dir>/metrics.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a CSV table next to the metric file.
        #[arg(long)]
        csv: bool,
        /// Run metadata file; replaces a header line in the input.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Summarise the prefix-match-length distribution of a metric file.
    Distribution {
        metrics: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
        /// Bootstrap replicates.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        /// Bootstrapped statistics: max, mean, quantile:Q, topk-mean:K.
        #[arg(long, value_delimiter = ',')]
        statistics: Option<Vec<String>>,
    },
    /// Hazard profile, model fits and mutual information between positions.
    Decompose {
        metrics: PathBuf,
        #[arg(long)]
        mi_mode: Option<MiMode>,
        #[arg(long)]
        max_pos: Option<usize>,
        #[arg(long)]
        min_at_risk: Option<u64>,
    },
    /// Embedding similarity gap, optionally correlated with a metric file.
    Embed {
        embeddings: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Average over this many random partners instead of all records.
        #[arg(long)]
        sampled: Option<usize>,
        /// Convert the input to the packed binary format at this path and exit.
        #[arg(long)]
        to_binary: Option<PathBuf>,
    },
    /// Signed-rank comparison of two metric files joined on id.
    Compare { a: PathBuf, b: PathBuf },
    /// Draw prefix match lengths or a whole synthetic generation log.
    Simulate {
        #[arg(long, value_enum, default_value_t = ModelKind::Geometric)]
        model: ModelKind,
        #[arg(long, default_value_t = 0.7)]
        p: f64,
        #[arg(long, default_value_t = -0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        p0: f64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        max_len: u32,
        /// Emit a generation log instead of bare lengths.
        #[arg(long)]
        corpus: bool,
        #[arg(long, default_value = "synthetic")]
        run_id: String,
        #[arg(long)]
        epoch: Option<u32>,
        #[arg(long, default_value_t = 400)]
        vocab: usize,
        /// Also write matching synthetic embeddings here (with --corpus).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the classifier theorems on random toy distributions.
    VerifyTheorems {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        /// Also evaluate the classifiers on this toy distribution file.
        #[arg(long)]
        toy: Option<PathBuf>,
        /// Suffix length for --toy (default: everything after the prefix).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Full report over one or more metric files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelKind {
    Geometric,
    Linear,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidParameter(_)) => 1,
        Some(Error::Internal(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn base_config(g: &Global) -> anyhow::Result<AnalysisConfig> {
    let mut cfg = match &g.config {
        Some(p) => AnalysisConfig::load(p)?,
        None => AnalysisConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn apply_split(cfg: &mut AnalysisConfig, s: &SplitFlags) {
    if let Some(c) = s.cut {
        cfg.cut = c;
    }
    if let Some(f) = s.format {
        cfg.format = f;
    }
    cfg.snap_word_boundary |= s.snap_word_boundary;
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(
                fs::File::create(p).map_err(|e| io_err(p, e))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn load_corpus(path: &Path, cfg: &AnalysisConfig) -> anyhow::Result<ingest::Corpus> {
    let corpus = ingest::load_corpus(path, &cfg.load_options())?;
    for e in &corpus.errors {
        log::warn!("{}: line {}: {}", path.display(), e.line, e.message);
    }
    for w in &corpus.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(corpus)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    let mut cfg = base_config(&cli.global)?;
    match cli.command {
        Command::Split { input, split, out } => {
            apply_split(&mut cfg, &split);
            cfg.validate()?;
            let corpus = load_corpus(&input, &cfg)?;
            let mut w = open_out(out.as_deref())?;
            for pair in &corpus.pairs {
                serde_json::to_writer(&mut w, pair)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            if !corpus.errors.is_empty() {
                log::warn!("{} record errors", corpus.errors.len());
            }
        }
        Command::Score {
            input,
            split,
            max_pos,
            out,
            csv,
            manifest,
        } => {
            apply_split(&mut cfg, &split);
            if let Some(m) = max_pos {
                cfg.max_pos = m;
            }
            cfg.validate()?;
            let mut corpus = load_corpus(&input, &cfg)?;
            if let Some(m) = manifest {
                if corpus.run.is_some() {
                    log::warn!(
                        "{} overrides the run header in {}",
                        m.display(),
                        input.display()
                    );
                }
                corpus.run = Some(memskew::ingest::load_manifest(&m)?);
            }
            let scored = pipeline::cmd_score(&corpus, &cfg)?;
            let path = out.unwrap_or_else(|| cfg.output_dir.join("metrics.jsonl"));
            let mut w = open_out(Some(&path))?;
            pipeline::write_score_jsonl(&scored, &mut w)?;
            drop(w);
            if csv {
                let csv_path = path.with_extension("csv");
                pipeline::write_score_csv(&scored, open_out(Some(&csv_path))?)?;
            }
            let f = &scored.footer;
            println!(
                "{}: {} records, {} scored, {} empty suffix, {} errors, {} parse errors, {} chain violations",
                path.display(),
                f.records,
                f.scored,
                f.empty_suffix,
                f.record_errors,
                f.parse_errors.len(),
                f.chain_violation_total
            );
        }
        Command::Distribution {
            metrics,
            ks,
            quantiles,
            bootstrap,
            level,
            statistics,
        } => {
            if let Some(v) = ks {
                cfg.ks = v;
            }
            if let Some(v) = quantiles {
                cfg.quantiles = v;
            }
            if let Some(v) = bootstrap {
                cfg.bootstrap_b = v;
            }
            if let Some(v) = level {
                cfg.level = v;
            }
            if let Some(v) = statistics {
                cfg.bootstrap_statistics = v;
            }
            cfg.validate()?;
            let file = pipeline::read_metric_file(&metrics)?;
            let run = file.header.run.clone().unwrap_or_default();
            let analysis = pipeline::analyze_distribution(&file.n_pre_values(), run, &cfg)?;
            let mut wtr = String::from("n,F,count\n");
            for (n, f) in &analysis.summary.ecdf {
                wtr.push_str(&format!("{n},{f},{}\n", analysis.summary.counts[n]));
            }
            write_file(
                &cfg.output_dir.join("distribution.json"),
                &to_json(&analysis)?,
            )?;
            write_file(&cfg.output_dir.join("ecdf.csv"), wtr.as_bytes())?;
            let sm = &analysis.summary;
            println!(
                "count {} max {} mean {:.4} quantiles {:?}",
                sm.count, sm.max, sm.mean, sm.quantiles
            );
            for b in &analysis.bootstrap {
                println!(
                    "{}: {} [{}, {}] at {}",
                    b.statistic, b.estimate, b.lower, b.upper, b.level
                );
            }
        }
        Command::Decompose {
            metrics,
            mi_mode,
            max_pos,
            min_at_risk,
        } => {
            if let Some(v) = mi_mode {
                cfg.mi_mode = v;
            }
            if let Some(v) = max_pos {
                cfg.max_pos = v;
            }
            if let Some(v) = min_at_risk {
                cfg.min_at_risk = v;
            }
            cfg.validate()?;
            let file = pipeline::read_metric_file(&metrics)?;
            let matrix = file.correctness_matrix(cfg.max_pos)?;
            let analysis = pipeline::analyze_decomposition(&file.n_pre_values(), &matrix, &cfg)?;
            let mut hazard = String::from("j,p_hat,at_risk\n");
            for r in &analysis.rows {
                hazard.push_str(&format!("{},{},{}\n", r.j, r.p_hat, r.at_risk));
            }
            let mut mi = String::from("source,target,bits,rows\n");
            for e in analysis.mi_profile.iter().flat_map(|p| &p.entries) {
                mi.push_str(&format!(
                    "{},{},{},{}\n",
                    e.source, e.target, e.bits, e.rows
                ));
            }
            write_file(
                &cfg.output_dir.join("decomposition.json"),
                &to_json(&analysis)?,
            )?;
            write_file(&cfg.output_dir.join("hazard.csv"), hazard.as_bytes())?;
            write_file(&cfg.output_dir.join("mi.csv"), mi.as_bytes())?;
            println!(
                "geometric p {:?}, linear fit {:?}, MI cells {} (max {:?} bits)",
                analysis.hazard.geometric_p,
                analysis.linear_fit,
                analysis.mi.cells,
                analysis.mi.max_bits
            );
        }
        Command::Embed {
            embeddings,
            metrics,
            sampled,
            to_binary,
        } => {
            let file = embedding::load_embeddings(&embeddings)?;
            for e in &file.errors {
                log::warn!("{}: line {}: {}", embeddings.display(), e.line, e.message);
            }
            if let Some(bin) = to_binary {
                let mut w = open_out(Some(&bin))?;
                embedding::write_embeddings_binary(&mut w, &file.records)?;
                w.flush()?;
                return Ok(());
            }
            let mode = match sampled {
                Some(others) => SimilarityMode::Sampled {
                    others,
                    seed: cfg.seed,
                },
                None => SimilarityMode::Exact,
            };
            let gap = embedding::similarity_gap(&file.records, mode)?;
            let n_pre = match metrics {
                Some(m) => pipeline::read_metric_file(&m)?.n_pre_by_id(),
                None => Default::default(),
            };
            let report = embedding::memorization_similarity_report(&gap, &n_pre);
            let mut csv = String::from("id,s_input,s_full,delta_s,n_pre\n");
            for (id, d) in &gap.delta_s {
                csv.push_str(&format!(
                    "{id},{},{},{d},{}\n",
                    gap.s_input[id],
                    gap.s_full[id],
                    n_pre.get(id).map(|v| v.to_string()).unwrap_or_default()
                ));
            }
            write_file(&cfg.output_dir.join("similarity.json"), &to_json(&report)?)?;
            write_file(&cfg.output_dir.join("delta_s.csv"), csv.as_bytes())?;
            println!(
                "{} records; rho(delta_s, n_pre) = {:?}",
                gap.delta_s.len(),
                report.rho_delta_s.rho
            );
        }
        Command::Compare { a, b } => {
            let (fa, fb) = (
                pipeline::read_metric_file(&a)?,
                pipeline::read_metric_file(&b)?,
            );
            let cmp = pipeline::compare_runs(&fa, &fb)?;
            let bytes = to_json(&cmp)?;
            write_file(&cfg.output_dir.join("comparison.json"), &bytes)?;
            io::stdout().write_all(&bytes)?;
        }
        Command::Simulate {
            model,
            p,
            alpha,
            p0,
            count,
            max_len,
            corpus,
            run_id,
            epoch,
            vocab,
            embeddings,
            out,
        } => {
            let model = match model {
                ModelKind::Geometric => NpreModel::Geometric { p },
                ModelKind::Linear => NpreModel::Linear { alpha, p0 },
            };
            let mut w = open_out(out.as_deref())?;
            if corpus {
                let sc = SyntheticCorpusConfig {
                    records: count,
                    vocab,
                    suffix_words: max_len as usize,
                    cut: cfg.cut,
                    model,
                    seed: cfg.seed,
                };
                let records = oracle::synthetic_corpus(&sc)?;
                let header = ingest::RunMetadata {
                    run_id,
                    checkpoint_label: epoch.map(|e| format!("epoch-{e}")).unwrap_or_default(),
                    epoch,
                    mean_loss: None,
                };
                serde_json::to_writer(&mut w, &header)?;
                w.write_all(b"\n")?;
                for r in &records {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                if let Some(path) = embeddings {
                    let opts = cfg.load_options();
                    let items: Vec<(String, u32)> = records
                        .iter()
                        .map(|r| {
                            let pair = opts.make_pair(r);
                            let n = memskew::textmetrics::prefix_match_length(
                                &pair.generated_tokens,
                                &pair.reference_tokens,
                            );
                            (r.id.clone(), n as u32)
                        })
                        .collect();
                    let emb = oracle::synthetic_embeddings(&items, 8, cfg.seed)?;
                    let mut ew = open_out(Some(&path))?;
                    for e in &emb {
                        serde_json::to_writer(&mut ew, e)?;
                        ew.write_all(b"\n")?;
                    }
                    ew.flush()?;
                }
            } else {
                for v in oracle::simulate_npre(model, count, max_len, cfg.seed)? {
                    writeln!(w, "{v}")?;
                }
            }
            w.flush()?;
        }
        Command::VerifyTheorems {
            instances,
            pairs,
            toy,
            n,
        } => {
            let report = oracle::verify_theorems(instances, pairs, cfg.seed)?;
            let mut doc = serde_json::json!({ "random": report });
            if let Some(path) = toy {
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let dist = ToyDistribution::parse(&text)?;
                let n = n.unwrap_or(dist.seq_len() - dist.prefix_len());
                doc["toy"] = serde_json::json!({
                    "bayes_optimal": oracle::bayes_optimal(&dist, n)?,
                    "termwise": oracle::termwise_boc(&dist, n)?,
                    "gap": oracle::boc_vs_termwise_gap(&dist, n)?,
                });
            }
            io::stdout().write_all(&to_json(&doc)?)?;
            if !report.passed() {
                bail!(Error::Internal("theorem checks failed".into()));
            }
        }
        Command::Report {
            metrics,
            embeddings,
        } => {
            let files: Vec<MetricFile> = metrics
                .iter()
                .map(pipeline::read_metric_file)
                .collect::<Result<_, _>>()?;
            let emb = match &embeddings {
                Some(p) => {
                    let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
                    let parsed = embedding::parse_embeddings_bytes(&bytes)?;
                    Some((p.clone(), bytes, parsed.records))
                }
                None => None,
            };
            let report = pipeline::cmd_report(
                &files,
                emb.as_ref()
                    .map(|(p, b, r)| (p.as_path(), b.as_slice(), r.as_slice())),
                &cfg,
            )?;
            let written = pipeline::write_report(&report, &cfg.output_dir)?;
            for p in written {
                println!("{}", p.display());
            }
            if report.chain_violation_total > 0 {
                log::warn!(
                    "{} metric chain violations across runs",
                    report.chain_violation_total
                );
            }
        }
    }
    Ok(())
}
