//! `qebc`: one binary for the whole pipeline — prepare a prompt dataset,
//! label it with a completion oracle, train the estimator, sweep thresholds,
//! score prompts, and serve the gate over HTTP.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use qebc_core::corpus::{self, DatasetManifest, Language};
use qebc_core::estimator::{
    baseline_cc, baseline_coc, baseline_rand, load_checkpoint, save_checkpoint, train, Optimizer,
    Preset, Scorer, TcqeScorer, TrainConfig,
};
use qebc_core::eval::{threshold_sweep, DEFAULT_THRESHOLDS};
use qebc_core::gate::{serve, GateService};
use qebc_core::metrics::{build_trivial_set, Metric, TrivialNgramSet};
use qebc_core::oracle::{
    label_dataset, read_labeled, write_labeled, HttpOracle, LabelOutcome, NgramModel, NgramOracle,
    OracleConfig, OracleKind,
};
use qebc_core::tokenizer::{train_bpe, BpeVocab};

/// Errors caused by bad invocations or missing inputs; they exit with
/// status 2, everything else with 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} path does not exist: {}", path.display())))
    }
}

#[derive(Parser)]
#[command(
    name = "qebc",
    version,
    about = "Quality estimation before completion: reject low-return code completion prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a corpus, train a BPE vocab, and split snippets into prompt
    /// pairs.
    Prepare {
        /// Corpus: a directory of files, a .jsonl file with a "code" field,
        /// or a newline-delimited text file.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for pairs.jsonl, manifest.json, and vocab.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "java")]
        language: String,
        #[arg(long, default_value_t = 8192)]
        vocab_size: usize,
    },
    /// Label a prepared dataset with completion-quality scores.
    Label {
        /// Directory produced by `prepare`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Output labels file (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        /// Oracle spec: "ngram:<order>" or "http:<endpoint>".
        #[arg(long, default_value = "ngram:3")]
        oracle: String,
        /// TOML file with a full oracle config; overrides --oracle.
        #[arg(long)]
        oracle_config: Option<PathBuf>,
        #[arg(long, default_value = "bleu")]
        metric: String,
        /// Trivial n-gram count for crystal_bleu.
        #[arg(long, default_value_t = 500)]
        trivial_k: usize,
        /// Where to save the trivial n-gram set, if built.
        #[arg(long)]
        trivial_out: Option<PathBuf>,
        /// Corpus to train the n-gram oracle on; defaults to the dataset's
        /// own snippets.
        #[arg(long)]
        oracle_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_input_tokens: usize,
        #[arg(long, default_value_t = 10)]
        max_new_tokens: usize,
    },
    /// Train the TCQE estimator on a labeled dataset.
    Train {
        #[arg(long)]
        labels: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "toy")]
        preset: String,
        /// Vocab file; sets the model's vocabulary size exactly.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "adam")]
        optimizer: String,
        /// Stop early once the epoch MSE reaches this value.
        #[arg(long)]
        target_loss: Option<f64>,
        /// Also write a checkpoint after every epoch into this directory.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Sweep thresholds for the trained estimator and the rule-based
    /// baselines, printing the accuracy grid.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "java")]
        language: String,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.01,0.05,0.1,0.2,0.5")]
        thresholds: String,
        #[arg(long, default_value_t = 0)]
        rand_seed: u64,
        /// Write <out>.csv and <out>.json next to the printed table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the gate over HTTP.
    Serve {
        /// TOML config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        bind: Option<String>,
        /// Append gate decisions to this JSONL file.
        #[arg(long)]
        decision_log: Option<PathBuf>,
    },
    /// Score prompts with a trained estimator, one score per line.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// A single prompt to score.
        #[arg(long)]
        prompt: Option<String>,
        /// File with one prompt per line.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            corpus,
            out,
            seed,
            language,
            vocab_size,
        } => cmd_prepare(&corpus, &out, seed, &language, vocab_size),
        Command::Label {
            dataset,
            vocab,
            out,
            oracle,
            oracle_config,
            metric,
            trivial_k,
            trivial_out,
            oracle_corpus,
            max_input_tokens,
            max_new_tokens,
        } => cmd_label(LabelArgs {
            dataset,
            vocab,
            out,
            oracle,
            oracle_config,
            metric,
            trivial_k,
            trivial_out,
            oracle_corpus,
            max_input_tokens,
            max_new_tokens,
        }),
        Command::Train {
            labels,
            out,
            preset,
            vocab,
            epochs,
            learning_rate,
            batch_size,
            seed,
            optimizer,
            target_loss,
            checkpoint_dir,
        } => cmd_train(TrainArgs {
            labels,
            out,
            preset,
            vocab,
            epochs,
            learning_rate,
            batch_size,
            seed,
            optimizer,
            target_loss,
            checkpoint_dir,
        }),
        Command::Eval {
            labels,
            vocab,
            checkpoint,
            language,
            thresholds,
            rand_seed,
            out,
        } => cmd_eval(&labels, &vocab, &checkpoint, &language, &thresholds, rand_seed, out.as_deref()),
        Command::Serve {
            config,
            checkpoint,
            vocab,
            threshold,
            bind,
            decision_log,
        } => cmd_serve(config, checkpoint, vocab, threshold, bind, decision_log),
        Command::Score {
            checkpoint,
            vocab,
            prompt,
            prompt_file,
        } => cmd_score(&checkpoint, &vocab, prompt, prompt_file),
    }
}

fn load_vocab(path: &Path) -> Result<BpeVocab> {
    require_exists(path, "vocab")?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading vocab {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing vocab {}", path.display()))
}

fn cmd_prepare(corpus: &Path, out: &Path, seed: u64, language: &str, vocab_size: usize) -> Result<()> {
    require_exists(corpus, "corpus")?;
    let language: Language = language.parse().expect("infallible");
    let (snippets, stats) = corpus::ingest(corpus, &language).map_err(map_corpus_err)?;
    let texts: Vec<&str> = snippets.iter().map(|s| s.text.as_str()).collect();
    let vocab = train_bpe(&texts, vocab_size)?;
    let (pairs, skipped) = corpus::split_corpus(&snippets, &vocab, seed);

    let manifest = DatasetManifest::for_pairs(seed, language, &pairs);
    corpus::persist(&pairs, &manifest, out)?;
    std::fs::write(
        out.join("vocab.json"),
        serde_json::to_string(&vocab).expect("vocab serializes"),
    )
    .with_context(|| format!("writing vocab into {}", out.display()))?;

    println!(
        "ingested {} snippets ({} empty dropped, {} invalid UTF-8 bytes replaced)",
        stats.snippets, stats.dropped_empty, stats.utf8_replacements
    );
    println!(
        "vocab: {} tokens ({} merges)",
        vocab.len(),
        vocab.merges().len()
    );
    println!(
        "pairs: {} written ({} with empty ground truth, {} snippets too short to split)",
        manifest.counts.pairs,
        manifest.counts.empty_ground_truth_pairs,
        skipped.len()
    );
    println!("dataset written to {}", out.display());
    Ok(())
}

struct LabelArgs {
    dataset: PathBuf,
    vocab: PathBuf,
    out: PathBuf,
    oracle: String,
    oracle_config: Option<PathBuf>,
    metric: String,
    trivial_k: usize,
    trivial_out: Option<PathBuf>,
    oracle_corpus: Option<PathBuf>,
    max_input_tokens: usize,
    max_new_tokens: usize,
}

fn parse_oracle_spec(spec: &str, max_input_tokens: usize, max_new_tokens: usize) -> Result<OracleConfig> {
    let kind = if let Some(order) = spec.strip_prefix("ngram:") {
        OracleKind::NgramReference {
            order: order
                .parse()
                .map_err(|_| usage(format!("bad n-gram order in {spec:?}")))?,
        }
    } else if let Some(endpoint) = spec.strip_prefix("http:") {
        let endpoint = if endpoint.starts_with("//") {
            format!("http:{endpoint}")
        } else {
            endpoint.to_string()
        };
        OracleKind::ExternalHttp {
            endpoint,
            auth_env: Some("QEBC_ORACLE_TOKEN".to_string()),
            timeout_ms: 10_000,
            max_retries: 3,
            max_in_flight: 8,
        }
    } else {
        return Err(usage(format!(
            "oracle spec {spec:?} is neither ngram:<order> nor http:<endpoint>"
        )));
    };
    Ok(OracleConfig {
        kind,
        max_input_tokens,
        max_new_tokens,
    })
}

fn cmd_label(args: LabelArgs) -> Result<()> {
    require_exists(&args.dataset, "dataset")?;
    let vocab = load_vocab(&args.vocab)?;
    let (pairs, manifest) = corpus::load(&args.dataset).map_err(map_corpus_err)?;
    let metric: Metric = args
        .metric
        .parse()
        .map_err(|e| usage(format!("{e}")))?;

    let config = match &args.oracle_config {
        Some(path) => {
            require_exists(path, "oracle config")?;
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => parse_oracle_spec(&args.oracle, args.max_input_tokens, args.max_new_tokens)?,
    };

    // Snippet texts for the n-gram oracle and the trivial n-gram set:
    // prompt ++ ground_truth reconstructs each snippet exactly.
    let snippet_tokens: Vec<Vec<u32>> = match &args.oracle_corpus {
        Some(path) => {
            require_exists(path, "oracle corpus")?;
            let (snippets, _) = corpus::ingest(path, &manifest.language).map_err(map_corpus_err)?;
            snippets.iter().map(|s| vocab.encode(&s.text)).collect()
        }
        None => pairs
            .iter()
            .map(|p| {
                let mut toks = vocab.encode(&p.prompt);
                toks.extend(vocab.encode(&p.ground_truth));
                toks
            })
            .collect(),
    };

    let trivial: Option<TrivialNgramSet> = if metric == Metric::CrystalBleu {
        let set = build_trivial_set(&snippet_tokens, args.trivial_k);
        if let Some(path) = &args.trivial_out {
            std::fs::write(path, serde_json::to_string(&set).expect("set serializes"))
                .with_context(|| format!("writing trivial set {}", path.display()))?;
        }
        Some(set)
    } else {
        None
    };

    let outcome: LabelOutcome = match &config.kind {
        OracleKind::NgramReference { order } => {
            let model = NgramModel::train(&snippet_tokens, *order)?;
            let oracle = NgramOracle::new(model, &config)?;
            label_dataset(&pairs, &oracle, &vocab, metric, trivial.as_ref())?
        }
        OracleKind::ExternalHttp { .. } => {
            let oracle = HttpOracle::new(&config, vocab.clone())?;
            label_dataset(&pairs, &oracle, &vocab, metric, trivial.as_ref())?
        }
    };

    write_labeled(&args.out, &outcome.examples)?;
    let nulls = outcome
        .examples
        .iter()
        .filter(|e| e.was_null_ground_truth)
        .count();
    println!(
        "labeled {} examples with {} ({} null ground truth, {} oracle calls)",
        outcome.examples.len(),
        metric.as_str(),
        nulls,
        outcome.oracle_calls
    );
    if !outcome.skipped.is_empty() {
        println!("skipped {} pairs:", outcome.skipped.len());
        for (index, reason) in outcome.skipped.iter().take(10) {
            println!("  pair {index}: {reason}");
        }
        if outcome.skipped.len() > 10 {
            println!("  ... and {} more", outcome.skipped.len() - 10);
        }
    }
    println!("labels written to {}", args.out.display());
    Ok(())
}

struct TrainArgs {
    labels: PathBuf,
    out: PathBuf,
    preset: String,
    vocab: Option<PathBuf>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    optimizer: String,
    target_loss: Option<f64>,
    checkpoint_dir: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    require_exists(&args.labels, "labels")?;
    let examples = read_labeled(&args.labels)?;
    let preset: Preset = args.preset.parse().map_err(|e| usage(format!("{e}")))?;
    let mut config = preset.config();
    if let Some(vocab_path) = &args.vocab {
        config.vocab_size = load_vocab(vocab_path)?.len();
    }
    let max_id = examples
        .iter()
        .flat_map(|e| e.prompt_tokens.iter())
        .max()
        .copied()
        .unwrap_or(0);
    if max_id as usize >= config.vocab_size {
        return Err(usage(format!(
            "labels contain token id {max_id} but the model vocab is {}; pass --vocab",
            config.vocab_size
        )));
    }

    let optimizer = match args.optimizer.as_str() {
        "adam" => Optimizer::default(),
        "sgd" => Optimizer::Sgd,
        other => return Err(usage(format!("unknown optimizer {other:?}"))),
    };
    let train_config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        seed: args.seed,
        optimizer,
        target_loss: args.target_loss,
    };
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
    }

    println!(
        "training {} ({} params) on {} examples",
        args.preset,
        config.count_params(),
        examples.len()
    );
    let output = train(&examples, &config, &train_config, args.checkpoint_dir.as_deref())?;
    for (epoch, loss) in output.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>3}: mse {loss:.6}");
    }
    save_checkpoint(&args.out, &output.params, &format!("tcqe-{}", args.preset))?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let thresholds: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad threshold list {spec:?}")))?;
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(usage("thresholds must lie in [0, 1]".to_string()));
    }
    Ok(if thresholds.is_empty() {
        DEFAULT_THRESHOLDS.to_vec()
    } else {
        thresholds
    })
}

fn cmd_eval(
    labels: &Path,
    vocab_path: &Path,
    checkpoint: &Path,
    language: &str,
    thresholds: &str,
    rand_seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    require_exists(labels, "labels")?;
    require_exists(checkpoint, "checkpoint")?;
    let examples = read_labeled(labels)?;
    let vocab = load_vocab(vocab_path)?;
    let (params, label) = load_checkpoint(checkpoint)?;
    let language: Language = language.parse().expect("infallible");
    let thresholds = parse_thresholds(thresholds)?;

    let tcqe = TcqeScorer::new(params, vocab.clone(), label);
    let rand = baseline_rand(rand_seed);
    let cc = baseline_cc(language);
    let coc = baseline_coc();
    let estimators: [&dyn Scorer; 4] = [&tcqe, &rand, &cc, &coc];
    let report = threshold_sweep(&estimators, &examples, &vocab, &thresholds)?;

    print!("{}", report.render_table());
    if let Some(prefix) = out {
        let csv_path = prefix.with_extension("csv");
        let json_path = prefix.with_extension("json");
        std::fs::write(&csv_path, report.to_csv())
            .with_context(|| format!("writing {}", csv_path.display()))?;
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .with_context(|| format!("writing {}", json_path.display()))?;
        println!("report written to {} and {}", csv_path.display(), json_path.display());
    }
    Ok(())
}

/// Serve-time settings; any flag overrides its file counterpart.
#[derive(Debug, Default, serde::Deserialize)]
struct ServeFileConfig {
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    threshold: Option<f64>,
    bind: Option<String>,
    decision_log: Option<PathBuf>,
}

fn cmd_serve(
    config_path: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    threshold: Option<f64>,
    bind: Option<String>,
    decision_log: Option<PathBuf>,
) -> Result<()> {
    let mut file_config = ServeFileConfig::default();
    if let Some(path) = &config_path {
        require_exists(path, "config")?;
        let text = std::fs::read_to_string(path)?;
        file_config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    }
    let checkpoint = checkpoint
        .or(file_config.checkpoint)
        .ok_or_else(|| usage("a checkpoint is required (flag --checkpoint or config file)"))?;
    let vocab_path = vocab
        .or(file_config.vocab)
        .ok_or_else(|| usage("a vocab is required (flag --vocab or config file)"))?;
    let threshold = threshold.or(file_config.threshold).unwrap_or(0.1);
    let bind = bind
        .or(file_config.bind)
        .unwrap_or_else(|| "127.0.0.1:8080".to_string());
    let decision_log = decision_log.or(file_config.decision_log);

    require_exists(&checkpoint, "checkpoint")?;
    let vocab = load_vocab(&vocab_path)?;
    let (params, label) = load_checkpoint(&checkpoint)?;
    let scorer = Arc::new(TcqeScorer::new(params, vocab.clone(), label));

    let mut service = GateService::new(threshold, scorer)
        .map_err(|e| anyhow!("{e}"))?
        .with_auth_token(std::env::var("QEBC_GATE_TOKEN").ok())
        .with_checkpoint_reloader(checkpoint.clone(), vocab);
    if let Some(path) = &decision_log {
        service = service.with_decision_log(path).map_err(|e| anyhow!("{e}"))?;
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("building async runtime")?;
    runtime.block_on(async move {
        let handle = serve(Arc::new(service), &bind).await.map_err(|e| anyhow!("{e}"))?;
        println!("gate listening on http://{} (threshold {})", handle.addr, threshold);
        tokio::signal::ctrl_c().await.ok();
        println!("shutting down");
        handle.shutdown().await;
        Ok(())
    })
}

fn cmd_score(
    checkpoint: &Path,
    vocab_path: &Path,
    prompt: Option<String>,
    prompt_file: Option<PathBuf>,
) -> Result<()> {
    require_exists(checkpoint, "checkpoint")?;
    let vocab = load_vocab(vocab_path)?;
    let (params, label) = load_checkpoint(checkpoint)?;
    let scorer = TcqeScorer::new(params, vocab, label);

    let prompts: Vec<String> = match (prompt, prompt_file) {
        (Some(p), None) => vec![p],
        (None, Some(path)) => {
            require_exists(&path, "prompt file")?;
            std::fs::read_to_string(&path)?
                .lines()
                .map(str::to_string)
                .collect()
        }
        _ => return Err(usage("pass exactly one of --prompt or --prompt-file")),
    };
    for prompt in &prompts {
        match scorer.score(prompt) {
            Ok(score) => println!("{score:.6}"),
            Err(e) => return Err(anyhow!("scoring failed: {e}")),
        }
    }
    Ok(())
}

/// Missing or unreadable inputs are usage errors; anything else is internal.
fn map_corpus_err(err: qebc_core::corpus::CorpusError) -> anyhow::Error {
    use qebc_core::corpus::CorpusError;
    match &err {
        CorpusError::UnreadablePath { .. } | CorpusError::NoSnippets(_) => usage(err.to_string()),
        _ => anyhow!(err),
    }
}
