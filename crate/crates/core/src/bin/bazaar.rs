use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use bazaar::config::{build_index, AppConfig, ChatSource, ConfigError, ProviderKind, Providers};
use bazaar::corpus::{load_corpus, load_queries, CorpusError};
use bazaar::engine::Engine;
use bazaar::evaluation::{elo_tournament_with_roster, parse_match_results, EloError, DEFAULT_K, DEFAULT_ORDERINGS};
use bazaar::experiment::{
    parse_paraphrases, parse_results, run_experiment, write_results, ExperimentContext, ExperimentError,
    ExperimentKind, ExperimentSpec, ParaphraseItem,
};
use bazaar::report::{build_report, match_results, render, ReportError, ReportFormat, ReportOptions};
use bazaar::retrieval::RetrievalError;
use bazaar::{Corpus, PassageId, QuerySpec};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Elo(#[from] EloError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "bazaar", version, about = "Information marketplace simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Live,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus preparation.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// One market run for one question; writes the run record.
    Run {
        /// Question id from the queries file.
        #[arg(long, conflicts_with = "question")]
        query: Option<String>,
        /// Ad hoc question text.
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        budget: Option<u64>,
        /// Decide from titles only.
        #[arg(long)]
        metadata_only: bool,
    },
    /// Batch experiment; writes `<kind>.results.jsonl`.
    Experiment {
        kind: ExperimentKind,
        /// JSON object merged over the config's parameter block.
        #[arg(long)]
        params: Option<String>,
        /// Comma-separated question ids.
        #[arg(long, value_delimiter = ',')]
        questions: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
    },
    /// Elo ratings from a results file or a match list.
    Elo {
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ORDERINGS)]
        orderings: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: f64,
    },
    /// Tables or plot data from a results file.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
        #[arg(long, default_value_t = DEFAULT_ORDERINGS)]
        orderings: usize,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Prices and assigns passages, then writes them with their vectors.
    Build {
        /// Passages file; defaults to the configured one.
        #[arg(long)]
        passages: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Plotdata,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(global: &Global) -> Result<AppConfig, CliError> {
    let mut config = match &global.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.set_seed(seed);
    }
    match global.provider {
        Some(ProviderArg::Live) => config.sim.provider.kind = ProviderKind::Live,
        Some(ProviderArg::Mock) => config.sim.provider.kind = ProviderKind::Mock,
        None => {}
    }
    Ok(config)
}

fn corpus_of(config: &AppConfig, override_path: Option<&Path>) -> Result<Corpus, CliError> {
    let path = override_path
        .or(config.data.passages.as_deref())
        .ok_or_else(|| CliError::Usage("no passages file; set data.passages in the config".into()))?;
    Ok(load_corpus(path, &config.corpus)?)
}

fn queries_of(config: &AppConfig, corpus: &Corpus) -> Result<Vec<QuerySpec>, CliError> {
    match &config.data.queries {
        Some(path) => Ok(load_queries(path, corpus)?),
        None => Ok(Vec::new()),
    }
}

fn paraphrases_of(config: &AppConfig) -> Result<Vec<ParaphraseItem>, CliError> {
    match &config.data.paraphrases {
        Some(path) => Ok(parse_paraphrases(&fs::read_to_string(path).map_err(io_err(path))?)?),
        None => Ok(Vec::new()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    let out = &cli.global.out;
    match cli.command {
        Command::Corpus {
            action: CorpusAction::Build { passages },
        } => {
            let corpus = corpus_of(&config, passages.as_deref())?;
            let providers = Providers::build(&config.sim.provider, config.seed)?;
            let index = build_index(&config.sim.provider, &corpus, providers.embedder.as_ref())?;
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf).map_err(io_err(out))?;
            write_file(&out.join("passages.jsonl"), &String::from_utf8_lossy(&buf))?;
            let mut vectors = Vec::new();
            index.write_jsonl(&mut vectors).map_err(io_err(out))?;
            write_file(&out.join("vectors.jsonl"), &String::from_utf8_lossy(&vectors))?;
            println!(
                "{} passages, {} vendors, dimension {}",
                corpus.len(),
                corpus.vendors().count(),
                index.dimension()
            );
        }
        Command::Run {
            query,
            question,
            budget,
            metadata_only,
        } => {
            let corpus = corpus_of(&config, None)?;
            let query = match (query, question) {
                (Some(id), _) => queries_of(&config, &corpus)?
                    .into_iter()
                    .find(|q| q.id == id)
                    .ok_or_else(|| CliError::Usage(format!("no query {id}")))?,
                (None, Some(text)) => QuerySpec {
                    id: "adhoc".into(),
                    question: text,
                    gold_passage_id: PassageId::new(""),
                    budget: None,
                },
                (None, None) => return Err(CliError::Usage("pass --query or --question".into())),
            };
            let mut sim = config.sim.clone();
            if let Some(b) = budget.or(query.budget) {
                sim.budget = b;
            }
            if metadata_only {
                sim.inspection = false;
            }
            let providers = Providers::build(&sim.provider, config.seed)?;
            let index = build_index(&sim.provider, &corpus, providers.embedder.as_ref())?;
            let engine = Engine {
                corpus: &corpus,
                index: &index,
                chat: providers.chat.as_ref(),
                embedder: providers.embedder.as_ref(),
                reranker: providers.reranker.as_ref(),
            };
            let started = Instant::now();
            let record = engine.run(&query, &sim);
            let wall_ms = started.elapsed().as_millis();
            let path = out.join(format!("run-{}.jsonl", query.id));
            write_file(&path, &record.to_jsonl())?;
            write_file(
                &out.join(format!("run-{}.timing.json", query.id)),
                &serde_json::json!({ "wall_ms": wall_ms }).to_string(),
            )?;
            println!("{}", record.final_answer());
            eprintln!("spent {} of {}; record {}", record.total_spent(), sim.budget, path.display());
        }
        Command::Experiment {
            kind,
            params,
            questions,
            repetitions,
        } => {
            let corpus = corpus_of(&config, None)?;
            let queries = queries_of(&config, &corpus)?;
            let paraphrases = paraphrases_of(&config)?;
            let mut parameters = config
                .experiment
                .get(&kind)
                .cloned()
                .unwrap_or_else(|| serde_json::json!({}));
            if let Some(text) = params {
                let extra: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--params: {e}")))?;
                let (Some(base), Some(extra)) = (parameters.as_object_mut(), extra.as_object()) else {
                    return Err(CliError::Usage("--params must be a JSON object".into()));
                };
                base.extend(extra.clone());
            }
            let spec = ExperimentSpec {
                kind,
                parameters,
                questions,
                repetitions,
                seed: config.seed,
            };
            let providers = Providers::build(&config.sim.provider, config.seed)?;
            let index = build_index(&config.sim.provider, &corpus, providers.embedder.as_ref())?;
            let source = ChatSource::from_config(&config.sim.provider, config.seed)?;
            let chat_for = |model: &str| source.chat(model);
            let ctx = ExperimentContext {
                corpus: &corpus,
                index: &index,
                queries: &queries,
                paraphrases: &paraphrases,
                base: &config.sim,
                embedder: providers.embedder.as_ref(),
                reranker: providers.reranker.as_ref(),
                chat_for: &chat_for,
            };
            let records = run_experiment(&spec, &ctx)?;
            let path = out.join(format!("{kind}.results.jsonl"));
            write_file(&path, &write_results(&records))?;
            println!("{} trials written to {}", records.len(), path.display());
        }
        Command::Elo { input, orderings, k } => {
            let text = fs::read_to_string(&input).map_err(io_err(&input))?;
            let groups = match parse_results(&text) {
                Ok(records) => match_results(&records)
                    .into_iter()
                    .map(|(kind, m)| (kind.to_string(), m))
                    .collect(),
                Err(_) => vec![(
                    "matches".to_owned(),
                    parse_match_results(&text).map_err(CliError::Usage)?,
                )],
            };
            let mut stdout = std::io::stdout().lock();
            for (name, results) in groups {
                let report = elo_tournament_with_roster(&results, &[], orderings, config.seed, k)?;
                let _ = writeln!(stdout, "== {name} ==");
                for r in &report.ratings {
                    let _ = writeln!(stdout, "{}\t{:.2}\t{:.2}", r.contestant, r.mean_rating, r.rating_std);
                }
                write_file(
                    &out.join(format!("{name}.elo.json")),
                    &serde_json::to_string_pretty(&report).expect("report serializes"),
                )?;
            }
        }
        Command::Report {
            input,
            format,
            orderings,
        } => {
            let text = fs::read_to_string(&input).map_err(io_err(&input))?;
            let records = parse_results(&text)?;
            let tables = build_report(
                &records,
                ReportOptions {
                    n_orderings: orderings,
                    seed: config.seed,
                },
            )?;
            let (format, ext) = match format {
                FormatArg::Table => (ReportFormat::Table, "txt"),
                FormatArg::Plotdata => (ReportFormat::Csv, "csv"),
            };
            let rendered = render(&tables, format);
            let stem = input
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.trim_end_matches(".jsonl").trim_end_matches(".results"))
                .unwrap_or("results");
            write_file(&out.join(format!("{stem}.report.{ext}")), &rendered)?;
            print!("{rendered}");
        }
    }
    Ok(())
}
