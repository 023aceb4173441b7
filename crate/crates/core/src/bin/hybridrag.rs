use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hybridrag::augment::RawQuery;
use hybridrag::config::Settings;
use hybridrag::evalkit::{
    convert_squad_json, convert_truthfulqa_csv, convert_wikiqa_tsv, dataset_to_jsonl, load_dataset, run_sweep,
    sample, sweep_csv, DatasetFamily, Judge, MockJudge,
};
use hybridrag::ingest::{Stores, DOCS_FILE, VECTORS_FILE};
use hybridrag::pipeline::{Pipeline, StoreFactLookup};
use hybridrag::router::route;
use hybridrag::text::sha256_hex;

const EXIT_OK: u8 = 0;
const EXIT_PARTIAL: u8 = 1;
const EXIT_FATAL: u8 = 2;

#[derive(Parser)]
#[command(name = "hybridrag", version, about = "Hybrid vector + graph retrieval QA")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Args)]
struct Overrides {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, e.g. --set chunk_chars=256. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    sim_threshold: Option<f64>,
    #[arg(long, global = true)]
    hops: Option<usize>,
    /// mock | http
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trace: bool,
}

impl Overrides {
    fn settings(&self) -> Result<Settings> {
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut owned: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            owned.push((k.to_string(), v.to_string()));
        }
        for (k, v) in &owned {
            pairs.push((k.as_str(), v.clone()));
        }
        if let Some(v) = self.k {
            pairs.push(("k", v.to_string()));
        }
        if let Some(v) = self.sim_threshold {
            pairs.push(("sim_threshold", v.to_string()));
        }
        if let Some(v) = self.hops {
            pairs.push(("hops", v.to_string()));
        }
        if let Some(v) = &self.backend {
            pairs.push(("backend", v.clone()));
        }
        if let Some(v) = &self.endpoint {
            pairs.push(("endpoint", v.clone()));
        }
        if let Some(v) = self.seed {
            pairs.push(("seed", v.to_string()));
        }
        if self.trace {
            pairs.push(("trace", "true".into()));
        }
        Ok(Settings::resolve(self.config.as_deref(), &pairs)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split, embed and graph-index a JSONL corpus into a store directory.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question.
    Ask {
        question: String,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Run without a local store; evidence comes from search only.
        #[arg(long)]
        web_only: bool,
        /// Also write a run manifest here.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Read questions from stdin, one per line; `:quit` exits.
    Repl {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        web_only: bool,
    },
    /// Sweep the number of retrieved items over a QA dataset and write a CSV.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "wikiqa_like")]
        family: String,
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
        n_values: Vec<usize>,
        /// Number of questions to sample (default: all, shuffled).
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Ingest this corpus in memory instead of loading a store.
        #[arg(long, conflicts_with = "store")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = JudgeKind::Lexical)]
        judge: JudgeKind,
    },
    /// Show the augmented query and routing decision for a question.
    InspectRoute {
        question: String,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Convert an upstream dataset release into the JSONL layout `eval` reads.
    ConvertDataset {
        #[arg(long, value_enum)]
        from: RawFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeKind {
    Lexical,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum RawFormat {
    TruthfulqaCsv,
    SquadJson,
    WikiqaTsv,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let settings = cli.overrides.settings()?;
    match cli.cmd {
        Command::Ingest { corpus, out } => cmd_ingest(&settings, &corpus, &out),
        Command::Ask {
            question,
            store,
            web_only,
            manifest,
        } => cmd_ask(&settings, &question, store.as_deref(), web_only, manifest.as_deref()),
        Command::Repl { store, web_only } => cmd_repl(&settings, store.as_deref(), web_only),
        Command::Eval {
            dataset,
            family,
            n_values,
            sample,
            store,
            corpus,
            out,
            judge,
        } => {
            let family: DatasetFamily = family.parse().map_err(anyhow::Error::msg)?;
            let judge: Option<&dyn Judge> = match judge {
                JudgeKind::Lexical => Some(&MockJudge),
                JudgeKind::None => None,
            };
            cmd_eval(
                &settings,
                &dataset,
                family,
                &n_values,
                sample,
                StoreSource::from_args(store, corpus, false)?,
                &out,
                judge,
            )
        }
        Command::InspectRoute {
            question,
            store,
            manifest,
        } => cmd_inspect_route(&settings, &question, store.as_deref(), manifest.as_deref()),
        Command::ConvertDataset { from, input, output } => {
            let examples = match from {
                RawFormat::TruthfulqaCsv => convert_truthfulqa_csv(&input)?,
                RawFormat::SquadJson => convert_squad_json(&input)?,
                RawFormat::WikiqaTsv => convert_wikiqa_tsv(&input)?,
            };
            fs::write(&output, dataset_to_jsonl(&examples))
                .with_context(|| format!("writing {}", output.display()))?;
            println!("{}", json!({"examples": examples.len(), "output": output}));
            Ok(EXIT_OK)
        }
    }
}

enum StoreSource {
    Dir(PathBuf),
    Corpus(PathBuf),
    Empty,
}

impl StoreSource {
    fn from_args(store: Option<PathBuf>, corpus: Option<PathBuf>, web_only: bool) -> Result<Self> {
        match (store, corpus) {
            (Some(s), _) => Ok(Self::Dir(s)),
            (None, Some(c)) => Ok(Self::Corpus(c)),
            (None, None) if web_only => Ok(Self::Empty),
            (None, None) => bail!("no store given; pass --store DIR (or --web-only)"),
        }
    }

    fn load(&self, settings: &Settings) -> Result<Stores> {
        match self {
            Self::Dir(d) => Stores::load(d).with_context(|| format!("loading store {}", d.display())),
            Self::Corpus(c) => {
                let gw = settings.gateway()?;
                let aug = settings.augmenter()?;
                let mut s = Stores::new(gw.embed_dim());
                s.ingest_corpus(c, settings.chunking(), &aug.aliases, gw.as_ref())
                    .with_context(|| format!("ingesting {}", c.display()))?;
                Ok(s)
            }
            Self::Empty => Ok(Stores::new(settings.embed_dim)),
        }
    }

    fn digest(&self) -> Option<String> {
        let path = match self {
            Self::Dir(d) => d.join(DOCS_FILE),
            Self::Corpus(c) => c.clone(),
            Self::Empty => return None,
        };
        fs::read(path).ok().map(|b| sha256_hex(&b))
    }
}

fn build_pipeline(settings: &Settings, stores: Stores) -> Result<Pipeline> {
    Ok(settings.build_pipeline(stores)?)
}

fn write_manifest(path: &Path, command: &str, settings: &Settings, corpus_digest: Option<String>, extra: serde_json::Value) -> Result<()> {
    let m = json!({
        "command": command,
        "config": settings,
        "seed": settings.seed,
        "corpus_digest": corpus_digest,
        "versions": {"hybridrag": env!("CARGO_PKG_VERSION")},
        "outputs": extra,
    });
    fs::write(path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("writing manifest {}", path.display()))
}

fn cmd_ingest(settings: &Settings, corpus: &Path, out: &Path) -> Result<u8> {
    let gw = settings.gateway()?;
    let aug = settings.augmenter()?;
    let mut stores = if out.join(VECTORS_FILE).exists() {
        Stores::load(out).with_context(|| format!("loading existing store {}", out.display()))?
    } else {
        Stores::new(gw.embed_dim())
    };
    let report = stores
        .ingest_corpus(corpus, settings.chunking(), &aug.aliases, gw.as_ref())
        .with_context(|| format!("ingesting {}", corpus.display()))?;
    stores.save(out)?;
    let digest = fs::read(corpus).ok().map(|b| sha256_hex(&b));
    write_manifest(&out.join("manifest.json"), "ingest", settings, digest, serde_json::to_value(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    for s in &report.skipped {
        eprintln!("skipped line {}: {}", s.line, s.reason);
    }
    Ok(if report.skipped.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn cmd_ask(settings: &Settings, question: &str, store: Option<&Path>, web_only: bool, manifest: Option<&Path>) -> Result<u8> {
    let source = StoreSource::from_args(store.map(Path::to_path_buf), None, web_only)?;
    let pipeline = build_pipeline(settings, source.load(settings)?)?;
    let answer = pipeline.answer(&RawQuery::new("q0", question)?)?;
    println!("{}", answer.text);
    if settings.trace {
        let t = json!({
            "query_id": answer.query_id,
            "augmented": answer.augmented.text,
            "route": answer.route,
            "prompt_digest": answer.prompt_digest,
            "trace": answer.trace,
        });
        println!("{}", serde_json::to_string_pretty(&t)?);
    }
    if let Some(m) = manifest {
        write_manifest(m, "ask", settings, source.digest(), json!({"prompt_digest": answer.prompt_digest}))?;
    }
    Ok(EXIT_OK)
}

fn cmd_repl(settings: &Settings, store: Option<&Path>, web_only: bool) -> Result<u8> {
    let source = StoreSource::from_args(store.map(Path::to_path_buf), None, web_only)?;
    let pipeline = build_pipeline(settings, source.load(settings)?)?;
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let mut turn = 0usize;
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            return Ok(EXIT_OK);
        }
        let q = line.trim();
        if q == ":quit" {
            return Ok(EXIT_OK);
        }
        if q.is_empty() {
            continue;
        }
        turn += 1;
        let result = RawQuery::new(format!("q{turn}"), q)
            .map_err(anyhow::Error::from)
            .and_then(|rq| pipeline.answer(&rq).map_err(anyhow::Error::from));
        match result {
            Ok(a) => {
                writeln!(stdout, "{}", a.text)?;
                if settings.trace {
                    writeln!(stdout, "{}", serde_json::to_string(&json!({"trace": a.trace}))?)?;
                }
            }
            Err(e) => eprintln!("error: {e:#}"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    settings: &Settings,
    dataset: &Path,
    family: DatasetFamily,
    n_values: &[usize],
    sample_n: Option<usize>,
    source: StoreSource,
    out: &Path,
    judge: Option<&dyn Judge>,
) -> Result<u8> {
    let all = load_dataset(dataset, family)?;
    let examples = sample(&all, sample_n.unwrap_or(all.len()), settings.seed);
    let pipeline = build_pipeline(settings, source.load(settings)?)?;
    let reports = run_sweep(&pipeline, &examples, n_values, judge, settings.parallel);
    fs::write(out, sweep_csv(&reports)?).with_context(|| format!("writing {}", out.display()))?;

    let mut summary = Vec::new();
    for r in &reports {
        let mut line = format!(
            "N={} bleu1={:.4} rouge1={:.4} failed={}",
            r.n_retrieved, r.mean_bleu1, r.mean_rouge1, r.failed
        );
        if let Some(j) = &r.mean_judge {
            line.push_str(&format!(
                " faithfulness={:.1}% answer_relevancy={:.1}% context_relevancy={:.1}% context_precision={:.1}%",
                100.0 * j.faithfulness,
                100.0 * j.answer_relevancy,
                100.0 * j.context_relevancy,
                100.0 * j.context_precision
            ));
        }
        println!("{line}");
        summary.push(json!({
            "n": r.n_retrieved,
            "bleu1": r.mean_bleu1,
            "rouge1": r.mean_rouge1,
            "judge": r.mean_judge,
            "failed": r.failed,
        }));
    }
    let mut manifest = out.as_os_str().to_owned();
    manifest.push(".manifest.json");
    let dataset_digest = fs::read(dataset).ok().map(|b| sha256_hex(&b));
    write_manifest(
        Path::new(&manifest),
        "eval",
        settings,
        source.digest(),
        json!({
            "csv": out,
            "dataset": dataset,
            "dataset_digest": dataset_digest,
            "family": family,
            "examples": examples.len(),
            "n_values": n_values,
            "summary": summary,
        }),
    )?;
    let partial = reports.iter().any(|r| r.is_partial());
    if partial {
        eprintln!("some examples failed; affected rows exclude them from the means");
    }
    Ok(if partial { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_inspect_route(settings: &Settings, question: &str, store: Option<&Path>, manifest: Option<&Path>) -> Result<u8> {
    let source = StoreSource::from_args(store.map(Path::to_path_buf), None, true)?;
    let stores = source.load(settings)?;
    let gw = settings.gateway()?;
    let aug = settings.augmenter()?;
    let remote = settings.remote_articles()?;
    let aq = aug.augment(&RawQuery::new("q0", question)?, gw.as_ref())?;
    let facts = StoreFactLookup {
        stores: &stores,
        aliases: &aug.aliases,
        remote: remote.as_ref().map(Arc::as_ref),
    };
    let outcome = route(&aq, &facts, gw.as_ref())?;
    let fetched: Vec<&str> = outcome.fetched.iter().map(|a| a.title.as_str()).collect();
    let out = json!({
        "augmented": aq,
        "decision": outcome.decision,
        "fetched_titles": fetched,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if let Some(m) = manifest {
        write_manifest(m, "inspect-route", settings, source.digest(), out)?;
    }
    Ok(EXIT_OK)
}
