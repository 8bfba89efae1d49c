mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adcofe::corpus::{write_corpus, CorpusFormat};
use adcofe::kgclient::{Fixture, HttpConfig, KgCache, KgClient, KgSource, DEFAULT_BASE_URL};
use adcofe::metrics::{render_comparison, render_comparison_json};
use adcofe::optim::OptimizerKind;
use adcofe::pipeline::{self, EnrichOptions, ErrorKind, PipelineError, TrainOptions};
use adcofe::sentlex::Lexicon;
use adcofe::synth;
use adcofe::textprep::Stoplist;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::FileConfig;

const CACHE_ENV: &str = "ADCOFE_CACHE_DIR";
const CACHE_FILE: &str = "kg_cache.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "adcofe",
    version,
    about = "Context-enriched emotion recognition pipeline"
)]
struct Cli {
    /// Sectioned configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KgMode {
    Http,
    Fixture,
    Cache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FileFormat {
    Csv,
    Jsonl,
}

impl From<FileFormat> for CorpusFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::Csv => CorpusFormat::Csv,
            FileFormat::Jsonl => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate a corpus and print its summary.
    Ingest(CorpusArgs),
    /// Split, augment the training half and add sentiment features.
    Enrich(EnrichArgs),
    /// Train the encoder and classification head.
    Train(TrainArgs),
    /// Evaluate a trained model on the test split.
    Eval(EvalArgs),
    /// Render a saved metrics file as a comparison table.
    Report(ReportArgs),
    /// Generate a synthetic corpus with matching fixture and lexicon.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Corpus file (.csv or .jsonl).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    corpus_format: Option<FileFormat>,
}

#[derive(Args, Debug)]
struct EnrichArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum)]
    kg_mode: Option<KgMode>,
    #[arg(long)]
    kg_url: Option<String>,
    /// Related-term fixture used in fixture mode.
    #[arg(long)]
    kg_fixture: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Skip sentiment feature tokens.
    #[arg(long)]
    no_sentiment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory holding train.jsonl; defaults to the output directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    layers: Option<usize>,
    /// Order-prediction pretraining epochs before fine-tuning.
    #[arg(long)]
    sop_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory with model.ckpt and vocab.txt; defaults to the output directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test split; defaults to test.jsonl in the model directory.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    include_paper_rows: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metrics file; defaults to metrics.json in the output directory.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    include_paper_rows: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, value_enum, default_value_t = FileFormat::Csv)]
    corpus_format: FileFormat,
    /// Generate an unlabeled order-marker corpus instead.
    #[arg(long)]
    ordered: bool,
    #[arg(long, default_value_t = 20)]
    conversations: usize,
    #[arg(long, default_value_t = 8)]
    turns: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

struct Context {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
    format: OutputFormat,
}

impl Context {
    fn emit(&self, text: String, value: serde_json::Value) {
        match self.format {
            OutputFormat::Text => print!("{text}"),
            OutputFormat::Json => println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("json output")
            ),
        }
    }

    fn corpus(&self, args: &CorpusArgs) -> Result<(PathBuf, Option<CorpusFormat>), CliError> {
        let path = args
            .corpus
            .clone()
            .or_else(|| self.file.corpus.path.clone())
            .ok_or_else(|| {
                CliError::Usage("no corpus given (use --corpus or [corpus] path)".into())
            })?;
        let format = match (args.corpus_format, &self.file.corpus.format) {
            (Some(f), _) => Some(f.into()),
            (None, Some(f)) => Some(
                f.parse()
                    .map_err(|e: adcofe::corpus::CorpusError| CliError::Usage(e.to_string()))?,
            ),
            (None, None) => None,
        };
        Ok((path, format))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Pipeline(PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })
    })
}

fn cmd_ingest(ctx: &Context, args: &CorpusArgs) -> Result<(), CliError> {
    let (path, format) = ctx.corpus(args)?;
    let (_, summary) = pipeline::ingest(&path, format)?;
    ctx.emit(
        summary.render(),
        serde_json::to_value(&summary).expect("summary json"),
    );
    Ok(())
}

fn kg_client(ctx: &Context, args: &EnrichArgs) -> Result<(KgClient, &'static str), CliError> {
    let mode = match (args.kg_mode, ctx.file.kg.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => KgMode::from_str(s, true)
            .map_err(|_| CliError::Usage(format!("unknown kg mode {s:?}")))?,
        (None, None) => KgMode::Fixture,
    };
    let cache_dir = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .or_else(|| ctx.file.kg.cache_dir.clone())
        .unwrap_or_else(|| ctx.out.join("cache"));
    let open_cache = || -> Result<KgCache, CliError> {
        ensure_dir(&cache_dir)?;
        KgCache::open(&cache_dir.join(CACHE_FILE)).map_err(|e| CliError::Pipeline(e.into()))
    };
    Ok(match mode {
        KgMode::Fixture => {
            let path = args
                .kg_fixture
                .clone()
                .or_else(|| ctx.file.kg.fixture.clone())
                .ok_or_else(|| {
                    CliError::Usage("fixture mode needs --kg-fixture or [kg] fixture".into())
                })?;
            let fixture = Fixture::load(&path).map_err(|e| CliError::Pipeline(e.into()))?;
            (KgClient::fixture(fixture), "fixture")
        }
        KgMode::Cache => (KgClient::new(KgSource::CacheOnly, open_cache()?), "cache"),
        KgMode::Http => {
            let base_url = args
                .kg_url
                .clone()
                .or_else(|| ctx.file.kg.base_url.clone())
                .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
            let http = HttpConfig {
                base_url,
                ..HttpConfig::default()
            };
            (KgClient::new(KgSource::Http(http), open_cache()?), "http")
        }
    })
}

fn cmd_enrich(ctx: &Context, args: &EnrichArgs) -> Result<(), CliError> {
    let (path, format) = ctx.corpus(&args.corpus)?;
    let (corpus, _) = pipeline::ingest(&path, format)?;
    let (client, mode) = kg_client(ctx, args)?;
    let lexicon = match args
        .lexicon
        .clone()
        .or_else(|| ctx.file.sentiment.lexicon.clone())
    {
        Some(p) => Lexicon::load(&p).map_err(|e| CliError::Pipeline(e.into()))?,
        None => Lexicon::bundled(),
    };
    let d = EnrichOptions::default();
    let kg = &ctx.file.kg;
    let opts = EnrichOptions {
        test_fraction: args
            .test_fraction
            .or(ctx.file.split.test_fraction)
            .unwrap_or(d.test_fraction),
        seed: ctx.seed,
        k: args.k.or(kg.k).unwrap_or(d.k),
        variants: args.variants.or(kg.variants).unwrap_or(d.variants),
        threshold: args
            .threshold
            .or(ctx.file.sentiment.threshold)
            .unwrap_or(d.threshold),
        sentiment: !args.no_sentiment && ctx.file.sentiment.enabled.unwrap_or(true),
    };
    let splits = pipeline::enrich(
        &corpus.conversations,
        &client,
        &lexicon,
        &Stoplist::bundled(),
        &opts,
    )?;
    let meta = pipeline::enrich_meta(&splits, &opts, mode);
    pipeline::write_splits(&ctx.out, &splits, &meta)?;
    ctx.emit(
        format!(
            "wrote {} training samples ({} augmented) and {} test samples to {}\n",
            meta.train_samples,
            meta.augmented_samples,
            meta.test_samples,
            ctx.out.display()
        ),
        serde_json::to_value(&meta).expect("meta json"),
    );
    Ok(())
}

fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let data = args.data.clone().unwrap_or_else(|| ctx.out.clone());
    let samples = pipeline::read_jsonl(&data.join(pipeline::TRAIN_FILE))?;
    let mut encoder = ctx.file.encoder_config(ctx.seed);
    if let Some(l) = args.layers {
        encoder.layers = l;
    }
    let mut train = ctx.file.train_config(ctx.seed);
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(o) = args.optimizer {
        train.optimizer = match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
    let opts = TrainOptions {
        encoder,
        train,
        sop_epochs: args.sop_epochs.or(ctx.file.train.sop_epochs).unwrap_or(0),
    };
    let outcome = pipeline::train(&samples, &opts)?;
    pipeline::save_model(&ctx.out, &outcome, &opts)?;
    let mut text = String::new();
    for h in &outcome.history {
        text.push_str(&format!(
            "epoch {}: mean loss {:.4}\n",
            h.epoch, h.mean_loss
        ));
    }
    text.push_str(&format!(
        "model written to {}\n",
        ctx.out.join(pipeline::MODEL_FILE).display()
    ));
    ctx.emit(
        text,
        json!({ "seed": ctx.seed, "history": outcome.history, "model": ctx.out.join(pipeline::MODEL_FILE) }),
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<(), CliError> {
    let model_dir = args.model.clone().unwrap_or_else(|| ctx.out.clone());
    let test_path = args
        .test
        .clone()
        .unwrap_or_else(|| model_dir.join(pipeline::TEST_FILE));
    let (model, vocab) = pipeline::load_model(&model_dir)?;
    let test = pipeline::read_jsonl(&test_path)?;
    let eval = pipeline::evaluate(&model, &vocab, &test)?;
    pipeline::write_evaluation(&ctx.out, &eval, args.include_paper_rows, model.config.seed)?;
    ctx.emit(
        render_comparison(&eval.report, args.include_paper_rows),
        serde_json::from_str(&render_comparison_json(
            &eval.report,
            args.include_paper_rows,
        ))
        .expect("metrics json"),
    );
    Ok(())
}

fn cmd_report(ctx: &Context, args: &ReportArgs) -> Result<(), CliError> {
    let path = args
        .metrics
        .clone()
        .unwrap_or_else(|| ctx.out.join(pipeline::METRICS_JSON_FILE));
    let report = pipeline::read_report(&path)?;
    ctx.emit(
        render_comparison(&report, args.include_paper_rows),
        serde_json::from_str(&render_comparison_json(&report, args.include_paper_rows))
            .expect("metrics json"),
    );
    Ok(())
}

fn cmd_synth(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    ensure_dir(&ctx.out)?;
    let ext = match args.corpus_format {
        FileFormat::Csv => "csv",
        FileFormat::Jsonl => "jsonl",
    };
    let corpus_path = ctx.out.join(format!("corpus.{ext}"));
    let write = |convs: &[adcofe::corpus::Conversation]| {
        write_corpus(&corpus_path, args.corpus_format.into(), convs)
            .map_err(|e| CliError::Pipeline(e.into()))
    };
    if args.ordered {
        let convs = synth::ordered_corpus(args.conversations, args.turns, ctx.seed);
        write(&convs)?;
        ctx.emit(
            format!(
                "wrote {} ordered conversations to {}\n",
                convs.len(),
                corpus_path.display()
            ),
            json!({ "seed": ctx.seed, "corpus": corpus_path, "conversations": convs.len() }),
        );
        return Ok(());
    }
    if args.per_class == 0 {
        return Err(CliError::Usage("--per-class must be at least 1".into()));
    }
    let corpus = synth::emotion_corpus(args.per_class, ctx.seed);
    write(&corpus.conversations)?;
    let fixture_path = ctx.out.join("kg_fixture.json");
    let lexicon_path = ctx.out.join("lexicon.tsv");
    pipeline::write_text(&fixture_path, &(corpus.fixture.to_json() + "\n"))?;
    pipeline::write_text(
        &lexicon_path,
        &format!(
            "# synthetic lexicon, seed {}\n{}",
            ctx.seed,
            corpus.lexicon.to_file_string()
        ),
    )?;
    let n = 6 * args.per_class;
    ctx.emit(
        format!(
            "wrote {n} utterances in {} conversations to {}\nfixture: {}\nlexicon: {}\n",
            corpus.conversations.len(),
            corpus_path.display(),
            fixture_path.display(),
            lexicon_path.display()
        ),
        json!({
            "seed": ctx.seed,
            "utterances": n,
            "conversations": corpus.conversations.len(),
            "corpus": corpus_path,
            "fixture": fixture_path,
            "lexicon": lexicon_path,
        }),
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(CliError::Usage)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(file.split.seed).unwrap_or(0),
        out: cli
            .out
            .clone()
            .or_else(|| file.output.dir.clone())
            .unwrap_or_else(|| "out".into()),
        format: cli.format,
        file,
    };
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Enrich(a) => cmd_enrich(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
