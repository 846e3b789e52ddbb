use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use udnmt::corpus::{generate_synthetic, load_corpus, load_corpus_with, SyntheticLexicon, SyntheticSpec};
use udnmt::eval::{cache_swap_eval, instance_profiles};
use udnmt::model::{DecodeMode, GateMode, ModelConfig};
use udnmt::tfidf::TfidfConfig;
use udnmt::training::{margin_analysis, metrics_to_jsonl, train, Distance, Engine, TrainConfig};
use udnmt_cli::{exit, exit_code, translate_batch, Reply, Session};

#[derive(Parser)]
#[command(name = "udnmt", version, about = "User-driven neural machine translation")]
#[command(allow_negative_numbers = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Minimum TF-IDF weight of a cached keyword.
    #[arg(long, global = true)]
    tfidf_threshold: Option<f64>,
    #[arg(long, global = true)]
    topic_cache_size: Option<usize>,
    #[arg(long, global = true)]
    context_cache_size: Option<usize>,
    /// Triplet-margin threshold of the contrastive loss.
    #[arg(long, global = true, default_value_t = 2.0)]
    eta: f64,
}

impl Global {
    fn tfidf(&self, base: &TfidfConfig) -> TfidfConfig {
        TfidfConfig {
            threshold: self.tfidf_threshold.unwrap_or(base.threshold),
            topic_capacity: self.topic_cache_size.unwrap_or(base.topic_capacity),
            context_capacity: self.context_cache_size.unwrap_or(base.context_capacity),
        }
    }

    fn overrides_tfidf(&self) -> bool {
        self.tfidf_threshold.is_some() || self.topic_cache_size.is_some() || self.context_cache_size.is_some()
    }

    /// Loads a checkpoint, rebuilding the user bank if cache flags were
    /// given.
    fn engine(&self, path: &Path) -> Result<Engine> {
        let e = Engine::load(path).with_context(|| format!("loading {}", path.display()))?;
        if !self.overrides_tfidf() {
            return Ok(e);
        }
        let tfidf = self.tfidf(&e.tfidf);
        tfidf.validate()?;
        Ok(Engine::new(e.model, e.vocab, tfidf, e.users))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic personalised corpus.
    GenCorpus(GenCorpus),
    /// Train a model and write a checkpoint.
    Train(Box<Train>),
    /// Translate a JSON-lines file.
    Translate(Translate),
    /// Translate interactively as one user.
    Repl(Repl),
    /// Score a test set, including cache-swap diagnostics.
    Evaluate(Evaluate),
    /// Compare margins of a contrastive and a likelihood-only model.
    MarginAnalysis(Margin),
}

#[derive(Args)]
struct GenCorpus {
    /// Training users; dev and test get a sixth and a third as many.
    #[arg(long, default_value_t = 60)]
    users: usize,
    #[arg(long)]
    dev_users: Option<usize>,
    #[arg(long)]
    test_users: Option<usize>,
    #[arg(long, default_value_t = 2)]
    topics: usize,
    /// Sentences per user.
    #[arg(long, default_value_t = 30)]
    sentences: usize,
    /// Ambiguous source words.
    #[arg(long, default_value_t = 20)]
    ambiguous: usize,
    /// Unambiguous source words.
    #[arg(long, default_value_t = 40)]
    shared: usize,
    /// Probability that a sentence carries a topic marker.
    #[arg(long, default_value_t = 0.4)]
    marker_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Average,
    PerPosition,
}

#[derive(Args)]
struct Train {
    /// Directory with train.jsonl and optionally dev.jsonl.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 128)]
    max_positions: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate factor applied after every epoch.
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Dev evaluation interval in updates; 0 evaluates once per epoch.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    dev_limit: Option<usize>,
    /// Weight of the contrastive loss; 0 trains on likelihood alone.
    #[arg(long, default_value_t = 1.0)]
    cl_weight: f64,
    #[arg(long, value_enum, default_value = "average")]
    distance: DistanceArg,
    #[arg(long, default_value_t = 5.0)]
    grad_clip: f64,
    /// Ignore the caches entirely (baseline).
    #[arg(long)]
    no_cache: bool,
    /// One gate value for all dimensions.
    #[arg(long)]
    scalar_gate: bool,
    /// Add the behaviour vector before the positional encoding.
    #[arg(long)]
    augment_pre_positional: bool,
}

#[derive(Args)]
struct Decoding {
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 4)]
    beam: usize,
}

impl Decoding {
    fn mode(&self) -> DecodeMode {
        if self.beam <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam(self.beam)
        }
    }
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    decoding: Decoding,
}

#[derive(Args)]
struct Repl {
    #[arg(long)]
    model: PathBuf,
    /// Plain-text file of earlier inputs, one sentence per line.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value = "repl-user")]
    user: String,
    #[command(flatten)]
    decoding: Decoding,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// `lexicon.json` of a synthetic corpus, for ambiguous-word accuracy.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[command(flatten)]
    decoding: Decoding,
}

#[derive(Args)]
struct Margin {
    /// Contrastively trained checkpoint.
    #[arg(long)]
    cl: PathBuf,
    /// Likelihood-only checkpoint.
    #[arg(long)]
    mle: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    #[arg(long, value_enum, default_value = "average")]
    distance: DistanceArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

impl From<DistanceArg> for Distance {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Average => Distance::AverageLogProb,
            DistanceArg::PerPosition => Distance::PerPosition,
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(g: &Global, a: &GenCorpus) -> Result<()> {
    let base = SyntheticSpec::with_users(a.users);
    let spec = SyntheticSpec {
        dev_users: a.dev_users.unwrap_or(base.dev_users),
        test_users: a.test_users.unwrap_or(base.test_users),
        num_topics: a.topics,
        ambiguous_vocab_size: a.ambiguous,
        shared_vocab_size: a.shared,
        sentences_per_user: a.sentences,
        marker_rate: a.marker_rate,
        seed: g.seed,
        ..base
    };
    let corpus = generate_synthetic(&spec)?;
    corpus.write_to(&a.out)?;
    println!(
        "wrote {} train, {} dev, {} test records to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(g: &Global, a: &Train) -> Result<()> {
    let tfidf = g.tfidf(&TfidfConfig::default());
    let model = ModelConfig {
        d_model: a.d_model,
        ffn_dim: a.ffn_dim,
        layers: a.layers,
        heads: a.heads,
        dropout: a.dropout,
        max_positions: a.max_positions,
        gate: if a.scalar_gate {
            GateMode::Scalar
        } else {
            GateMode::Vector
        },
        use_cache: !a.no_cache,
        augment_pre_positional: a.augment_pre_positional,
    };
    model.validate()?;
    let cfg = TrainConfig {
        lr: a.lr,
        lr_decay: a.lr_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        max_steps: a.max_steps,
        patience: a.patience,
        eval_every: a.eval_every,
        dev_limit: a.dev_limit,
        eta: g.eta,
        cl_weight: a.cl_weight,
        distance: a.distance.into(),
        grad_clip: Some(a.grad_clip).filter(|c| *c > 0.0),
        seed: g.seed,
        ..TrainConfig::default()
    };
    let corpus = load_corpus(&a.corpus.join("train.jsonl"))?;
    let dev_path = a.corpus.join("dev.jsonl");
    let dev = if dev_path.exists() {
        load_corpus_with(&dev_path, &corpus.vocab)?.0
    } else {
        Vec::new()
    };
    info!(
        "{} training and {} dev instances, vocabulary {}/{}",
        corpus.triplets.len(),
        dev.len(),
        corpus.vocab.source.len(),
        corpus.vocab.target.len()
    );
    let metrics_path = a
        .metrics
        .clone()
        .unwrap_or_else(|| a.out.with_extension("metrics.jsonl"));
    let mut log = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_err = None;
    let outcome = train(&model, &tfidf, &corpus.vocab, &corpus.triplets, &dev, &cfg, |r| {
        if write_err.is_none() {
            if let Err(e) = log.write_all(metrics_to_jsonl(std::slice::from_ref(r)).as_bytes()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    outcome.engine.save(&a.out)?;
    match outcome.best_dev_bleu {
        Some(b) => println!(
            "{} updates, best dev BLEU {b:.2}; saved {}",
            outcome.steps,
            a.out.display()
        ),
        None => println!("{} updates; saved {}", outcome.steps, a.out.display()),
    }
    Ok(())
}

fn run_translate(g: &Global, a: &Translate) -> Result<()> {
    let engine = g.engine(&a.model)?;
    let n = translate_batch(&engine, &a.input, &a.output, a.decoding.mode())?;
    eprintln!("translated {n} line(s)");
    Ok(())
}

fn run_repl(g: &Global, a: &Repl) -> Result<()> {
    let engine = g.engine(&a.model)?;
    let history: Vec<String> = match &a.history {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect(),
        None => Vec::new(),
    };
    let mut session = Session::new(&engine, &a.user, &history, a.decoding.mode());
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    eprintln!("type a sentence to translate, :help for commands");
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        match session.handle(&line) {
            Ok(Reply::Translation(t)) => writeln!(stdout, "{t}")?,
            Ok(Reply::Info(s)) => writeln!(stdout, "{s}")?,
            Ok(Reply::Quit) => break,
            Err(e) => eprintln!("error: {e}"),
        }
    }
    Ok(())
}

fn run_evaluate(g: &Global, a: &Evaluate) -> Result<()> {
    let engine = g.engine(&a.model)?;
    let (test, dropped) = load_corpus_with(&a.test, &engine.vocab)?;
    if test.is_empty() {
        bail!("{} holds no usable instances", a.test.display());
    }
    let ambiguous = match &a.lexicon {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let lex: SyntheticLexicon =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Some(lex.ambiguous_targets())
        }
        None => None,
    };
    let profiles = instance_profiles(&engine, &test);
    let report = cache_swap_eval(&engine, &test, &profiles, a.decoding.mode(), ambiguous.as_ref())?;
    write_json(&a.report, &report)?;
    println!(
        "BLEU {:.2}  s-BLEU {:.2}  d-BLEU {:.2}  s-Sim {:.2}  d-Sim {:.2}",
        report.bleu, report.s_bleu, report.d_bleu, report.s_sim, report.d_sim
    );
    if let Some(acc) = report.ambiguous_accuracy {
        println!("ambiguous-token accuracy {acc:.2}%");
    }
    println!(
        "{} instance(s), {dropped} dropped, {} with borrowed topic caches",
        test.len(),
        report.borrowed
    );
    Ok(())
}

fn run_margin(g: &Global, a: &Margin) -> Result<()> {
    let cl = g.engine(&a.cl)?;
    let mle = g.engine(&a.mle)?;
    let (corpus, _) = load_corpus_with(&a.corpus, &cl.vocab)?;
    let report = margin_analysis(&cl, &mle, &corpus, a.samples, a.distance.into(), g.seed)?;
    println!(
        "{} samples: larger margin on {:.1}%, mean delta {:.4}",
        report.samples.len(),
        100.0 * report.fraction_positive,
        report.mean_delta
    );
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.eta.is_nan() || g.eta <= 0.0 {
        return Err(udnmt::Error::Config("--eta must be positive".into()).into());
    }
    g.tfidf(&TfidfConfig::default()).validate()?;
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(g, a),
        Command::Train(a) => run_train(g, a),
        Command::Translate(a) => run_translate(g, a),
        Command::Repl(a) => run_repl(g, a),
        Command::Evaluate(a) => run_evaluate(g, a),
        Command::MarginAnalysis(a) => run_margin(g, a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            process::exit(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", udnmt_cli::describe(&e));
        process::exit(exit_code(&e));
    }
}
