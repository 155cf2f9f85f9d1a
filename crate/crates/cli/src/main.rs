//! `psample`: sampling, guide inspection, n-gram training and the
//! pass-ordering benchmark from the command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use priority_sampling::bench::{
    build_training_corpus, run_bench, sample_with, write_corpus, BenchConfig, BenchError, EvalConfig, Method,
    TaskFamily,
};
use priority_sampling::model::parse_corpus;
use priority_sampling::{
    priority_sample, Guide, InvalidPolicy, NGramModel, PriorityMetric, SampleError, SampleSet, SamplerConfig,
    SequenceModel, Token, Vocabulary,
};

#[derive(Parser)]
#[command(name = "psample", version, about = "Priority sampling and decoding baselines for small sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw samples from an n-gram model.
    Sample(SampleArgs),
    /// Run several methods on one model and summarize their samples.
    Compare(CompareArgs),
    /// Run the synthetic pass-ordering benchmark and write a CSV.
    Bench(BenchArgs),
    /// Show the states and allowed tokens of a regex guide.
    GuideInspect(GuideArgs),
    /// Train an n-gram model on a corpus.
    Train(TrainArgs),
    /// Write the vocabulary, flag regex and autotuned corpus of a task family.
    MakeTask(MakeTaskArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMethod {
    Priority,
    Greedy,
    Nucleus,
    Topk,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Last,
    Geo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Fallback,
    Reject,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// N-gram model file.
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file. Defaults to the one named in the model header,
    /// relative to the model file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Override the model's maximum sequence length (EOS included).
    #[arg(long)]
    max_length: Option<usize>,
}

#[derive(clap::Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "priority")]
    method: SampleMethod,
    /// Restrict decoding to this regex.
    #[arg(long)]
    regex: Option<String>,
    /// Only record whether samples match this regex.
    #[arg(long, conflicts_with = "regex")]
    check: Option<String>,
    #[arg(short = 'n', long = "num-samples", default_value_t = 10)]
    n: usize,
    /// Candidates per expansion (priority) or the k of top-k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_branch: Option<usize>,
    #[arg(long, value_enum, default_value = "last")]
    metric: Metric,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Longest random sequence, EOS excluded. Defaults to max_length - 1.
    #[arg(long)]
    max_flags: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Guides the regex-aware methods and defines validity.
    #[arg(long)]
    regex: Option<String>,
    #[arg(short = 'n', long = "num-samples", default_value_t = 20)]
    n: usize,
    /// Comma-separated method names, e.g. priority,nucleus-t1.2,topk-k5-t1.0.
    #[arg(long, default_value = "priority,greedy,nucleus-t1.0,topk-k5-t1.0,random", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Held-out evaluation tasks.
    #[arg(long, default_value_t = 200)]
    tasks: usize,
    /// Autotuner-labelled training tasks.
    #[arg(long, default_value_t = 200)]
    train_tasks: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,30,100")]
    budget_list: Vec<usize>,
    /// Comma-separated method names; defaults to the full suite.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Line-protocol scoring command, run with `sh -c`.
    #[arg(long)]
    scorer_cmd: Option<String>,
    #[arg(long, default_value_t = 24)]
    num_flags: usize,
    #[arg(long, default_value_t = 8)]
    max_flags: usize,
    #[arg(long, default_value_t = 2000)]
    autotune_budget: usize,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "fallback")]
    policy: Policy,
    /// Write 0 in the wall_ms column so output is reproducible.
    #[arg(long)]
    no_timing: bool,
    /// Output CSV path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GuideArgs {
    #[arg(long)]
    regex: String,
    #[arg(long)]
    vocab: PathBuf,
    /// States listed before the listing is cut.
    #[arg(long, default_value_t = 32)]
    max_states: usize,
    /// Tokens listed per state before the listing is cut.
    #[arg(long, default_value_t = 16)]
    max_tokens: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct MakeTaskArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    num_flags: usize,
    #[arg(long, default_value_t = 8)]
    max_flags: usize,
    /// Tasks labelled by the autotuner into corpus.txt.
    #[arg(long, default_value_t = 200)]
    train_tasks: usize,
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Bad flag values detected after parsing; exits with 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some()
            || matches!(c.downcast_ref::<SampleError>(), Some(SampleError::InvalidConfig(_)))
            || matches!(
                c.downcast_ref::<BenchError>(),
                Some(BenchError::BadMethod(_) | BenchError::Sample(SampleError::InvalidConfig(_)))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = match cli.command {
        Cmd::Sample(a) => sample(a, &mut out),
        Cmd::Compare(a) => compare(a, &mut out),
        Cmd::Bench(a) => bench(a, &mut out),
        Cmd::GuideInspect(a) => guide_inspect(a, &mut out),
        Cmd::Train(a) => train(a, &mut out),
        Cmd::MakeTask(a) => make_task(a, &mut out),
    }
    .and_then(|()| out.flush().context("writing output"));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                eprintln!("run `psample --help` for usage");
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Vocabulary path from the model header, relative to the model file.
fn header_vocab(model_path: &Path, text: &str) -> Option<PathBuf> {
    let name = text.lines().take_while(|l| *l != "---").find_map(|l| l.strip_prefix("vocab="))?;
    if name.is_empty() {
        return None;
    }
    Some(model_path.parent().unwrap_or(Path::new(".")).join(name))
}

fn load_model(args: &ModelArgs) -> Result<NGramModel> {
    let text = fs::read_to_string(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let vocab_path = match &args.vocab {
        Some(p) => p.clone(),
        None => header_vocab(&args.model, &text)
            .ok_or_else(|| usage("the model names no vocabulary; pass --vocab"))?,
    };
    let vocab = load_vocab(&vocab_path)?;
    let (model, _) =
        NGramModel::parse(&text, vocab).with_context(|| format!("parsing model {}", args.model.display()))?;
    match args.max_length {
        Some(0) => Err(usage("--max-length must be >= 1")),
        Some(l) => Ok(model.with_max_length(l)?),
        None => Ok(model),
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn compile(regex: &str, vocab: &Vocabulary) -> Result<Arc<Guide>> {
    Ok(Arc::new(Guide::compile(regex, vocab).with_context(|| format!("compiling regex {regex:?}"))?))
}

fn text_of(vocab: &Vocabulary, tokens: &[Token]) -> Result<String> {
    Ok(vocab.detokenize(tokens)?)
}

fn sample(a: SampleArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let vocab = model.vocab().clone();
    if a.n == 0 {
        return Err(usage("-n must be >= 1"));
    }
    let guide = a.regex.as_deref().map(|r| compile(r, &vocab)).transpose()?;
    let check = a.check.as_deref().map(|r| compile(r, &vocab)).transpose()?;
    let guided = guide.is_some();
    let validator = guide.clone().or(check);
    let metric = match a.metric {
        Metric::Last => PriorityMetric::LastTokenProb,
        Metric::Geo => PriorityMetric::GeometricMean,
    };
    let set: SampleSet = match a.method {
        SampleMethod::Priority => {
            let mut cfg = SamplerConfig::new(a.n)
                .with_metric(metric)
                .with_max_branch(a.max_branch)
                .with_guide(guide.clone())
                .with_validator(validator.clone());
            if let Some(k) = a.k {
                cfg = cfg.with_top_k(k);
            }
            if let Some(c) = a.queue_capacity {
                cfg = cfg.with_queue_capacity(c);
            }
            priority_sample(&model, &cfg)?
        }
        other => {
            let method = match other {
                SampleMethod::Greedy => Method::Greedy { guided },
                SampleMethod::Nucleus => Method::Nucleus { temperature: a.temperature, top_p: a.top_p, guided },
                SampleMethod::Topk => Method::TopK {
                    k: a.k.ok_or_else(|| usage("--method topk needs --k"))?,
                    temperature: a.temperature,
                    guided,
                },
                _ => Method::Random,
            };
            let pool: Vec<Token> = vocab.non_eos_tokens().collect();
            let max_flags = a.max_flags.unwrap_or(model.max_length().saturating_sub(1));
            sample_with(&method, &model, validator.as_ref(), &pool, max_flags, a.n, a.seed)?
        }
    };
    match a.format {
        Format::Text => {
            for r in &set.records {
                writeln!(out, "{}\t{}\t{}", r.order, r.branch_score, text_of(&vocab, &r.tokens)?)?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["order", "score", "new_inferences", "regex_valid", "text"])?;
            for r in &set.records {
                w.write_record([
                    r.order.to_string(),
                    r.branch_score.to_string(),
                    r.new_inferences.to_string(),
                    r.regex_valid.to_string(),
                    text_of(&vocab, &r.tokens)?,
                ])?;
            }
            w.flush()?;
        }
    }
    if set.exhausted {
        eprintln!("note: only {} distinct samples exist", set.len());
    }
    Ok(())
}

fn unguided(m: Method) -> Method {
    match m {
        Method::Priority { metric, max_branch, .. } => Method::Priority { metric, max_branch, guided: false },
        Method::Greedy { .. } => Method::Greedy { guided: false },
        Method::Nucleus { temperature, top_p, .. } => Method::Nucleus { temperature, top_p, guided: false },
        Method::TopK { k, temperature, .. } => Method::TopK { k, temperature, guided: false },
        other => other,
    }
}

fn sequence_prob<M: SequenceModel>(model: &M, tokens: &[Token]) -> Result<f64> {
    let mut p = 1.0;
    for i in 0..tokens.len() {
        p *= model.next_distribution(&tokens[..i])?[tokens[i].index()];
    }
    Ok(p)
}

fn compare(a: CompareArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let vocab = model.vocab().clone();
    if a.n == 0 {
        return Err(usage("-n must be >= 1"));
    }
    let guide = a.regex.as_deref().map(|r| compile(r, &vocab)).transpose()?;
    let pool: Vec<Token> = vocab.non_eos_tokens().collect();
    let max_flags = model.max_length().saturating_sub(1);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "samples", "unique_raw", "unique_valid", "best_seq_prob", "mean_seq_prob"])?;
    for name in &a.methods {
        let mut method = Method::parse(name)?;
        if guide.is_none() {
            method = unguided(method);
        }
        let set = sample_with(&method, &model, guide.as_ref(), &pool, max_flags, a.n, a.seed)?;
        let raw: HashSet<&Vec<Token>> = set.records.iter().map(|r| &r.tokens).collect();
        let valid: HashSet<&Vec<Token>> = set.records.iter().filter(|r| r.regex_valid).map(|r| &r.tokens).collect();
        let probs = set.records.iter().map(|r| sequence_prob(&model, &r.tokens)).collect::<Result<Vec<_>>>()?;
        let best = probs.iter().copied().fold(0.0, f64::max);
        let mean = probs.iter().sum::<f64>() / probs.len().max(1) as f64;
        w.write_record([
            name.clone(),
            set.len().to_string(),
            raw.len().to_string(),
            valid.len().to_string(),
            format!("{best:.6}"),
            format!("{mean:.6}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn bench(a: BenchArgs, out: &mut impl Write) -> Result<()> {
    if a.tasks == 0 || a.train_tasks == 0 {
        return Err(usage("--tasks and --train-tasks must be >= 1"));
    }
    if a.budget_list.is_empty() || a.budget_list.contains(&0) {
        return Err(usage("--budget-list entries must be >= 1"));
    }
    let methods = match &a.methods {
        Some(names) => names.iter().map(|n| Method::parse(n)).collect::<Result<Vec<_>, _>>()?,
        None => Method::default_suite(),
    };
    let cfg = BenchConfig {
        seed: a.seed,
        num_flags: a.num_flags,
        max_flags: a.max_flags,
        train_tasks: a.train_tasks,
        eval_tasks: a.tasks,
        autotune_budget: a.autotune_budget,
        order: a.order,
        alpha: a.alpha,
        eval: EvalConfig {
            budgets: a.budget_list.clone(),
            invalid_policy: match a.policy {
                Policy::Fallback => InvalidPolicy::Fallback,
                Policy::Reject => InvalidPolicy::Reject,
            },
            ..EvalConfig::default()
        },
        methods,
        scorer_cmd: a.scorer_cmd.clone(),
    };
    let report = run_bench(&cfg).map_err(|e| match e {
        BenchError::BadTask(m) => usage(m),
        other => other.into(),
    })?;
    let mut records = report.evaluation.records.clone();
    if a.no_timing {
        for r in &mut records {
            r.wall_ms = 0;
        }
    }
    match &a.out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            priority_sampling::bench::write_csv(&records, BufWriter::new(f))?;
            writeln!(out, "wrote {} rows to {}", records.len(), path.display())?;
        }
        None => priority_sampling::bench::write_csv(&records, out)?,
    }
    Ok(())
}

fn guide_inspect(a: GuideArgs, out: &mut impl Write) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let guide = compile(&a.regex, &vocab)?;
    let eos = vocab.eos();
    writeln!(out, "regex: {}", a.regex)?;
    writeln!(out, "vocab: {} tokens", vocab.len())?;
    writeln!(out, "states: {}", guide.state_count())?;
    writeln!(out, "empty: {}", guide.is_empty_language())?;
    match guide.shortest_match_len() {
        Some(l) => writeln!(out, "shortest: {l} tokens including EOS")?,
        None => writeln!(out, "shortest: none")?,
    }
    let mut order = Vec::new();
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([guide.initial()]);
    seen.insert(guide.initial());
    while let Some(s) = queue.pop_front() {
        order.push(s);
        for &t in guide.allowed(s) {
            if t == eos {
                continue;
            }
            let next = guide.step(s, t)?;
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    writeln!(out, "reachable: {}", order.len())?;
    for &s in order.iter().take(a.max_states) {
        let mut tags = Vec::new();
        if s == guide.initial() {
            tags.push("start");
        }
        if guide.is_accepting(s) {
            tags.push("accepting");
        }
        let allowed = guide.allowed(s);
        let mut names = allowed
            .iter()
            .take(a.max_tokens)
            .map(|&t| vocab.surface(t).map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        if allowed.len() > a.max_tokens {
            names.push(format!("... (+{} more)", allowed.len() - a.max_tokens));
        }
        let tag = if tags.is_empty() { String::new() } else { format!(" [{}]", tags.join(", ")) };
        writeln!(out, "state {}{}: {{{}}}", s.0, tag, names.join(", "))?;
    }
    if order.len() > a.max_states {
        writeln!(out, "... (+{} more states)", order.len() - a.max_states)?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let corpus = parse_corpus(&text, &vocab).with_context(|| format!("parsing corpus {}", a.corpus.display()))?;
    if a.order == 0 || !(a.alpha.is_finite() && a.alpha > 0.0) {
        return Err(usage("--order must be >= 1 and --alpha > 0"));
    }
    let mut model = NGramModel::train(vocab, &corpus, a.order, a.alpha)?;
    if let Some(l) = a.max_length {
        if l == 0 {
            return Err(usage("--max-length must be >= 1"));
        }
        model = model.with_max_length(l)?;
    }
    let vocab_ref = vocab_reference(&a.vocab, &a.out);
    model.save(&a.out, &vocab_ref).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(
        out,
        "trained order-{} model on {} sequences (max_length {}) -> {}",
        a.order,
        corpus.len(),
        model.max_length(),
        a.out.display()
    )?;
    Ok(())
}

/// The vocabulary path as seen from the model file's directory when both
/// share one, else as given.
fn vocab_reference(vocab: &Path, model_out: &Path) -> String {
    let vdir = vocab.parent().unwrap_or(Path::new(""));
    let mdir = model_out.parent().unwrap_or(Path::new(""));
    match (vdir == mdir, vocab.file_name()) {
        (true, Some(name)) => name.to_string_lossy().into_owned(),
        _ => vocab.to_string_lossy().into_owned(),
    }
}

fn make_task(a: MakeTaskArgs, out: &mut impl Write) -> Result<()> {
    if a.train_tasks == 0 || a.budget == 0 {
        return Err(usage("--train-tasks and --budget must be >= 1"));
    }
    let family = TaskFamily::new(a.seed, a.num_flags, a.max_flags).map_err(|e| match e {
        BenchError::BadTask(m) => usage(m),
        other => anyhow!(other),
    })?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let vocab = family.vocab();
    vocab.save(a.out_dir.join("vocab.txt"))?;
    fs::write(a.out_dir.join("regex.txt"), format!("{}\n", family.regex()))?;
    let tasks = family.tasks(0..a.train_tasks);
    let corpus = build_training_corpus(&tasks, a.budget, a.seed)?;
    write_corpus(a.out_dir.join("corpus.txt"), &corpus, vocab)?;
    let check = parse_corpus(&fs::read_to_string(a.out_dir.join("corpus.txt"))?, vocab)?;
    if check != corpus {
        bail!("corpus did not round-trip");
    }
    writeln!(
        out,
        "wrote vocab.txt ({} tokens), regex.txt and corpus.txt ({} sequences) to {}",
        vocab.len(),
        corpus.len(),
        a.out_dir.display()
    )?;
    Ok(())
}
