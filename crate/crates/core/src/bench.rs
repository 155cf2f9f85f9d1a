//! Synthetic pass-ordering benchmark.
//!
//! A task is a program stand-in: a deterministic, order-sensitive scorer over
//! sequences of pass flags, reporting percent improvement over the default
//! pipeline (which scores 0). Tasks drawn from one [`TaskFamily`] share most
//! of their structure, so a model trained on autotuned labels from some
//! tasks transfers to held-out ones.
//!
//! [`evaluate`] runs decoding methods on a task suite and reports, for each
//! sample budget n, the mean best-of-n improvement and the mean number of
//! distinct (and distinct regex-valid) samples.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{greedy_decode, nucleus_sample, random_sample_from, topk_sample, NucleusConfig};
use crate::guide::{self, Guide, GuideError};
use crate::model::{format_corpus, ModelError, NGramModel, SequenceModel};
use crate::rng::{derive_seed, RngStream};
use crate::sampler::{priority_sample, InvalidPolicy, PriorityMetric, SampleError, SampleSet, SamplerConfig};
use crate::vocab::{Token, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad method `{0}`")]
    BadMethod(String),
    #[error("bad task parameters: {0}")]
    BadTask(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Guide(#[from] GuideError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const EOS_SURFACE: &str = "</s>";

/// Flag names, in vocabulary order. Families with more flags than names get
/// `-pass-N` fillers.
pub const PASS_NAMES: &[&str] = &[
    "-mem2reg", "-sroa", "-instcombine", "-simplifycfg", "-gvn", "-licm", "-loop-rotate",
    "-loop-unroll", "-dce", "-adce", "-early-cse", "-jump-threading", "-reassociate", "-sccp",
    "-ipsccp", "-inline", "-globalopt", "-deadargelim", "-tailcallelim", "-memcpyopt", "-dse",
    "-indvars", "-loop-deletion", "-loop-idiom", "-correlated-propagation", "-mergefunc",
    "-constmerge", "-float2int", "-loop-simplify", "-newgvn", "-bdce", "-sink", "-globaldce",
    "-argpromotion", "-functionattrs", "-lower-expect",
];

/// Non-flag tokens in the model vocabulary. Unguided decoding can emit them;
/// the flag regex masks them.
pub const FRAGMENTS: &[&str] = &["-mem2", "reg", "-loop", "combine"];

/// Scores a flag sequence as percent improvement over the default pipeline.
pub trait Scorer: Send + Sync {
    fn score(&self, flags: &[&str]) -> Result<f64, BenchError>;
}

/// Order-sensitive synthetic scorer.
///
/// `raw = Σ gain[f] · decay^(k-1)` over the k-th occurrence of each flag,
/// plus `Σ synergy[a][b] · 0.5^(j-i-1)` over position pairs `i < j`.
/// The result is `scale · tanh(raw / scale)`, bounded by `±scale`.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    index: HashMap<String, usize>,
    gains: Vec<f64>,
    synergy: Vec<f64>,
    decay: f64,
    scale: f64,
}

impl SyntheticScorer {
    pub fn score_indices(&self, flags: &[usize]) -> f64 {
        let n = self.gains.len();
        let mut seen = vec![0i32; n];
        let mut raw = 0.0;
        for &f in flags {
            raw += self.gains[f] * self.decay.powi(seen[f]);
            seen[f] += 1;
        }
        for i in 0..flags.len() {
            let mut w = 1.0;
            for &b in &flags[i + 1..] {
                raw += self.synergy[flags[i] * n + b] * w;
                w *= 0.5;
            }
        }
        self.scale * (raw / self.scale).tanh()
    }
}

impl Scorer for SyntheticScorer {
    fn score(&self, flags: &[&str]) -> Result<f64, BenchError> {
        let idx = flags
            .iter()
            .map(|f| self.index.get(*f).copied().ok_or_else(|| BenchError::Scorer(format!("unknown flag `{f}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.score_indices(&idx))
    }
}

/// Line-protocol subprocess scorer: one space-separated flag sequence per
/// input line, one decimal score per output line.
pub struct ExternalScorer {
    command: String,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ExternalScorer {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self, BenchError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { command: command.to_string(), io: Mutex::new((child, stdin, stdout)) })
    }
}

impl Scorer for ExternalScorer {
    fn score(&self, flags: &[&str]) -> Result<f64, BenchError> {
        let mut guard = self.io.lock().map_err(|_| BenchError::Scorer("scorer lock poisoned".into()))?;
        let (_, stdin, stdout) = &mut *guard;
        writeln!(stdin, "{}", flags.join(" "))?;
        stdin.flush()?;
        let mut line = String::new();
        if stdout.read_line(&mut line)? == 0 {
            return Err(BenchError::Scorer(format!("`{}` closed its output", self.command)));
        }
        line.trim()
            .parse::<f64>()
            .map_err(|_| BenchError::Scorer(format!("`{}` printed `{}`, not a number", self.command, line.trim())))
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.io.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

impl fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalScorer").field("command", &self.command).finish()
    }
}

/// `(f1|f2|...)( (f1|f2|...))*` over the given flag surfaces.
pub fn flag_regex<S: AsRef<str>>(flags: &[S]) -> String {
    let alt = flags.iter().map(|f| guide::escape(f.as_ref())).collect::<Vec<_>>().join("|");
    format!("({alt})( ({alt}))*")
}

/// Shared structure of a suite of tasks.
#[derive(Debug, Clone)]
pub struct TaskFamily {
    seed: u64,
    max_flags: usize,
    vocab: Arc<Vocabulary>,
    flags: Vec<Token>,
    gains: Vec<f64>,
    synergy: Vec<f64>,
}

const FAMILY_GAIN_MEAN: f64 = -0.8;
const FAMILY_GAIN_SD: f64 = 1.5;
const FAMILY_SYNERGY_RATE: f64 = 0.08;
const FAMILY_SYNERGY_SD: f64 = 2.0;
const TASK_GAIN_SD: f64 = 0.6;
const TASK_SYNERGY_RATE: f64 = 0.03;
const TASK_SYNERGY_SD: f64 = 1.5;
const REPEAT_DECAY: f64 = 0.3;
const SCORE_SCALE: f64 = 20.0;

impl TaskFamily {
    pub fn new(seed: u64, num_flags: usize, max_flags: usize) -> Result<Self, BenchError> {
        if num_flags < 2 {
            return Err(BenchError::BadTask(format!("need at least 2 flags, got {num_flags}")));
        }
        if max_flags < 1 {
            return Err(BenchError::BadTask("max_flags must be >= 1".into()));
        }
        let mut surfaces: Vec<String> = (0..num_flags)
            .map(|i| PASS_NAMES.get(i).map_or_else(|| format!("-pass-{i}"), |s| s.to_string()))
            .collect();
        surfaces.extend(FRAGMENTS.iter().map(|s| s.to_string()));
        surfaces.push(EOS_SURFACE.to_string());
        let vocab = Vocabulary::with_eos_last(surfaces)?;
        let flags = (0..num_flags).map(Token::from).collect();

        let mut rng = RngStream::new(seed);
        let gains = (0..num_flags).map(|_| FAMILY_GAIN_MEAN + FAMILY_GAIN_SD * rng.normal()).collect();
        let synergy = sparse_normal(&mut rng, num_flags * num_flags, FAMILY_SYNERGY_RATE, FAMILY_SYNERGY_SD);
        Ok(Self { seed, max_flags, vocab: Arc::new(vocab), flags, gains, synergy })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn flags(&self) -> &[Token] {
        &self.flags
    }

    pub fn max_flags(&self) -> usize {
        self.max_flags
    }

    pub fn regex(&self) -> String {
        let surfaces: Vec<&str> =
            self.flags.iter().map(|&t| self.vocab.surface(t).expect("flag ids are valid")).collect();
        flag_regex(&surfaces)
    }

    pub fn guide(&self) -> Result<Guide, BenchError> {
        Ok(Guide::compile(&self.regex(), &self.vocab)?)
    }

    /// The `index`-th task: family tables plus task-specific perturbations.
    pub fn task(&self, index: usize) -> PassTask {
        let n = self.flags.len();
        let seed = derive_seed(self.seed, index as u64);
        let mut rng = RngStream::new(seed);
        let gains: Vec<f64> = self.gains.iter().map(|g| g + TASK_GAIN_SD * rng.normal()).collect();
        let extra = sparse_normal(&mut rng, n * n, TASK_SYNERGY_RATE, TASK_SYNERGY_SD);
        let synergy = self.synergy.iter().zip(extra).map(|(a, b)| a + b).collect();
        let index_map = self
            .flags
            .iter()
            .enumerate()
            .map(|(i, &t)| (self.vocab.surface(t).expect("flag ids are valid").to_string(), i))
            .collect();
        let scorer = SyntheticScorer { index: index_map, gains, synergy, decay: REPEAT_DECAY, scale: SCORE_SCALE };
        let mut is_flag = vec![false; self.vocab.len()];
        for &t in &self.flags {
            is_flag[t.index()] = true;
        }
        PassTask {
            index,
            seed,
            vocab: self.vocab.clone(),
            flags: self.flags.clone(),
            is_flag,
            baseline_score: 0.0,
            scorer: Arc::new(scorer),
            max_flags: self.max_flags,
        }
    }

    pub fn tasks(&self, range: std::ops::Range<usize>) -> Vec<PassTask> {
        range.map(|i| self.task(i)).collect()
    }
}

fn sparse_normal(rng: &mut RngStream, len: usize, rate: f64, sd: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let hit = rng.next_f64() < rate;
            let w = sd * rng.normal();
            if hit { w } else { 0.0 }
        })
        .collect()
}

/// One benchmark program.
#[derive(Clone)]
pub struct PassTask {
    pub index: usize,
    pub seed: u64,
    vocab: Arc<Vocabulary>,
    flags: Vec<Token>,
    is_flag: Vec<bool>,
    /// Score of the default pipeline; improvements are relative to it.
    pub baseline_score: f64,
    scorer: Arc<dyn Scorer>,
    pub max_flags: usize,
}

impl fmt::Debug for PassTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PassTask")
            .field("index", &self.index)
            .field("seed", &self.seed)
            .field("num_flags", &self.flags.len())
            .field("max_flags", &self.max_flags)
            .finish()
    }
}

/// Task 0 of the family seeded with `seed`.
pub fn make_task(seed: u64, num_flags: usize, max_flags: usize) -> Result<PassTask, BenchError> {
    Ok(TaskFamily::new(seed, num_flags, max_flags)?.task(0))
}

impl PassTask {
    pub fn flag_vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn flags(&self) -> &[Token] {
        &self.flags
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn Scorer>) -> Self {
        self.scorer = scorer;
        self
    }

    /// Non-empty and made only of legal flags (EOS optional at the end).
    pub fn is_valid(&self, tokens: &[Token]) -> bool {
        let body = self.body(tokens);
        !body.is_empty() && body.iter().all(|t| self.is_flag.get(t.index()).copied().unwrap_or(false))
    }

    fn body<'a>(&self, tokens: &'a [Token]) -> &'a [Token] {
        let end = tokens.iter().position(|&t| t == self.vocab.eos()).unwrap_or(tokens.len());
        &tokens[..end]
    }

    /// Scores a valid flag sequence; the empty sequence scores the baseline.
    pub fn score_flags(&self, flags: &[Token]) -> Result<f64, BenchError> {
        if flags.is_empty() {
            return Ok(self.baseline_score);
        }
        let surfaces = flags.iter().map(|&t| self.vocab.surface(t)).collect::<Result<Vec<_>, _>>()?;
        self.scorer.score(&surfaces)
    }

    /// Scores a decoded sample. Invalid samples score the baseline under
    /// `Reject`; under `Fallback` their non-flag tokens are dropped first.
    pub fn score_sample(&self, tokens: &[Token], policy: InvalidPolicy) -> Result<f64, BenchError> {
        if self.is_valid(tokens) {
            return self.score_flags(self.body(tokens));
        }
        match policy {
            InvalidPolicy::Reject => Ok(self.baseline_score),
            InvalidPolicy::Fallback => {
                let kept: Vec<Token> =
                    self.body(tokens).iter().copied().filter(|t| self.is_flag[t.index()]).collect();
                self.score_flags(&kept)
            }
        }
    }
}

/// Best of `budget` random legal sequences. Ties keep the earliest.
pub fn autotune(task: &PassTask, budget: usize, seed: u64) -> Result<(Vec<Token>, f64), BenchError> {
    if budget == 0 {
        return Err(BenchError::BadTask("autotune budget must be >= 1".into()));
    }
    let cands = random_sample_from(&task.flags, task.vocab.eos(), task.max_flags, seed, budget);
    let mut best: Option<(Vec<Token>, f64)> = None;
    for r in cands.records {
        let s = task.score_sample(&r.tokens, InvalidPolicy::Reject)?;
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((r.tokens, s));
        }
    }
    Ok(best.expect("budget >= 1"))
}

/// One autotuned label per task, EOS-terminated, in task order. Task `i`
/// searches with `derive_seed(seed, task.index)`.
pub fn build_training_corpus(tasks: &[PassTask], budget: usize, seed: u64) -> Result<Vec<Vec<Token>>, BenchError> {
    if tasks.is_empty() {
        return Err(BenchError::BadTask("no tasks".into()));
    }
    tasks
        .par_iter()
        .map(|t| autotune(t, budget, derive_seed(seed, t.index as u64)).map(|(seq, _)| seq))
        .collect()
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Vec<Token>], vocab: &Vocabulary) -> Result<(), BenchError> {
    std::fs::write(path, format_corpus(corpus, vocab)?)?;
    Ok(())
}

/// A decoding method under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Priority { metric: PriorityMetric, max_branch: Option<usize>, guided: bool },
    Greedy { guided: bool },
    Nucleus { temperature: f64, top_p: f64, guided: bool },
    TopK { k: usize, temperature: f64, guided: bool },
    Random,
    Autotuner,
}

impl Method {
    /// Parses names such as `priority`, `priority-noregex-geo-mb3`,
    /// `greedy`, `nucleus-t1.2`, `nucleus-t1.4-p0.9-regex`, `topk-k5-t1.0`,
    /// `random`, `autotuner`.
    pub fn parse(name: &str) -> Result<Self, BenchError> {
        let bad = || BenchError::BadMethod(name.to_string());
        let mut parts = name.split('-');
        let base = parts.next().ok_or_else(bad)?;
        let opts: Vec<&str> = parts.collect();
        let num = |s: &str| s.parse::<f64>().ok().filter(|x| x.is_finite());
        match base {
            "priority" => {
                let (mut metric, mut max_branch, mut guided) = (PriorityMetric::LastTokenProb, None, true);
                for o in opts {
                    match o {
                        "noregex" => guided = false,
                        "geo" => metric = PriorityMetric::GeometricMean,
                        _ => match o.strip_prefix("mb").and_then(|v| v.parse::<usize>().ok()) {
                            Some(b) if b >= 1 => max_branch = Some(b),
                            _ => return Err(bad()),
                        },
                    }
                }
                Ok(Method::Priority { metric, max_branch, guided })
            }
            "greedy" => match opts.as_slice() {
                [] => Ok(Method::Greedy { guided: false }),
                ["regex"] => Ok(Method::Greedy { guided: true }),
                _ => Err(bad()),
            },
            "nucleus" | "topk" => {
                let (mut t, mut p, mut k, mut guided) = (1.0, 0.95, None, false);
                for o in opts {
                    if o == "regex" {
                        guided = true;
                    } else if let Some(v) = o.strip_prefix('t').and_then(num) {
                        t = v;
                    } else if let Some(v) = o.strip_prefix('p').and_then(num) {
                        p = v;
                    } else if let Some(v) = o.strip_prefix('k').and_then(|v| v.parse::<usize>().ok()) {
                        k = Some(v);
                    } else {
                        return Err(bad());
                    }
                }
                if base == "nucleus" {
                    Ok(Method::Nucleus { temperature: t, top_p: p, guided })
                } else {
                    Ok(Method::TopK { k: k.ok_or_else(bad)?, temperature: t, guided })
                }
            }
            "random" if opts.is_empty() => Ok(Method::Random),
            "autotuner" if opts.is_empty() => Ok(Method::Autotuner),
            _ => Err(bad()),
        }
    }

    /// Canonical name; `parse(name())` round-trips.
    pub fn name(&self) -> String {
        match self {
            Method::Priority { metric, max_branch, guided } => {
                let mut s = "priority".to_string();
                if !guided {
                    s.push_str("-noregex");
                }
                if *metric == PriorityMetric::GeometricMean {
                    s.push_str("-geo");
                }
                if let Some(b) = max_branch {
                    s.push_str(&format!("-mb{b}"));
                }
                s
            }
            Method::Greedy { guided } => if *guided { "greedy-regex" } else { "greedy" }.to_string(),
            Method::Nucleus { temperature, top_p, guided } => {
                let mut s = format!("nucleus-t{temperature}");
                if *top_p != 0.95 {
                    s.push_str(&format!("-p{top_p}"));
                }
                if *guided {
                    s.push_str("-regex");
                }
                s
            }
            Method::TopK { k, temperature, guided } => {
                format!("topk-k{k}-t{temperature}{}", if *guided { "-regex" } else { "" })
            }
            Method::Random => "random".into(),
            Method::Autotuner => "autotuner".into(),
        }
    }

    /// The standard line-up: priority variants, greedy, the nucleus
    /// temperature sweep, random search and the autotuner.
    pub fn default_suite() -> Vec<Method> {
        let mut v: Vec<Method> = [
            "priority",
            "priority-noregex",
            "priority-mb3",
            "priority-mb5",
            "priority-geo",
            "priority-geo-mb3",
            "priority-geo-mb5",
            "greedy",
        ]
        .iter()
        .map(|n| Method::parse(n).expect("built-in names parse"))
        .collect();
        for t in [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6] {
            v.push(Method::Nucleus { temperature: t, top_p: 0.95, guided: false });
        }
        v.push(Method::Random);
        v.push(Method::Autotuner);
        v
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Sample budgets n, ascending.
    pub budgets: Vec<usize>,
    pub seed: u64,
    pub invalid_policy: InvalidPolicy,
    pub autotune_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { budgets: vec![1, 3, 5, 10, 30, 100], seed: 0, invalid_policy: InvalidPolicy::Fallback, autotune_budget: 2000 }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    pub n: usize,
    pub mean_improvement_pct: f64,
    pub mean_unique_raw: f64,
    pub mean_unique_valid: f64,
    pub wall_ms: u128,
}

/// Per-task curves of one method, indexed `[task][budget]`.
#[derive(Debug, Clone)]
pub struct MethodCurves {
    pub method: String,
    pub best: Vec<Vec<f64>>,
    pub unique_raw: Vec<Vec<usize>>,
    pub unique_valid: Vec<Vec<usize>>,
    /// Every sample's score in emission order, per task.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub budgets: Vec<usize>,
    pub records: Vec<BenchRecord>,
    pub curves: Vec<MethodCurves>,
}

impl Evaluation {
    pub fn curves_for(&self, method: &str) -> Option<&MethodCurves> {
        self.curves.iter().find(|c| c.method == method)
    }

    pub fn record(&self, method: &str, n: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.method == method && r.n == n)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        write_csv(&self.records, out)
    }
}

pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "n", "mean_improvement_pct", "mean_unique_raw", "mean_unique_valid", "wall_ms"])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.n.to_string(),
            format!("{:.4}", r.mean_improvement_pct),
            format!("{:.2}", r.mean_unique_raw),
            format!("{:.2}", r.mean_unique_valid),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const RANDOM_SALT: u64 = 0x5241_4e44;
const AUTOTUNE_SALT: u64 = 0x4155_544f;

/// `n` samples of `method` (one for greedy). Guided methods need `guide`;
/// when it is given, every record's `regex_valid` is checked against it.
/// Random draws its sequences from `pool`, at most `max_flags` long. The
/// autotuner needs a task and is rejected here.
pub fn sample_with<M: SequenceModel + ?Sized>(
    method: &Method,
    model: &M,
    guide: Option<&Arc<Guide>>,
    pool: &[Token],
    max_flags: usize,
    n: usize,
    seed: u64,
) -> Result<SampleSet, BenchError> {
    let need = |guided: bool| -> Result<Option<&Guide>, BenchError> {
        match (guided, guide) {
            (false, _) => Ok(None),
            (true, Some(g)) => Ok(Some(g.as_ref())),
            (true, None) => Err(BenchError::BadMethod(format!("{method} needs a regex"))),
        }
    };
    let mut set = match method {
        Method::Priority { metric, max_branch, guided } => {
            need(*guided)?;
            let config = SamplerConfig::new(n)
                .with_metric(*metric)
                .with_max_branch(*max_branch)
                .with_guide(if *guided { guide.cloned() } else { None })
                .with_validator(guide.cloned());
            priority_sample(model, &config)?
        }
        Method::Greedy { guided } => {
            SampleSet { records: vec![greedy_decode(model, need(*guided)?)?], exhausted: false }
        }
        Method::Nucleus { temperature, top_p, guided } => {
            nucleus_sample(model, &NucleusConfig::new(*top_p, *temperature, seed, n), need(*guided)?)?
        }
        Method::TopK { k, temperature, guided } => {
            topk_sample(model, *k, *temperature, seed, n, need(*guided)?)?
        }
        Method::Random => {
            if pool.is_empty() || max_flags == 0 {
                return Err(BenchError::BadMethod("random needs at least one token and max_flags >= 1".into()));
            }
            random_sample_from(pool, model.vocab().eos(), max_flags, seed, n)
        }
        Method::Autotuner => return Err(BenchError::BadMethod("autotuner only runs inside the benchmark".into())),
    };
    if let Some(g) = guide {
        for r in &mut set.records {
            r.regex_valid = g.accepts(&r.tokens);
        }
    }
    Ok(set)
}

/// Samples of one method on one task, in emission order.
fn run_method<M: SequenceModel + ?Sized>(
    method: &Method,
    task: &PassTask,
    model: &M,
    guide: &Arc<Guide>,
    n: usize,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Token>>, BenchError> {
    let seed = match method {
        Method::Autotuner => {
            let seed = derive_seed(cfg.seed ^ AUTOTUNE_SALT, task.index as u64);
            let (best, _) = autotune(task, cfg.autotune_budget, seed)?;
            return Ok(vec![best]);
        }
        Method::Random => derive_seed(cfg.seed ^ RANDOM_SALT, task.index as u64),
        _ => derive_seed(cfg.seed, task.index as u64),
    };
    let set = sample_with(method, model, Some(guide), &task.flags, task.max_flags, n, seed)?;
    Ok(set.records.into_iter().map(|r| r.tokens).collect())
}

/// Per-task scores, best-of-n, unique raw and unique valid counts.
type TaskCurves = (Vec<f64>, Vec<f64>, Vec<usize>, Vec<usize>);

/// Runs every method on every task and aggregates best-of-n curves.
pub fn evaluate<M: SequenceModel + Sync + ?Sized>(
    methods: &[Method],
    tasks: &[PassTask],
    model: &M,
    guide: &Arc<Guide>,
    cfg: &EvalConfig,
) -> Result<Evaluation, BenchError> {
    if tasks.is_empty() {
        return Err(BenchError::BadTask("no tasks".into()));
    }
    let mut budgets = cfg.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.first().is_none_or(|&b| b == 0) {
        return Err(BenchError::BadTask("budgets must be >= 1".into()));
    }
    let n_max = *budgets.last().unwrap();
    let mut records = Vec::new();
    let mut curves = Vec::new();
    for method in methods {
        let started = Instant::now();
        let per_task: Vec<TaskCurves> = tasks
            .par_iter()
            .map(|task| {
                let samples = run_method(method, task, model, guide, n_max, cfg)?;
                let scores = samples
                    .iter()
                    .map(|s| task.score_sample(s, cfg.invalid_policy))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut best = Vec::with_capacity(budgets.len());
                let mut raw = Vec::with_capacity(budgets.len());
                let mut valid = Vec::with_capacity(budgets.len());
                for &n in &budgets {
                    let upto = n.min(samples.len());
                    best.push(scores[..upto].iter().copied().fold(f64::NEG_INFINITY, f64::max).max(
                        if upto == 0 { task.baseline_score } else { f64::NEG_INFINITY },
                    ));
                    let mut seen_raw = HashSet::new();
                    let mut seen_valid = HashSet::new();
                    for s in &samples[..upto] {
                        let body = task.body(s);
                        seen_raw.insert(body);
                        if task.is_valid(s) {
                            seen_valid.insert(body);
                        }
                    }
                    raw.push(seen_raw.len());
                    valid.push(seen_valid.len());
                }
                Ok((scores, best, raw, valid))
            })
            .collect::<Result<_, BenchError>>()?;
        let wall_ms = started.elapsed().as_millis();
        let name = method.name();
        let count = tasks.len() as f64;
        for (j, &n) in budgets.iter().enumerate() {
            records.push(BenchRecord {
                method: name.clone(),
                n,
                mean_improvement_pct: per_task.iter().map(|t| t.1[j]).sum::<f64>() / count,
                mean_unique_raw: per_task.iter().map(|t| t.2[j] as f64).sum::<f64>() / count,
                mean_unique_valid: per_task.iter().map(|t| t.3[j] as f64).sum::<f64>() / count,
                wall_ms,
            });
        }
        let mut c = MethodCurves { method: name, best: vec![], unique_raw: vec![], unique_valid: vec![], scores: vec![] };
        for (scores, best, raw, valid) in per_task {
            c.scores.push(scores);
            c.best.push(best);
            c.unique_raw.push(raw);
            c.unique_valid.push(valid);
        }
        curves.push(c);
    }
    Ok(Evaluation { budgets, records, curves })
}

/// End-to-end benchmark parameters.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seed: u64,
    pub num_flags: usize,
    pub max_flags: usize,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub autotune_budget: usize,
    pub order: usize,
    pub alpha: f64,
    pub eval: EvalConfig,
    pub methods: Vec<Method>,
    pub scorer_cmd: Option<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_flags: 24,
            max_flags: 8,
            train_tasks: 200,
            eval_tasks: 200,
            autotune_budget: 2000,
            order: 3,
            alpha: 0.01,
            eval: EvalConfig::default(),
            methods: Method::default_suite(),
            scorer_cmd: None,
        }
    }
}

pub struct BenchReport {
    pub family: TaskFamily,
    pub corpus: Vec<Vec<Token>>,
    pub model: NGramModel,
    pub evaluation: Evaluation,
}

/// Labels `train_tasks` tasks with the autotuner, trains an n-gram model on
/// the labels and evaluates all methods on the next `eval_tasks` tasks of
/// the same family.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let family = TaskFamily::new(cfg.seed, cfg.num_flags, cfg.max_flags)?;
    let external: Option<Arc<dyn Scorer>> = match &cfg.scorer_cmd {
        Some(cmd) => Some(Arc::new(ExternalScorer::spawn(cmd)?)),
        None => None,
    };
    let attach = |t: PassTask| match &external {
        Some(s) => t.with_scorer(s.clone()),
        None => t,
    };
    let train: Vec<PassTask> = family.tasks(0..cfg.train_tasks).into_iter().map(attach).collect();
    let eval: Vec<PassTask> =
        family.tasks(cfg.train_tasks..cfg.train_tasks + cfg.eval_tasks).into_iter().map(attach).collect();
    let corpus = build_training_corpus(&train, cfg.autotune_budget, cfg.seed)?;
    let model = NGramModel::train((**family.vocab()).clone(), &corpus, cfg.order, cfg.alpha)?
        .with_max_length(cfg.max_flags + 1)?;
    let guide = Arc::new(family.guide()?);
    let eval_cfg = EvalConfig { seed: cfg.seed, autotune_budget: cfg.autotune_budget, ..cfg.eval.clone() };
    let evaluation = evaluate(&cfg.methods, &eval, &model, &guide, &eval_cfg)?;
    Ok(BenchReport { family, corpus, model, evaluation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_family() -> TaskFamily {
        TaskFamily::new(1, 6, 4).unwrap()
    }

    #[test]
    fn tasks_are_reproducible() {
        let f = small_family();
        let a = f.task(3);
        let b = TaskFamily::new(1, 6, 4).unwrap().task(3);
        let seq: Vec<Token> = vec![Token(0), Token(2), Token(1)];
        assert_eq!(a.score_flags(&seq).unwrap(), b.score_flags(&seq).unwrap());
        assert_ne!(a.score_flags(&seq).unwrap(), f.task(4).score_flags(&seq).unwrap());
        assert_eq!(a.score_flags(&[]).unwrap(), 0.0);
    }

    #[test]
    fn scorer_is_order_sensitive_and_bounded() {
        let t = make_task(1, 12, 8).unwrap();
        let mut differs = false;
        for a in 0..12u32 {
            for b in 0..12u32 {
                let ab = t.score_flags(&[Token(a), Token(b)]).unwrap();
                let ba = t.score_flags(&[Token(b), Token(a)]).unwrap();
                differs |= (ab - ba).abs() > 1e-9;
                assert!(ab.abs() <= SCORE_SCALE);
            }
        }
        assert!(differs);
    }

    #[test]
    fn invalid_sample_scoring() {
        let f = small_family();
        let t = f.task(0);
        let v = f.vocab();
        let frag = v.get("reg").unwrap();
        let eos = v.eos();
        let flag = Token(1);
        assert!(!t.is_valid(&[eos]));
        assert!(!t.is_valid(&[flag, frag, eos]));
        assert!(t.is_valid(&[flag, eos]));
        assert_eq!(t.score_sample(&[frag, eos], InvalidPolicy::Fallback).unwrap(), 0.0);
        assert_eq!(t.score_sample(&[flag, frag, eos], InvalidPolicy::Reject).unwrap(), 0.0);
        assert_eq!(
            t.score_sample(&[flag, frag, eos], InvalidPolicy::Fallback).unwrap(),
            t.score_flags(&[flag]).unwrap()
        );
    }

    #[test]
    fn flag_regex_matches_validity() {
        let f = small_family();
        let g = f.guide().unwrap();
        let t = f.task(0);
        let v = f.vocab();
        let mut rng = RngStream::new(5);
        for _ in 0..300 {
            let len = rng.below(5) as usize;
            let mut seq: Vec<Token> = (0..len).map(|_| Token(rng.below(v.len() as u64 - 1) as u32)).collect();
            seq.push(v.eos());
            assert_eq!(g.accepts(&seq), t.is_valid(&seq), "{seq:?}");
        }
        assert!(g.matches_text("-mem2reg -sroa"));
        assert!(!g.matches_text("-mem2 reg"));
    }

    #[test]
    fn autotune_prefix_property() {
        let t = make_task(1, 10, 6).unwrap();
        let (s1, b1) = autotune(&t, 1, 9).unwrap();
        let first = random_sample_from(t.flags(), t.flag_vocab().eos(), 6, 9, 1);
        assert_eq!(s1, first.records[0].tokens);
        assert_eq!(b1, t.score_flags(&s1[..s1.len() - 1]).unwrap());
        let (_, b50) = autotune(&t, 50, 9).unwrap();
        let (_, b500) = autotune(&t, 500, 9).unwrap();
        assert!(b1 <= b50 && b50 <= b500);
        assert!(autotune(&t, 0, 9).is_err());
    }

    #[test]
    fn corpus_lines_are_valid() {
        let f = small_family();
        let tasks = f.tasks(0..5);
        let corpus = build_training_corpus(&tasks, 20, 3).unwrap();
        assert_eq!(corpus.len(), 5);
        let g = f.guide().unwrap();
        assert!(corpus.iter().all(|s| g.accepts(s) && *s.last().unwrap() == f.vocab().eos()));
        assert_eq!(build_training_corpus(&tasks[..1], 20, 3).unwrap().len(), 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::default_suite() {
            assert_eq!(Method::parse(&m.name()).unwrap(), m);
        }
        for n in ["priority-noregex-geo-mb3", "nucleus-t1.4-p0.9-regex", "topk-k5-t0.7", "greedy-regex"] {
            assert_eq!(Method::parse(n).unwrap().name(), n);
        }
        for n in ["", "beam", "priority-mb0", "priority-xyz", "topk-t1", "random-3", "nucleus-tx"] {
            assert!(Method::parse(n).is_err(), "{n}");
        }
    }

    #[test]
    fn external_scorer_line_protocol() {
        let s = ExternalScorer::spawn("while read -r l; do set -- $l; echo \"$#.5\"; done").unwrap();
        assert_eq!(s.score(&["-a", "-b"]).unwrap(), 2.5);
        assert_eq!(s.score(&["-a"]).unwrap(), 1.5);
        let bad = ExternalScorer::spawn("echo nope").unwrap();
        assert!(bad.score(&["-a"]).is_err());
    }

    #[test]
    fn small_evaluation_shapes() {
        let cfg = BenchConfig {
            train_tasks: 20,
            eval_tasks: 8,
            num_flags: 8,
            max_flags: 5,
            autotune_budget: 100,
            eval: EvalConfig { budgets: vec![1, 3, 10], ..EvalConfig::default() },
            methods: ["priority", "greedy", "nucleus-t1.0", "random", "autotuner"]
                .iter()
                .map(|m| Method::parse(m).unwrap())
                .collect(),
            ..BenchConfig::default()
        };
        let report = run_bench(&cfg).unwrap();
        let ev = &report.evaluation;
        assert_eq!(ev.records.len(), 15);
        for c in &ev.curves {
            for task in &c.best {
                assert!(task.windows(2).all(|w| w[0] <= w[1]), "{}", c.method);
            }
        }
        let greedy = ev.curves_for("greedy").unwrap();
        assert!(greedy.best.iter().all(|b| b.iter().all(|&x| x == b[0])));
        let ps = ev.curves_for("priority").unwrap();
        assert!(ps.unique_valid.iter().all(|u| u == &vec![1, 3, 10]));
        let mut buf = Vec::new();
        ev.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,n,mean_improvement_pct,mean_unique_raw,mean_unique_valid,wall_ms\n"));
        assert_eq!(text.lines().count(), 16);
    }
}
