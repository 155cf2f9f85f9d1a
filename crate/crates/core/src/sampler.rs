//! Priority sampling.
//!
//! The first sample is greedy. Every expansion keeps the top-K permitted
//! tokens: the best one continues the current sample and the others are
//! queued as `(priority, prefix + [token])`. Each later sample pops the
//! highest-priority prefix, replays it without calling the model, and
//! continues greedily from there. Prefixes are queued at most once, so
//! samples are unique, and every model call expands a new tree node.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::guide::{Cursor, Guide, GuideError};
use crate::model::{ModelError, SequenceModel};
use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("the guide admits no sequence within max_length {max_length}")]
    EmptyLanguage { max_length: usize },
    #[error("no permitted token with non-zero probability after {position} tokens")]
    NoAllowedToken { position: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Guide(#[from] GuideError),
}

/// Queue priority of an alternative branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorityMetric {
    /// Probability of the alternative token at its position.
    #[default]
    LastTokenProb,
    /// Geometric mean of the token probabilities along the whole prefix.
    GeometricMean,
}

/// How bench scoring treats samples that fail the validity regex in
/// unguided runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InvalidPolicy {
    /// Invalid samples score as the baseline action.
    Reject,
    /// Unknown flags are stripped; the rest is scored.
    #[default]
    Fallback,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub num_samples: usize,
    /// Candidates kept per expansion, the greedy token included.
    pub top_k: usize,
    /// Cap on children per tree node, the greedy child included.
    pub max_branch: Option<usize>,
    pub metric: PriorityMetric,
    pub queue_capacity: usize,
    pub guide: Option<Arc<Guide>>,
    /// Regex used only to set `regex_valid` on unguided runs.
    pub validator: Option<Arc<Guide>>,
    pub invalid_policy: InvalidPolicy,
}

impl SamplerConfig {
    /// `top_k` and `queue_capacity` default to `num_samples`.
    pub fn new(num_samples: usize) -> Self {
        Self {
            num_samples,
            top_k: num_samples,
            max_branch: None,
            metric: PriorityMetric::LastTokenProb,
            queue_capacity: num_samples,
            guide: None,
            validator: None,
            invalid_policy: InvalidPolicy::default(),
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_max_branch(mut self, b: Option<usize>) -> Self {
        self.max_branch = b;
        self
    }

    pub fn with_metric(mut self, m: PriorityMetric) -> Self {
        self.metric = m;
        self
    }

    pub fn with_queue_capacity(mut self, c: usize) -> Self {
        self.queue_capacity = c;
        self
    }

    pub fn with_guide(mut self, g: Option<Arc<Guide>>) -> Self {
        self.guide = g;
        self
    }

    pub fn with_validator(mut self, g: Option<Arc<Guide>>) -> Self {
        self.validator = g;
        self
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::InvalidConfig(m.to_string()));
        if self.num_samples == 0 {
            return bad("num_samples must be >= 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be >= 1");
        }
        if self.max_branch == Some(0) {
            return bad("max_branch must be >= 1");
        }
        Ok(())
    }

    /// Alternatives pushed per expansion.
    fn pushes_per_node(&self) -> usize {
        let by_branch = self.max_branch.map_or(usize::MAX, |b| b - 1);
        (self.top_k - 1).min(by_branch).min(self.queue_capacity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Full sequence, ending in EOS.
    pub tokens: Vec<Token>,
    /// Priority of the popped branch (1.0 for the first sample). Baseline
    /// samplers store the sequence probability under the model instead.
    pub branch_score: f64,
    pub order: usize,
    /// Model calls made while producing this sample.
    pub new_inferences: usize,
    pub regex_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub records: Vec<SampleRecord>,
    /// The queue ran dry before `num_samples` samples.
    pub exhausted: bool,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn texts(&self, vocab: &Vocabulary) -> Vec<String> {
        self.records
            .iter()
            .map(|r| vocab.detokenize(&r.tokens).expect("sampled tokens are valid"))
            .collect()
    }
}

/// Model calls spent on the whole set.
pub fn count_inferences(set: &SampleSet) -> usize {
    set.records.iter().map(|r| r.new_inferences).sum()
}

/// Top `k` permitted tokens with non-zero probability, by descending
/// probability and then ascending id. Without a cursor every token is
/// permitted, EOS included.
pub fn choose_best_tokens(
    distribution: &[f64],
    cursor: Option<&Cursor<'_>>,
    k: usize,
) -> Result<Vec<(f64, Token)>, SampleError> {
    let mut cands: Vec<(f64, Token)> = distribution
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, Token::from(i)))
        .filter(|&(p, t)| p > 0.0 && cursor.is_none_or(|c| c.permits(t)))
        .collect();
    if cands.is_empty() {
        return Err(SampleError::NoAllowedToken { position: cursor.map_or(0, |c| c.position()) });
    }
    let by_rank = |a: &(f64, Token), b: &(f64, Token)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_rank);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_rank);
    Ok(cands)
}

#[derive(Debug, Clone)]
struct QueueEntry {
    prefix: Vec<Token>,
    /// Per-token probabilities along `prefix`; only kept for the
    /// geometric-mean metric.
    token_probs: Vec<f64>,
}

/// Ordered so that the first key is the best: higher score, then earlier
/// insertion.
#[derive(Debug, Clone, Copy)]
struct QueueKey {
    score: f64,
    seq: u64,
}

impl PartialEq for QueueKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueKey {}
impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.seq.cmp(&other.seq))
    }
}

/// Fixed-capacity priority queue. When full, a new entry replaces the worst
/// one only if it ranks strictly better; otherwise it is dropped for good.
struct BoundedQueue {
    entries: BTreeMap<QueueKey, QueueEntry>,
    capacity: usize,
    next_seq: u64,
}

impl BoundedQueue {
    fn new(capacity: usize) -> Self {
        Self { entries: BTreeMap::new(), capacity, next_seq: 0 }
    }

    fn push(&mut self, score: f64, entry: QueueEntry) {
        let key = QueueKey { score, seq: self.next_seq };
        self.next_seq += 1;
        if self.entries.len() == self.capacity {
            let worst = *self.entries.last_key_value().expect("capacity >= 1").0;
            if key >= worst {
                return;
            }
            self.entries.remove(&worst);
        }
        self.entries.insert(key, entry);
    }

    fn pop(&mut self) -> Option<(f64, QueueEntry)> {
        self.entries.pop_first().map(|(k, e)| (k.score, e))
    }
}

fn geometric_mean(log_sum: f64, n: usize) -> f64 {
    (log_sum / n as f64).exp()
}

/// Runs priority sampling and returns up to `num_samples` unique samples in
/// emission order.
pub fn priority_sample<M: SequenceModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
) -> Result<SampleSet, SampleError> {
    config.validate()?;
    let vocab = model.vocab();
    let eos = vocab.eos();
    let max_length = model.max_length();
    let guide = config.guide.as_deref();
    if let Some(g) = guide {
        if g.index().vocab_len() != vocab.len() {
            return Err(SampleError::InvalidConfig("guide was compiled for another vocabulary".into()));
        }
        if g.shortest_match_len().is_none_or(|n| n > max_length) {
            return Err(SampleError::EmptyLanguage { max_length });
        }
    }
    let checker = guide.or(config.validator.as_deref());
    let geometric = config.metric == PriorityMetric::GeometricMean;
    let pushes = config.pushes_per_node();

    let mut queue = BoundedQueue::new(config.queue_capacity);
    let mut records = Vec::with_capacity(config.num_samples);
    let mut exhausted = false;
    let mut mask = QueueEntry { prefix: Vec::new(), token_probs: Vec::new() };
    let mut branch_score = 1.0;

    for order in 0..config.num_samples {
        if order > 0 {
            match queue.pop() {
                Some((score, entry)) => {
                    branch_score = score;
                    mask = entry;
                }
                None => {
                    exhausted = true;
                    break;
                }
            }
        }
        let mut generated: Vec<Token> = Vec::with_capacity(max_length);
        let mut probs: Vec<f64> = Vec::new();
        let mut log_sum = 0.0;
        let mut cursor = guide.map(|g| Cursor::new(g, max_length));
        let mut inferences = 0;
        loop {
            let pos = generated.len();
            let (next, p) = if pos < mask.prefix.len() {
                (mask.prefix[pos], mask.token_probs.get(pos).copied().unwrap_or(1.0))
            } else {
                let dist = model.next_distribution(&generated)?;
                inferences += 1;
                let best = choose_best_tokens(&dist, cursor.as_ref(), config.top_k)
                    .map_err(|_| SampleError::NoAllowedToken { position: pos })?;
                for &(alt_p, alt) in best.iter().skip(1).take(pushes) {
                    let mut prefix = Vec::with_capacity(pos + 1);
                    prefix.extend_from_slice(&generated);
                    prefix.push(alt);
                    let (score, token_probs) = if geometric {
                        let mut tp = probs.clone();
                        tp.push(alt_p);
                        (geometric_mean(log_sum + alt_p.ln(), pos + 1), tp)
                    } else {
                        (alt_p, Vec::new())
                    };
                    queue.push(score, QueueEntry { prefix, token_probs });
                }
                (best[0].1, best[0].0)
            };
            generated.push(next);
            if geometric {
                probs.push(p);
                log_sum += p.ln();
            }
            if let Some(c) = cursor.as_mut() {
                c.advance(next)?;
            }
            if next == eos {
                break;
            }
            if generated.len() >= max_length {
                return Err(SampleError::InvalidConfig(format!(
                    "model produced no EOS within max_length {max_length}"
                )));
            }
        }
        let regex_valid = checker.is_none_or(|g| g.accepts(&generated));
        records.push(SampleRecord {
            tokens: generated,
            branch_score,
            order,
            new_inferences: inferences,
            regex_valid,
        });
    }
    Ok(SampleSet { records, exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guide::compile_guide;
    use crate::model::{CountingModel, TableModel};

    const A: Token = Token(0);
    const B: Token = Token(1);
    const E: Token = Token(2);

    fn abe() -> Vocabulary {
        Vocabulary::with_eos_last(["A", "B", "EOS"]).unwrap()
    }

    fn m1() -> TableModel {
        TableModel::new(abe(), 3, vec![1.0 / 3.0; 3])
            .unwrap()
            .with_entry(vec![], vec![0.6, 0.3, 0.1])
            .unwrap()
            .with_entry(vec![A], vec![0.1, 0.2, 0.7])
            .unwrap()
            .with_entry(vec![B], vec![0.5, 0.1, 0.4])
            .unwrap()
    }

    #[test]
    fn choose_best_examples() {
        let d = [0.6, 0.3, 0.1];
        assert_eq!(choose_best_tokens(&d, None, 2).unwrap(), vec![(0.6, A), (0.3, B)]);
        let vocab = abe();
        let g = compile_guide("B( A| B)*", &vocab).unwrap();
        let mut c = Cursor::new(&g, 5);
        c.advance(B).unwrap();
        // After "B" the guide permits A, B and EOS; restrict to {B, EOS}
        // with a guide that never allows A.
        let g2 = compile_guide("B( B)*", &vocab).unwrap();
        let mut c2 = Cursor::new(&g2, 5);
        c2.advance(B).unwrap();
        assert_eq!(choose_best_tokens(&d, Some(&c2), 3).unwrap(), vec![(0.3, B), (0.1, E)]);
        assert_eq!(choose_best_tokens(&d, Some(&c), 3).unwrap(), vec![(0.6, A), (0.3, B), (0.1, E)]);
        assert_eq!(choose_best_tokens(&[0.5, 0.5, 0.0], None, 3).unwrap(), vec![(0.5, A), (0.5, B)]);
        assert!(matches!(
            choose_best_tokens(&[0.0, 0.0, 1.0], Some(&Cursor::new(&g, 5)), 3),
            Err(SampleError::NoAllowedToken { position: 0 })
        ));
    }

    #[test]
    fn m1_hand_trace() {
        let model = CountingModel::new(m1());
        let set = priority_sample(&model, &SamplerConfig::new(3)).unwrap();
        let got: Vec<(Vec<Token>, f64)> =
            set.records.iter().map(|r| (r.tokens.clone(), r.branch_score)).collect();
        assert_eq!(got, vec![(vec![A, E], 1.0), (vec![B, A, E], 0.3), (vec![B, E], 0.4)]);
        assert_eq!(set.records.iter().map(|r| r.new_inferences).collect::<Vec<_>>(), vec![2, 2, 0]);
        assert_eq!(count_inferences(&set), 4);
        assert_eq!(model.calls(), 4);
        assert!(!set.exhausted);
    }

    #[test]
    fn single_sample_is_greedy() {
        let set = priority_sample(&m1(), &SamplerConfig::new(1)).unwrap();
        assert_eq!(set.records.len(), 1);
        assert_eq!(set.records[0].tokens, vec![A, E]);
        assert_eq!(count_inferences(&set), 2);
    }

    #[test]
    fn guided_m1() {
        let g = Arc::new(compile_guide("B( A| B)*", &abe()).unwrap());
        let cfg = SamplerConfig::new(3).with_guide(Some(g.clone()));
        let set = priority_sample(&m1(), &cfg).unwrap();
        assert_eq!(set.records[0].tokens, vec![B, A, E]);
        assert!(set.records.iter().all(|r| r.regex_valid && g.accepts(&r.tokens)));
    }

    #[test]
    fn exhaustion_and_enumeration() {
        // M1 has seven sequences in total.
        let set = priority_sample(&m1(), &SamplerConfig::new(20)).unwrap();
        assert!(set.exhausted);
        assert_eq!(set.records.len(), 7);
        let mut seqs: Vec<_> = set.records.iter().map(|r| r.tokens.clone()).collect();
        seqs.sort();
        seqs.dedup();
        assert_eq!(seqs.len(), 7);
    }

    #[test]
    fn branch_cap_one_means_greedy_only() {
        let cfg = SamplerConfig::new(3).with_max_branch(Some(1));
        let set = priority_sample(&m1(), &cfg).unwrap();
        assert_eq!(set.records.len(), 1);
        assert!(set.exhausted);
    }

    #[test]
    fn config_errors() {
        for cfg in [
            SamplerConfig::new(0),
            SamplerConfig::new(2).with_top_k(0),
            SamplerConfig::new(2).with_queue_capacity(0),
            SamplerConfig::new(2).with_max_branch(Some(0)),
        ] {
            assert!(matches!(priority_sample(&m1(), &cfg), Err(SampleError::InvalidConfig(_))));
        }
        let g = Arc::new(compile_guide("A A A A", &abe()).unwrap());
        let cfg = SamplerConfig::new(2).with_guide(Some(g));
        assert!(matches!(priority_sample(&m1(), &cfg), Err(SampleError::EmptyLanguage { .. })));
    }

    #[test]
    fn bounded_queue_eviction() {
        let mut q = BoundedQueue::new(2);
        let e = || QueueEntry { prefix: vec![A], token_probs: vec![] };
        q.push(0.2, e());
        q.push(0.1, e());
        q.push(0.1, e()); // ties lose to the earlier entry
        q.push(0.3, e()); // evicts 0.1
        assert_eq!(q.pop().unwrap().0, 0.3);
        assert_eq!(q.pop().unwrap().0, 0.2);
        assert!(q.pop().is_none());
    }
}
