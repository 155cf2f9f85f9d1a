//! Brute-force reference implementations and random test inputs.
//!
//! Nothing here shares code with the production sampler. The reference
//! sampler re-runs the model at every position, keeps its queue in an
//! unsorted `Vec` scanned linearly, and decides guided feasibility by
//! exhaustive search over the guide's transition function.

use std::collections::HashMap;

use priority_sampling::{Guide, GuideState, ModelError, SequenceModel, TableModel, Token, Vocabulary, RngStream};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration exceeds {0} leaves")]
    TooLarge(usize),
    #[error("no candidate token at position {0}")]
    Stuck(usize),
    #[error("no EOS within max_length")]
    NoEos,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Leaf cap for [`enumerate_all_sequences`].
pub const MAX_LEAVES: usize = 1_000_000;

/// Every EOS-terminated sequence of at most `max_len` tokens with non-zero
/// probability, paired with that probability, in depth-first token order.
pub fn enumerate_all_sequences<M: SequenceModel>(
    model: &M,
    max_len: usize,
) -> Result<Vec<(Vec<Token>, f64)>, OracleError> {
    let eos = model.vocab().eos();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 1.0)];
    while let Some((prefix, prob)) = stack.pop() {
        if prefix.len() >= max_len {
            continue;
        }
        let dist = model.next_distribution(&prefix)?;
        for i in (0..dist.len()).rev() {
            if dist[i] <= 0.0 {
                continue;
            }
            let mut next = prefix.clone();
            next.push(Token(i as u32));
            if Token(i as u32) == eos {
                out.push((next, prob * dist[i]));
                if out.len() > MAX_LEAVES {
                    return Err(OracleError::TooLarge(MAX_LEAVES));
                }
            } else {
                stack.push((next, prob * dist[i]));
            }
        }
    }
    Ok(out)
}

/// Reference configuration. `max_branch = None` means unlimited.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub num_samples: usize,
    pub top_k: usize,
    pub max_branch: Option<usize>,
    pub geometric: bool,
    pub capacity: usize,
}

impl OracleConfig {
    pub fn new(n: usize) -> Self {
        Self { num_samples: n, top_k: n, max_branch: None, geometric: false, capacity: n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub tokens: Vec<Token>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub samples: Vec<OracleSample>,
    pub exhausted: bool,
}

struct Pending {
    score: f64,
    arrival: usize,
    prefix: Vec<Token>,
}

/// `true` if `a` should be popped before `b`.
fn before(a: &Pending, b: &Pending) -> bool {
    a.score > b.score || (a.score == b.score && a.arrival < b.arrival)
}

/// Can a sequence that has reached `state` with `remaining` tokens left
/// (EOS included) still end in an accepted string?
fn completable(guide: &Guide, state: GuideState, remaining: usize, eos: Token, vocab_len: usize, memo: &mut HashMap<(u32, usize), bool>) -> bool {
    if remaining == 0 {
        return false;
    }
    if guide.is_accepting(state) {
        return true;
    }
    if let Some(&v) = memo.get(&(state.0, remaining)) {
        return v;
    }
    let mut ok = false;
    for i in 0..vocab_len {
        let t = Token(i as u32);
        if t == eos {
            continue;
        }
        if let Ok(next) = guide.step(state, t) {
            if completable(guide, next, remaining - 1, eos, vocab_len, memo) {
                ok = true;
                break;
            }
        }
    }
    memo.insert((state.0, remaining), ok);
    ok
}

/// Priority sampling written directly from its pseudocode.
pub fn reference_priority_sample<M: SequenceModel>(
    model: &M,
    guide: Option<&Guide>,
    config: &OracleConfig,
) -> Result<OracleRun, OracleError> {
    let eos = model.vocab().eos();
    let v = model.vocab().len();
    let max_length = model.max_length();
    let per_node = {
        let mut m = config.top_k - 1;
        if let Some(b) = config.max_branch {
            m = m.min(b - 1);
        }
        m.min(config.capacity)
    };
    let mut memo = HashMap::new();
    let mut queue: Vec<Pending> = Vec::new();
    let mut arrivals = 0;
    let mut samples = Vec::new();
    let mut exhausted = false;

    for i in 0..config.num_samples {
        let (mask, score) = if i == 0 {
            (Vec::new(), 1.0)
        } else {
            if queue.is_empty() {
                exhausted = true;
                break;
            }
            let mut best = 0;
            for j in 1..queue.len() {
                if before(&queue[j], &queue[best]) {
                    best = j;
                }
            }
            let p = queue.remove(best);
            (p.prefix, p.score)
        };

        let mut seq: Vec<Token> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        let mut state = guide.map(|g| g.initial());
        loop {
            if seq.len() >= max_length {
                return Err(OracleError::NoEos);
            }
            let dist = model.next_distribution(&seq)?;
            let chosen = if seq.len() < mask.len() {
                mask[seq.len()]
            } else {
                let mut cands: Vec<usize> = Vec::new();
                for (t, &p) in dist.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let allowed = match (guide, state) {
                        (Some(g), Some(s)) => {
                            let tok = Token(t as u32);
                            if tok == eos {
                                g.is_accepting(s)
                            } else {
                                match g.step(s, tok) {
                                    Ok(n) => completable(g, n, max_length - seq.len() - 1, eos, v, &mut memo),
                                    Err(_) => false,
                                }
                            }
                        }
                        _ => true,
                    };
                    if allowed {
                        cands.push(t);
                    }
                }
                if cands.is_empty() {
                    return Err(OracleError::Stuck(seq.len()));
                }
                // Insertion sort: higher probability first, lower id first on ties.
                let mut ranked: Vec<usize> = Vec::new();
                for c in cands {
                    let at = ranked.iter().position(|&r| dist[c] > dist[r]).unwrap_or(ranked.len());
                    ranked.insert(at, c);
                }
                ranked.truncate(config.top_k);
                for &alt in ranked.iter().skip(1).take(per_node) {
                    let mut prefix = seq.clone();
                    prefix.push(Token(alt as u32));
                    let s = if config.geometric {
                        let mut total = 0.0;
                        for p in &probs {
                            total += p.ln();
                        }
                        total += dist[alt].ln();
                        (total / prefix.len() as f64).exp()
                    } else {
                        dist[alt]
                    };
                    queue.push(Pending { score: s, arrival: arrivals, prefix });
                    arrivals += 1;
                    if queue.len() > config.capacity {
                        let mut worst = 0;
                        for j in 1..queue.len() {
                            if before(&queue[worst], &queue[j]) {
                                worst = j;
                            }
                        }
                        queue.remove(worst);
                    }
                }
                Token(ranked[0] as u32)
            };
            probs.push(dist[chosen.index()]);
            seq.push(chosen);
            if let (Some(g), Some(s)) = (guide, state) {
                if chosen != eos {
                    state = Some(g.step(s, chosen).expect("permitted token steps"));
                }
            }
            if chosen == eos {
                break;
            }
        }
        samples.push(OracleSample { tokens: seq, score });
    }
    Ok(OracleRun { samples, exhausted })
}

/// Vocabulary `["A", "B", ..., "EOS"]` with `size` entries, EOS last.
pub fn letter_vocab(size: usize) -> Vocabulary {
    assert!((2..=26).contains(&size));
    let mut s: Vec<String> = (0..size - 1).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
    s.push("EOS".into());
    Vocabulary::with_eos_last(s).expect("letters are distinct")
}

/// Random model with an explicit row for every EOS-free prefix shorter
/// than `max_length`. Rows are integer weights in 1..=4 normalized, which
/// produces frequent exact ties; with `zeros`, weights of 0 also occur
/// (every row keeps at least one positive entry).
pub fn random_table_model(rng: &mut RngStream, vocab: Vocabulary, max_length: usize, zeros: bool) -> TableModel {
    let v = vocab.len();
    let low = if zeros { 0 } else { 1 };
    let row = |rng: &mut RngStream| {
        let mut w: Vec<u64> = (0..v).map(|_| low + rng.below(5 - low)).collect();
        if w.iter().all(|&x| x == 0) {
            w[rng.below(v as u64) as usize] = 1;
        }
        let total: u64 = w.iter().sum();
        w.iter().map(|&x| x as f64 / total as f64).collect::<Vec<f64>>()
    };
    let default = row(rng);
    let mut model = TableModel::new(vocab.clone(), max_length, default).expect("valid default");
    let mut frontier: Vec<Vec<Token>> = vec![vec![]];
    while let Some(prefix) = frontier.pop() {
        model.insert(prefix.clone(), row(rng)).expect("valid row");
        if prefix.len() + 1 < max_length {
            for t in vocab.non_eos_tokens() {
                let mut p = prefix.clone();
                p.push(t);
                frontier.push(p);
            }
        }
    }
    model
}

/// Random vocabulary of short lowercase surfaces plus `</s>`.
pub fn random_vocab(rng: &mut RngStream) -> Vocabulary {
    let want = 2 + rng.below(5) as usize;
    let mut surfaces: Vec<String> = Vec::new();
    while surfaces.len() < want {
        let len = 1 + rng.below(2) as usize;
        let s: String = (0..len).map(|_| (b'a' + rng.below(3) as u8) as char).collect();
        if !surfaces.contains(&s) {
            surfaces.push(s);
        }
    }
    surfaces.push("</s>".into());
    Vocabulary::with_eos_last(surfaces).expect("distinct non-empty surfaces")
}

/// Random pattern in the syntax shared by the guide and the `regex` crate:
/// literals, token surfaces, classes, `.`, groups, alternation and the
/// `* + ?` quantifiers, with single spaces between token-level pieces.
pub fn random_regex(rng: &mut RngStream, vocab: &Vocabulary) -> String {
    fn piece(rng: &mut RngStream, vocab: &Vocabulary, depth: u32) -> String {
        let surfaces: Vec<&String> = vocab.surfaces().iter().filter(|s| s.as_str() != "</s>").collect();
        let pick = rng.below(if depth >= 2 { 4 } else { 6 });
        let base = match pick {
            0 | 1 => surfaces[rng.below(surfaces.len() as u64) as usize].clone(),
            2 => ["[ab]", "[a-c]", "[^b ]", "c", "a"][rng.below(5) as usize].to_string(),
            3 => format!("{}.", surfaces[rng.below(surfaces.len() as u64) as usize]),
            4 => format!(
                "({}|{})",
                piece(rng, vocab, depth + 1),
                piece(rng, vocab, depth + 1)
            ),
            _ => format!("({})", sequence(rng, vocab, depth + 1)),
        };
        if pick >= 4 {
            match rng.below(4) {
                0 => format!("{base}?"),
                1 => format!("{base}*"),
                _ => base,
            }
        } else {
            base
        }
    }
    fn sequence(rng: &mut RngStream, vocab: &Vocabulary, depth: u32) -> String {
        let n = 1 + rng.below(3) as usize;
        let mut out = piece(rng, vocab, depth);
        for _ in 1..n {
            let next = piece(rng, vocab, depth);
            match rng.below(3) {
                0 => out = format!("{out}( {next})*"),
                1 => out = format!("{out}( {next})+"),
                _ => out = format!("{out} {next}"),
            }
        }
        out
    }
    sequence(rng, vocab, 0)
}

/// Model with one strictly positive distribution shared by every prefix.
pub fn random_dense_model(rng: &mut RngStream, vocab: Vocabulary, max_length: usize) -> TableModel {
    let v = vocab.len();
    let mut row = || {
        let w: Vec<u64> = (0..v).map(|_| 1 + rng.below(9)).collect();
        let total: u64 = w.iter().sum();
        w.iter().map(|&x| x as f64 / total as f64).collect::<Vec<f64>>()
    };
    TableModel::new(vocab, max_length, row()).expect("valid row")
}
