//! Reference decoders: greedy, nucleus (top-p), top-k and model-free random
//! flag sequences.
//!
//! Stochastic decoders draw from [`RngStream`]. Each step keeps the permitted
//! tokens with non-zero probability, applies the temperature as
//! `p^(1/τ)` renormalized, sorts by descending probability (ties: lower id
//! first), cuts, renormalizes, and picks the first token whose cumulative
//! probability exceeds one uniform draw.

use crate::guide::{Cursor, Guide};
use crate::model::SequenceModel;
use crate::rng::RngStream;
use crate::sampler::{SampleError, SampleRecord, SampleSet};
use crate::vocab::{Token, Vocabulary};

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NucleusConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    pub num_samples: usize,
}

impl NucleusConfig {
    pub fn new(top_p: f64, temperature: f64, seed: u64, num_samples: usize) -> Self {
        Self { top_p, temperature, seed, num_samples }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SampleError::InvalidConfig(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<(), SampleError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(SampleError::InvalidConfig(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn permitted(dist: &[f64], cursor: Option<&Cursor<'_>>) -> Vec<(f64, Token)> {
    dist.iter()
        .enumerate()
        .map(|(i, &p)| (p, Token::from(i)))
        .filter(|&(p, t)| p > 0.0 && cursor.is_none_or(|c| c.permits(t)))
        .collect()
}

fn normalize(cands: &mut [(f64, Token)]) {
    let sum: f64 = cands.iter().map(|c| c.0).sum();
    for c in cands.iter_mut() {
        c.0 /= sum;
    }
}

fn sort_desc(cands: &mut [(f64, Token)]) {
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// `p^(1/τ)`, renormalized, sorted descending.
pub fn apply_temperature(cands: &mut [(f64, Token)], temperature: f64) {
    if temperature != 1.0 {
        // Dividing by the largest probability first keeps small
        // temperatures from underflowing every weight to zero.
        let top = cands.iter().map(|c| c.0).fold(0.0, f64::max);
        let inv = 1.0 / temperature;
        for c in cands.iter_mut() {
            c.0 = (c.0 / top).powf(inv);
        }
    }
    normalize(cands);
    sort_desc(cands);
}

/// Temperature, then the smallest descending prefix whose cumulative
/// probability reaches `top_p`, renormalized.
pub fn nucleus_filter(mut cands: Vec<(f64, Token)>, temperature: f64, top_p: f64) -> Vec<(f64, Token)> {
    apply_temperature(&mut cands, temperature);
    let mut cum = 0.0;
    let mut keep = cands.len();
    for (i, c) in cands.iter().enumerate() {
        cum += c.0;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    cands.truncate(keep);
    normalize(&mut cands);
    cands
}

/// The `k` most probable candidates, then temperature, renormalized.
pub fn topk_filter(mut cands: Vec<(f64, Token)>, k: usize, temperature: f64) -> Vec<(f64, Token)> {
    sort_desc(&mut cands);
    cands.truncate(k);
    apply_temperature(&mut cands, temperature);
    cands
}

fn draw(cands: &[(f64, Token)], rng: &mut RngStream) -> Token {
    let u = rng.next_f64();
    let mut cum = 0.0;
    for &(p, t) in cands {
        cum += p;
        if u < cum {
            return t;
        }
    }
    cands.last().expect("non-empty candidates").1
}

/// Argmax decoding (ties: lowest id) under the optional guide.
pub fn greedy_decode<M: SequenceModel + ?Sized>(
    model: &M,
    guide: Option<&Guide>,
) -> Result<SampleRecord, SampleError> {
    check_guide(model, guide)?;
    let eos = model.vocab().eos();
    let mut cursor = guide.map(|g| Cursor::new(g, model.max_length()));
    let mut tokens = Vec::new();
    let mut prob = 1.0;
    loop {
        let dist = model.next_distribution(&tokens)?;
        let mut best: Option<(f64, Token)> = None;
        for (i, &p) in dist.iter().enumerate() {
            let t = Token::from(i);
            if p > 0.0 && best.is_none_or(|(bp, _)| p > bp) && cursor.as_ref().is_none_or(|c| c.permits(t)) {
                best = Some((p, t));
            }
        }
        let (p, t) = best.ok_or(SampleError::NoAllowedToken { position: tokens.len() })?;
        prob *= p;
        tokens.push(t);
        if let Some(c) = cursor.as_mut() {
            c.advance(t)?;
        }
        if t == eos {
            break;
        }
    }
    let n = tokens.len();
    Ok(SampleRecord {
        regex_valid: guide.is_none_or(|g| g.accepts(&tokens)),
        tokens,
        branch_score: prob,
        order: 0,
        new_inferences: n,
    })
}

fn check_guide<M: SequenceModel + ?Sized>(model: &M, guide: Option<&Guide>) -> Result<(), SampleError> {
    if let Some(g) = guide {
        if g.index().vocab_len() != model.vocab().len() {
            return Err(SampleError::InvalidConfig("guide was compiled for another vocabulary".into()));
        }
        if g.shortest_match_len().is_none_or(|n| n > model.max_length()) {
            return Err(SampleError::EmptyLanguage { max_length: model.max_length() });
        }
    }
    Ok(())
}

/// One sequence drawn step by step with `filter` shaping each step's
/// candidates.
fn sample_one<M, F>(
    model: &M,
    guide: Option<&Guide>,
    rng: &mut RngStream,
    order: usize,
    filter: &F,
) -> Result<SampleRecord, SampleError>
where
    M: SequenceModel + ?Sized,
    F: Fn(Vec<(f64, Token)>) -> Vec<(f64, Token)>,
{
    let eos = model.vocab().eos();
    let mut cursor = guide.map(|g| Cursor::new(g, model.max_length()));
    let mut tokens = Vec::new();
    let mut prob = 1.0;
    loop {
        let dist = model.next_distribution(&tokens)?;
        let cands = permitted(&dist, cursor.as_ref());
        if cands.is_empty() {
            return Err(SampleError::NoAllowedToken { position: tokens.len() });
        }
        let t = draw(&filter(cands), rng);
        prob *= dist[t.index()];
        tokens.push(t);
        if let Some(c) = cursor.as_mut() {
            c.advance(t)?;
        }
        if t == eos {
            break;
        }
    }
    let n = tokens.len();
    Ok(SampleRecord {
        regex_valid: guide.is_none_or(|g| g.accepts(&tokens)),
        tokens,
        branch_score: prob,
        order,
        new_inferences: n,
    })
}

fn repeat_greedy<M: SequenceModel + ?Sized>(
    model: &M,
    guide: Option<&Guide>,
    n: usize,
) -> Result<SampleSet, SampleError> {
    let mut records = Vec::with_capacity(n);
    for order in 0..n {
        let mut r = greedy_decode(model, guide)?;
        r.order = order;
        records.push(r);
    }
    Ok(SampleSet { records, exhausted: false })
}

/// `num_samples` independent nucleus samples from one seeded stream.
/// Duplicates are kept.
pub fn nucleus_sample<M: SequenceModel + ?Sized>(
    model: &M,
    config: &NucleusConfig,
    guide: Option<&Guide>,
) -> Result<SampleSet, SampleError> {
    config.validate()?;
    check_guide(model, guide)?;
    if config.temperature < GREEDY_TEMPERATURE {
        return repeat_greedy(model, guide, config.num_samples);
    }
    let mut rng = RngStream::new(config.seed);
    let filter = |c| nucleus_filter(c, config.temperature, config.top_p);
    let records = (0..config.num_samples)
        .map(|i| sample_one(model, guide, &mut rng, i, &filter))
        .collect::<Result<_, _>>()?;
    Ok(SampleSet { records, exhausted: false })
}

/// `n` independent top-k samples from one seeded stream.
pub fn topk_sample<M: SequenceModel + ?Sized>(
    model: &M,
    k: usize,
    temperature: f64,
    seed: u64,
    n: usize,
    guide: Option<&Guide>,
) -> Result<SampleSet, SampleError> {
    if k == 0 {
        return Err(SampleError::InvalidConfig("k must be >= 1".into()));
    }
    check_temperature(temperature)?;
    check_guide(model, guide)?;
    if temperature < GREEDY_TEMPERATURE {
        return repeat_greedy(model, guide, n);
    }
    let mut rng = RngStream::new(seed);
    let filter = |c| topk_filter(c, k, temperature);
    let records = (0..n)
        .map(|i| sample_one(model, guide, &mut rng, i, &filter))
        .collect::<Result<_, _>>()?;
    Ok(SampleSet { records, exhausted: false })
}

/// Model-free sequences over every non-EOS token of `vocab`.
pub fn random_flag_sample(vocab: &Vocabulary, max_flags: usize, seed: u64, n: usize) -> SampleSet {
    let flags: Vec<Token> = vocab.non_eos_tokens().collect();
    random_sample_from(&flags, vocab.eos(), max_flags, seed, n)
}

/// `n` sequences: a uniform length in `[1, max_flags]`, then that many
/// uniform draws from `flags`, then EOS. Draw order per sequence: length
/// first, then the flags left to right.
pub fn random_sample_from(flags: &[Token], eos: Token, max_flags: usize, seed: u64, n: usize) -> SampleSet {
    assert!(max_flags >= 1 && !flags.is_empty(), "need at least one flag and max_flags >= 1");
    let mut rng = RngStream::new(seed);
    let records = (0..n)
        .map(|order| {
            let len = 1 + rng.below(max_flags as u64) as usize;
            let mut tokens: Vec<Token> =
                (0..len).map(|_| flags[rng.below(flags.len() as u64) as usize]).collect();
            tokens.push(eos);
            SampleRecord { tokens, branch_score: 1.0, order, new_inferences: 0, regex_valid: true }
        })
        .collect();
    SampleSet { records, exhausted: false }
}
