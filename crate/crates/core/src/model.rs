//! Sequence-model contract and the built-in desk-scale models.
//!
//! Models return probabilities, never logits. Every model has a generation
//! cap `max_length` (in tokens, EOS included); [`SequenceModel::next_distribution`]
//! forces EOS for a prefix of length `max_length - 1`, so decoding never has
//! to truncate a sequence.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::vocab::{Token, VocabError, Vocabulary};

/// Tolerance on `|sum(p) - 1|` for a valid distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prefix of length {len} exceeds the generation cap (max_length {max_length})")]
    PrefixTooLong { len: usize, max_length: usize },
    #[error("prefix contains the end-of-sequence token")]
    PrefixContainsEos,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("smoothing constant must be finite and > 0, got {0}")]
    BadAlpha(f64),
    #[error("max_length must be >= 1")]
    BadMaxLength,
    #[error("sequence {0} has EOS before its end")]
    EosInsideSequence(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A deterministic next-token model.
pub trait SequenceModel {
    fn vocab(&self) -> &Vocabulary;

    /// Generation cap in tokens, EOS included.
    fn max_length(&self) -> usize;

    /// The model's own next-token probabilities, before the length cap is
    /// applied. Callers go through [`SequenceModel::next_distribution`].
    fn predict(&self, prefix: &[Token]) -> Vec<f64>;

    fn next_distribution(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        let max_length = self.max_length();
        if prefix.len() >= max_length {
            return Err(ModelError::PrefixTooLong { len: prefix.len(), max_length });
        }
        let eos = self.vocab().eos();
        if prefix.contains(&eos) {
            return Err(ModelError::PrefixContainsEos);
        }
        if prefix.len() + 1 == max_length {
            let mut forced = vec![0.0; self.vocab().len()];
            forced[eos.index()] = 1.0;
            return Ok(forced);
        }
        Ok(self.predict(prefix))
    }
}

impl<M: SequenceModel + ?Sized> SequenceModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn max_length(&self) -> usize {
        (**self).max_length()
    }
    fn predict(&self, prefix: &[Token]) -> Vec<f64> {
        (**self).predict(prefix)
    }
    fn next_distribution(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        (**self).next_distribution(prefix)
    }
}

/// Checks length, non-negativity and normalization.
pub fn validate_distribution(p: &[f64], vocab_len: usize) -> Result<(), ModelError> {
    if p.len() != vocab_len {
        return Err(ModelError::InvalidDistribution(format!(
            "length {} != vocabulary size {vocab_len}",
            p.len()
        )));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(ModelError::InvalidDistribution(format!("bad probability {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(ModelError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Explicit prefix → distribution table with a fallback vector.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: Vocabulary,
    max_length: usize,
    entries: HashMap<Vec<Token>, Vec<f64>>,
    default: Vec<f64>,
}

impl TableModel {
    pub fn new(vocab: Vocabulary, max_length: usize, default: Vec<f64>) -> Result<Self, ModelError> {
        if max_length == 0 {
            return Err(ModelError::BadMaxLength);
        }
        validate_distribution(&default, vocab.len())?;
        Ok(Self { vocab, max_length, entries: HashMap::new(), default })
    }

    pub fn insert(&mut self, prefix: Vec<Token>, probs: Vec<f64>) -> Result<(), ModelError> {
        validate_distribution(&probs, self.vocab.len())?;
        self.entries.insert(prefix, probs);
        Ok(())
    }

    pub fn with_entry(mut self, prefix: Vec<Token>, probs: Vec<f64>) -> Result<Self, ModelError> {
        self.insert(prefix, probs)?;
        Ok(self)
    }

    pub fn entries(&self) -> &HashMap<Vec<Token>, Vec<f64>> {
        &self.entries
    }
}

impl SequenceModel for TableModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn max_length(&self) -> usize {
        self.max_length
    }
    fn predict(&self, prefix: &[Token]) -> Vec<f64> {
        self.entries.get(prefix).unwrap_or(&self.default).clone()
    }
}

/// Additively smoothed n-gram model. The context of a position is the last
/// `order - 1` tokens before it, or the whole prefix when it is shorter.
#[derive(Debug, Clone)]
pub struct NGramModel {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    max_length: usize,
    counts: HashMap<Vec<Token>, Vec<u64>>,
    totals: HashMap<Vec<Token>, u64>,
}

impl NGramModel {
    /// Counts every (context, next token) transition in `corpus`.
    ///
    /// Sequences may omit the trailing EOS; an EOS anywhere but last is
    /// rejected. `max_length` defaults to the longest sequence, EOS included.
    pub fn train(
        vocab: Vocabulary,
        corpus: &[Vec<Token>],
        order: usize,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        if order == 0 {
            return Err(ModelError::BadOrder(order));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ModelError::BadAlpha(alpha));
        }
        if corpus.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let v = vocab.len();
        let eos = vocab.eos();
        let mut counts: HashMap<Vec<Token>, Vec<u64>> = HashMap::new();
        let mut longest = 1;
        for (n, seq) in corpus.iter().enumerate() {
            if let Some(i) = seq.iter().position(|&t| t == eos) {
                if i + 1 != seq.len() {
                    return Err(ModelError::EosInsideSequence(n));
                }
            }
            for &t in seq {
                vocab.surface(t)?;
            }
            let with_eos = if seq.last() == Some(&eos) { seq.len() } else { seq.len() + 1 };
            longest = longest.max(with_eos);
            for (i, &t) in seq.iter().enumerate() {
                let ctx = seq[i.saturating_sub(order - 1)..i].to_vec();
                counts.entry(ctx).or_insert_with(|| vec![0; v])[t.index()] += 1;
            }
        }
        let totals = counts.iter().map(|(k, c)| (k.clone(), c.iter().sum())).collect();
        Ok(Self { vocab, order, alpha, max_length: longest, counts, totals })
    }

    pub fn with_max_length(mut self, max_length: usize) -> Result<Self, ModelError> {
        if max_length == 0 {
            return Err(ModelError::BadMaxLength);
        }
        self.max_length = max_length;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn count(&self, context: &[Token], token: Token) -> u64 {
        self.counts.get(context).map_or(0, |c| c[token.index()])
    }

    pub fn context_total(&self, context: &[Token]) -> u64 {
        self.totals.get(context).copied().unwrap_or(0)
    }

    fn context_of<'a>(&self, prefix: &'a [Token]) -> &'a [Token] {
        &prefix[prefix.len().saturating_sub(self.order - 1)..]
    }

    /// Writes the model file: `key=value` header lines, a `---` separator,
    /// then one `context<TAB>token<TAB>count` record per line with contexts
    /// as space-separated surfaces. Records are sorted for stable output.
    pub fn to_file_string(&self, vocab_ref: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# ngram model");
        let _ = writeln!(out, "order={}", self.order);
        let _ = writeln!(out, "alpha={}", self.alpha);
        let _ = writeln!(out, "max_length={}", self.max_length);
        let _ = writeln!(out, "vocab={vocab_ref}");
        let _ = writeln!(out, "vocab_size={}", self.vocab.len());
        out.push_str("---\n");
        let sorted: BTreeMap<&Vec<Token>, &Vec<u64>> = self.counts.iter().collect();
        for (ctx, counts) in sorted {
            let ctx_text = ctx
                .iter()
                .map(|&t| self.vocab.surface(t).expect("trained tokens are valid"))
                .collect::<Vec<_>>()
                .join(" ");
            for (i, &c) in counts.iter().enumerate() {
                if c > 0 {
                    let _ = writeln!(out, "{ctx_text}\t{}\t{c}", self.vocab.surfaces()[i]);
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab_ref: &str) -> Result<(), ModelError> {
        std::fs::write(path, self.to_file_string(vocab_ref))?;
        Ok(())
    }

    /// Parses a model file against `vocab`. Returns the model and the
    /// header's vocabulary reference.
    pub fn parse(text: &str, vocab: Vocabulary) -> Result<(Self, String), ModelError> {
        let mut order = None;
        let mut alpha = None;
        let mut max_length = None;
        let mut vocab_ref = String::new();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let bad = |line: usize, msg: String| ModelError::Parse { line, msg };
        let mut saw_separator = false;
        for (n, line) in lines.by_ref() {
            if line == "---" {
                saw_separator = true;
                break;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(n, format!("expected key=value, got `{line}`")))?;
            let v = v.trim();
            match k.trim() {
                "order" => order = Some(v.parse::<usize>().map_err(|e| bad(n, e.to_string()))?),
                "alpha" => alpha = Some(v.parse::<f64>().map_err(|e| bad(n, e.to_string()))?),
                "max_length" => {
                    max_length = Some(v.parse::<usize>().map_err(|e| bad(n, e.to_string()))?)
                }
                "vocab" => vocab_ref = v.to_string(),
                "vocab_size" => {
                    let size = v.parse::<usize>().map_err(|e| bad(n, e.to_string()))?;
                    if size != vocab.len() {
                        return Err(bad(
                            n,
                            format!("model expects {size} tokens, vocabulary has {}", vocab.len()),
                        ));
                    }
                }
                other => return Err(bad(n, format!("unknown header key `{other}`"))),
            }
        }
        if !saw_separator {
            return Err(bad(0, "missing `---` separator".into()));
        }
        let order = order.ok_or_else(|| bad(0, "missing order".into()))?;
        let alpha = alpha.ok_or_else(|| bad(0, "missing alpha".into()))?;
        let max_length = max_length.ok_or_else(|| bad(0, "missing max_length".into()))?;
        if order == 0 {
            return Err(ModelError::BadOrder(order));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ModelError::BadAlpha(alpha));
        }
        if max_length == 0 {
            return Err(ModelError::BadMaxLength);
        }
        let v = vocab.len();
        let mut counts: HashMap<Vec<Token>, Vec<u64>> = HashMap::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(ctx), Some(tok), Some(cnt), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(n, "expected context<TAB>token<TAB>count".into()));
            };
            let ctx = vocab.tokenize(ctx).map_err(|e| bad(n, e.to_string()))?;
            if ctx.len() >= order {
                return Err(bad(n, format!("context longer than order - 1 ({})", order - 1)));
            }
            let tok = vocab.get(tok).ok_or_else(|| bad(n, format!("unknown symbol `{tok}`")))?;
            let cnt = cnt.parse::<u64>().map_err(|e| bad(n, e.to_string()))?;
            counts.entry(ctx).or_insert_with(|| vec![0; v])[tok.index()] += cnt;
        }
        let totals = counts.iter().map(|(k, c)| (k.clone(), c.iter().sum())).collect();
        Ok((Self { vocab, order, alpha, max_length, counts, totals }, vocab_ref))
    }

    pub fn load(path: impl AsRef<Path>, vocab: Vocabulary) -> Result<(Self, String), ModelError> {
        Self::parse(&std::fs::read_to_string(path)?, vocab)
    }
}

impl SequenceModel for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn max_length(&self) -> usize {
        self.max_length
    }
    fn predict(&self, prefix: &[Token]) -> Vec<f64> {
        let v = self.vocab.len();
        let ctx = self.context_of(prefix);
        let denom = self.context_total(ctx) as f64 + self.alpha * v as f64;
        match self.counts.get(ctx) {
            Some(c) => c.iter().map(|&n| (n as f64 + self.alpha) / denom).collect(),
            None => vec![self.alpha / denom; v],
        }
    }
}

/// Parses a corpus: one sequence of surfaces per line, blank lines skipped.
/// EOS is appended to lines that do not already end with it.
pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<Vec<Token>>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = vocab
            .tokenize(line)
            .map_err(|e| ModelError::Parse { line: i + 1, msg: e.to_string() })?;
        if seq.last() != Some(&vocab.eos()) {
            seq.push(vocab.eos());
        }
        out.push(seq);
    }
    Ok(out)
}

/// One detokenized sequence per line.
pub fn format_corpus(corpus: &[Vec<Token>], vocab: &Vocabulary) -> Result<String, VocabError> {
    let mut out = String::new();
    for seq in corpus {
        out.push_str(&vocab.detokenize(seq)?);
        out.push('\n');
    }
    Ok(out)
}

/// Wraps a model and counts `next_distribution` calls, forced-EOS
/// positions included.
pub struct CountingModel<M> {
    inner: M,
    calls: Cell<usize>,
}

impl<M: SequenceModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: SequenceModel> SequenceModel for CountingModel<M> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }
    fn max_length(&self) -> usize {
        self.inner.max_length()
    }
    fn predict(&self, prefix: &[Token]) -> Vec<f64> {
        self.inner.predict(prefix)
    }
    fn next_distribution(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.next_distribution(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abe() -> Vocabulary {
        Vocabulary::with_eos_last(["A", "B", "EOS"]).unwrap()
    }

    const A: Token = Token(0);
    const B: Token = Token(1);
    const E: Token = Token(2);

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
    fn table_lookup_and_forced_eos() {
        let m = m1();
        assert_eq!(m.next_distribution(&[]).unwrap(), vec![0.6, 0.3, 0.1]);
        assert_eq!(m.next_distribution(&[A, B]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(m.next_distribution(&[A, B, A]), Err(ModelError::PrefixTooLong { .. })));
        assert!(matches!(m.next_distribution(&[E]), Err(ModelError::PrefixContainsEos)));
    }

    #[test]
    fn table_rejects_bad_vectors() {
        let m = m1();
        let mut m = m;
        assert!(m.insert(vec![A], vec![0.5, 0.6, 0.0]).is_err());
        assert!(m.insert(vec![A], vec![1.0, 0.0]).is_err());
        assert!(m.insert(vec![A], vec![1.5, -0.5, 0.0]).is_err());
    }

    #[test]
    fn unigram_smoothing_example() {
        let m = NGramModel::train(abe(), &[vec![A, A, B]], 1, 1.0).unwrap().with_max_length(5).unwrap();
        let p = m.next_distribution(&[]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((p[2] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn training_counts() {
        let m = NGramModel::train(abe(), &[vec![A, E]], 1, 0.5).unwrap();
        assert_eq!(m.count(&[], A), 1);
        assert_eq!(m.count(&[], E), 1);
        assert_eq!(m.max_length(), 2);

        let m = NGramModel::train(abe(), &[vec![A, B, E], vec![A, B, E]], 2, 0.5).unwrap();
        assert_eq!(m.count(&[A], B), 2);
        assert_eq!(m.count(&[], A), 2);
        assert_eq!(m.count(&[B], E), 2);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(NGramModel::train(abe(), &[vec![A]], 1, 0.0), Err(ModelError::BadAlpha(_))));
        assert!(matches!(NGramModel::train(abe(), &[vec![A]], 0, 1.0), Err(ModelError::BadOrder(0))));
        assert!(matches!(NGramModel::train(abe(), &[], 1, 1.0), Err(ModelError::EmptyCorpus)));
        assert!(matches!(
            NGramModel::train(abe(), &[vec![A, E, B]], 1, 1.0),
            Err(ModelError::EosInsideSequence(0))
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let corpus = vec![vec![A, B, E], vec![B, B, A, E], vec![A, E]];
        let m = NGramModel::train(abe(), &corpus, 3, 0.25).unwrap();
        let text = m.to_file_string("v.txt");
        let (back, vref) = NGramModel::parse(&text, abe()).unwrap();
        assert_eq!(vref, "v.txt");
        assert_eq!(back.to_file_string("v.txt"), text);
        for prefix in [vec![], vec![A], vec![B, B], vec![A, B, A]] {
            assert_eq!(back.predict(&prefix), m.predict(&prefix));
        }
        assert!(NGramModel::parse("order=2\nalpha=1\nmax_length=3\n", abe()).is_err());
        assert!(NGramModel::parse("order=2\nalpha=1\nmax_length=3\nvocab_size=9\n---\n", abe()).is_err());
    }

    #[test]
    fn corpus_parsing_appends_eos() {
        let c = parse_corpus("A B\n\nB A EOS\n", &abe()).unwrap();
        assert_eq!(c, vec![vec![A, B, E], vec![B, A, E]]);
        assert_eq!(format_corpus(&c, &abe()).unwrap(), "A B\nB A\n");
    }

    proptest! {
        #[test]
        fn ngram_distributions_are_normalized_and_deterministic(
            corpus in proptest::collection::vec(proptest::collection::vec(0u32..2, 0..6), 1..6),
            prefix in proptest::collection::vec(0u32..2, 0..6),
            order in 1usize..4,
            alpha in 0.001f64..2.0,
        ) {
            let corpus: Vec<Vec<Token>> = corpus.into_iter().map(|s| s.into_iter().map(Token).collect()).collect();
            let m = NGramModel::train(abe(), &corpus, order, alpha).unwrap().with_max_length(8).unwrap();
            let prefix: Vec<Token> = prefix.into_iter().map(Token).collect();
            let p = m.next_distribution(&prefix).unwrap();
            prop_assert!(validate_distribution(&p, 3).is_ok());
            prop_assert_eq!(&p, &m.next_distribution(&prefix).unwrap());
            let ctx = &prefix[prefix.len().saturating_sub(order - 1)..];
            let floor = alpha / (m.context_total(ctx) as f64 + alpha * 3.0);
            prop_assert!(p.iter().all(|&x| x >= floor * (1.0 - 1e-12) && x > 0.0));
        }
    }
}
