//! Tokens, vocabularies and whitespace (de)tokenization.
//!
//! A token is one whole symbol (a compiler flag, a letter). Text is a
//! sequence of surfaces separated by single spaces; the end-of-sequence
//! token never appears in text.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate surface `{0}`")]
    DuplicateSurface(String),
    #[error("surface #{0} is empty or contains whitespace")]
    BadSurface(usize),
    #[error("eos index {eos} out of range for {len} surfaces")]
    BadEos { eos: usize, len: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index of a symbol in a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Token {
    fn from(i: usize) -> Self {
        Token(i as u32)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Immutable symbol table with one distinguished end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    lookup: HashMap<String, Token>,
    eos: Token,
}

impl Vocabulary {
    /// Surfaces must be distinct, non-empty and free of whitespace.
    pub fn new<S: Into<String>>(
        surfaces: impl IntoIterator<Item = S>,
        eos: usize,
    ) -> Result<Self, VocabError> {
        let surfaces: Vec<String> = surfaces.into_iter().map(Into::into).collect();
        if surfaces.is_empty() {
            return Err(VocabError::Empty);
        }
        if eos >= surfaces.len() {
            return Err(VocabError::BadEos { eos, len: surfaces.len() });
        }
        let mut lookup = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(VocabError::BadSurface(i));
            }
            if lookup.insert(s.clone(), Token::from(i)).is_some() {
                return Err(VocabError::DuplicateSurface(s.clone()));
            }
        }
        Ok(Self { surfaces, lookup, eos: Token::from(eos) })
    }

    /// Builds a vocabulary whose last surface is the EOS token.
    pub fn with_eos_last<S: Into<String>>(
        surfaces: impl IntoIterator<Item = S>,
    ) -> Result<Self, VocabError> {
        let surfaces: Vec<String> = surfaces.into_iter().map(Into::into).collect();
        let eos = surfaces.len().saturating_sub(1);
        Self::new(surfaces, eos)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn is_eos(&self, t: Token) -> bool {
        t == self.eos
    }

    pub fn surface(&self, t: Token) -> Result<&str, VocabError> {
        self.surfaces
            .get(t.index())
            .map(String::as_str)
            .ok_or(VocabError::InvalidTokenId(t.0))
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn get(&self, surface: &str) -> Option<Token> {
        self.lookup.get(surface).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.surfaces.len()).map(Token::from)
    }

    /// All tokens except EOS, in id order.
    pub fn non_eos_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.tokens().filter(move |&t| t != self.eos)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>, VocabError> {
        text.split_whitespace()
            .map(|w| self.get(w).ok_or_else(|| VocabError::UnknownSymbol(w.to_string())))
            .collect()
    }

    /// Joins surfaces with single spaces, dropping EOS.
    pub fn detokenize(&self, tokens: &[Token]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &t in tokens {
            let s = self.surface(t)?;
            if t == self.eos {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(s);
        }
        Ok(out)
    }

    /// Parses the vocabulary file format: one surface per line, line index is
    /// the token id. The last line is EOS unless the first line is an
    /// `eos=<index>` header. Trailing blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .collect();
        while lines.last().is_some_and(|(_, l)| l.trim().is_empty()) {
            lines.pop();
        }
        let mut eos = None;
        if let Some((n, first)) = lines.first() {
            if let Some(v) = first.strip_prefix("eos=") {
                let idx = v.trim().parse::<usize>().map_err(|_| VocabError::Parse {
                    line: *n,
                    msg: format!("bad eos header `{first}`"),
                })?;
                eos = Some(idx);
                lines.remove(0);
            }
        }
        for (n, l) in &lines {
            if l.trim().is_empty() {
                return Err(VocabError::Parse { line: *n, msg: "empty surface".into() });
            }
        }
        let surfaces: Vec<String> = lines.iter().map(|(_, l)| l.trim().to_string()).collect();
        let eos = eos.unwrap_or(surfaces.len().saturating_sub(1));
        Self::new(surfaces, eos)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in the file format, writing an `eos=` header only when EOS
    /// is not the last surface.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        if self.eos.index() + 1 != self.surfaces.len() {
            out.push_str(&format!("eos={}\n", self.eos.0));
        }
        for s in &self.surfaces {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}
