//! Regex guides: a regex compiled to a trimmed DFA, plus a token-level index
//! so that masking a decoding step is a table lookup.
//!
//! A token sequence matches a guide when its detokenized text (surfaces
//! joined by single spaces, EOS dropped) matches the whole regex. The index
//! therefore works on token-level states: a DFA state plus whether any token
//! has been consumed yet, because every token after the first is preceded by
//! a space.

mod automaton;
mod parse;

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

pub use automaton::Dfa;

use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuideError {
    #[error("regex syntax error at position {position}: {message}")]
    RegexSyntax { position: usize, message: String },
    #[error("token {token} is not allowed in guide state {state}")]
    RejectedToken { state: u32, token: Token },
}

/// A token-level guide state. Index into the guide's tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GuideState(pub u32);

const REJECT: u32 = u32::MAX;

/// Per-state token transitions and allowed sets.
#[derive(Debug, Clone)]
pub struct TokenIndex {
    vocab_len: usize,
    /// `step_table[s * vocab_len + t]`: next token-level state or `REJECT`.
    step_table: Vec<u32>,
    allowed: Vec<Vec<Token>>,
    accepting: Vec<bool>,
    dfa_state: Vec<u32>,
    /// Fewest non-EOS tokens needed to reach an accepting state.
    min_tokens: Vec<Option<u32>>,
}

/// A compiled regex guide for one vocabulary.
#[derive(Debug, Clone)]
pub struct Guide {
    pattern: String,
    dfa: Dfa,
    index: TokenIndex,
    eos: Token,
}

/// Escapes regex metacharacters so `s` matches literally.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if "\\.+*?()|[]{}^$".contains(c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Compiles `regex` and indexes `vocab` against it.
pub fn compile_guide(regex: &str, vocab: &Vocabulary) -> Result<Guide, GuideError> {
    Guide::compile(regex, vocab)
}

impl Guide {
    pub fn compile(regex: &str, vocab: &Vocabulary) -> Result<Self, GuideError> {
        let ast = parse::parse(regex)?;
        let dfa = Dfa::from_ast(&ast);
        let index = TokenIndex::build(&dfa, vocab);
        Ok(Self { pattern: regex.to_string(), dfa, index, eos: vocab.eos() })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn dfa(&self) -> &Dfa {
        &self.dfa
    }

    pub fn index(&self) -> &TokenIndex {
        &self.index
    }

    /// The state before any token is consumed.
    pub fn initial(&self) -> GuideState {
        GuideState(0)
    }

    pub fn state_count(&self) -> usize {
        self.index.accepting.len()
    }

    /// True when no token sequence matches, at any length.
    pub fn is_empty_language(&self) -> bool {
        self.index.min_tokens[0].is_none()
    }

    pub fn is_accepting(&self, s: GuideState) -> bool {
        self.index.accepting[s.0 as usize]
    }

    /// Tokens (EOS included when accepting) whose surface keeps the
    /// detokenized text inside a live DFA state. Ascending id order.
    pub fn allowed(&self, s: GuideState) -> &[Token] {
        &self.index.allowed[s.0 as usize]
    }

    #[inline]
    pub fn is_allowed(&self, s: GuideState, t: Token) -> bool {
        self.index.step_table[s.0 as usize * self.index.vocab_len + t.index()] != REJECT
    }

    /// Consumes one token. EOS leaves an accepting state unchanged.
    pub fn step(&self, s: GuideState, t: Token) -> Result<GuideState, GuideError> {
        let next = self
            .index
            .step_table
            .get(s.0 as usize * self.index.vocab_len + t.index())
            .copied()
            .unwrap_or(REJECT);
        if next == REJECT {
            Err(GuideError::RejectedToken { state: s.0, token: t })
        } else {
            Ok(GuideState(next))
        }
    }

    /// Fewest non-EOS tokens that lead from `s` to an accepting state.
    pub fn min_tokens_to_accept(&self, s: GuideState) -> Option<usize> {
        self.index.min_tokens[s.0 as usize].map(|d| d as usize)
    }

    /// Shortest matching sequence length in tokens, EOS included.
    pub fn shortest_match_len(&self) -> Option<usize> {
        self.min_tokens_to_accept(self.initial()).map(|d| d + 1)
    }

    /// Whether `t` may be generated at `position` (tokens already emitted)
    /// so that the sequence can still end in an accepting state, with EOS,
    /// within `max_length` tokens.
    #[inline]
    pub fn fits(&self, s: GuideState, t: Token, position: usize, max_length: usize) -> bool {
        if t == self.eos {
            return self.is_accepting(s);
        }
        match self.step(s, t) {
            Ok(next) => self
                .min_tokens_to_accept(next)
                .is_some_and(|d| position + d + 2 <= max_length),
            Err(_) => false,
        }
    }

    /// Whether the token sequence (EOS optional) is in the guide's language.
    pub fn accepts(&self, tokens: &[Token]) -> bool {
        let mut s = self.initial();
        for &t in tokens {
            if t == self.eos {
                break;
            }
            match self.step(s, t) {
                Ok(n) => s = n,
                Err(_) => return false,
            }
        }
        self.is_accepting(s)
    }

    /// Whole-string match of the regex against `text`.
    pub fn matches_text(&self, text: &str) -> bool {
        self.dfa.matches(text)
    }

    /// The DFA state behind a token-level state.
    pub fn dfa_state(&self, s: GuideState) -> u32 {
        self.index.dfa_state[s.0 as usize]
    }
}

/// Decoding position inside a guide: current state, tokens emitted so far
/// and the generation cap. Masks are length-aware, so a permitted token
/// always leaves room to finish an accepted sequence with EOS.
#[derive(Debug, Clone, Copy)]
pub struct Cursor<'g> {
    guide: &'g Guide,
    state: GuideState,
    position: usize,
    max_length: usize,
}

impl<'g> Cursor<'g> {
    pub fn new(guide: &'g Guide, max_length: usize) -> Self {
        Self { guide, state: guide.initial(), position: 0, max_length }
    }

    #[inline]
    pub fn permits(&self, t: Token) -> bool {
        self.guide.fits(self.state, t, self.position, self.max_length)
    }

    pub fn advance(&mut self, t: Token) -> Result<(), GuideError> {
        self.state = self.guide.step(self.state, t)?;
        self.position += 1;
        Ok(())
    }

    pub fn state(&self) -> GuideState {
        self.state
    }

    pub fn position(&self) -> usize {
        self.position
    }
}

impl TokenIndex {
    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    fn build(dfa: &Dfa, vocab: &Vocabulary) -> Self {
        let v = vocab.len();
        let eos = vocab.eos();
        let mut ids: HashMap<(u32, bool), u32> = HashMap::new();
        let mut nodes: Vec<(u32, bool)> = Vec::new();
        let mut step_table: Vec<u32> = Vec::new();
        // State 0 is always the initial state, even when it is dead.
        nodes.push((dfa.start(), false));
        ids.insert((dfa.start(), false), 0);
        let mut i = 0;
        while i < nodes.len() {
            let (ds, started) = nodes[i];
            let mut row = vec![REJECT; v];
            if dfa.is_live(ds) {
                for t in vocab.non_eos_tokens() {
                    let mut s = ds;
                    if started {
                        s = dfa.next(s, b' ');
                    }
                    let s = dfa.run(s, vocab.surfaces()[t.index()].as_bytes());
                    if !dfa.is_live(s) {
                        continue;
                    }
                    let next_id = nodes.len() as u32;
                    let id = *ids.entry((s, true)).or_insert_with(|| {
                        nodes.push((s, true));
                        next_id
                    });
                    row[t.index()] = id;
                }
                if dfa.is_accepting(ds) {
                    row[eos.index()] = i as u32;
                }
            }
            step_table.extend_from_slice(&row);
            i += 1;
        }
        let n = nodes.len();
        let accepting: Vec<bool> = nodes.iter().map(|&(s, _)| dfa.is_accepting(s)).collect();
        let allowed: Vec<Vec<Token>> = (0..n)
            .map(|s| {
                (0..v)
                    .filter(|&t| step_table[s * v + t] != REJECT)
                    .map(Token::from)
                    .collect()
            })
            .collect();

        // Backward BFS over non-EOS token edges from the accepting states.
        let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
        for s in 0..n {
            for t in vocab.non_eos_tokens() {
                let next = step_table[s * v + t.index()];
                if next != REJECT {
                    preds[next as usize].push(s as u32);
                }
            }
        }
        let mut min_tokens: Vec<Option<u32>> =
            accepting.iter().map(|&a| if a { Some(0) } else { None }).collect();
        let mut queue: VecDeque<u32> = (0..n as u32).filter(|&s| accepting[s as usize]).collect();
        while let Some(s) = queue.pop_front() {
            let d = min_tokens[s as usize].unwrap();
            for &p in &preds[s as usize] {
                if min_tokens[p as usize].is_none() {
                    min_tokens[p as usize] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }

        Self {
            vocab_len: v,
            step_table,
            allowed,
            accepting,
            dfa_state: nodes.iter().map(|&(s, _)| s).collect(),
            min_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars() -> Vocabulary {
        Vocabulary::with_eos_last(["a", "b", "c", "EOS"]).unwrap()
    }
    const A: Token = Token(0);
    const B: Token = Token(1);
    const C: Token = Token(2);
    const E: Token = Token(3);

    fn reachable(g: &Guide) -> Vec<GuideState> {
        (0..g.state_count() as u32).map(GuideState).collect()
    }

    #[test]
    fn a_space_b_star() {
        // Tokens are joined by single spaces, so `a b*` matches "a b" (the
        // trailing `b*` absorbs exactly one b token) but not "a".
        let g = compile_guide("a b*", &chars()).unwrap();
        let s0 = g.initial();
        assert_eq!(g.allowed(s0), &[A]);
        let s1 = g.step(s0, A).unwrap();
        assert!(!g.is_accepting(s1));
        assert_eq!(g.allowed(s1), &[B]);
        let s2 = g.step(s1, B).unwrap();
        assert_eq!(g.allowed(s2), &[E]);
        assert!(reachable(&g).iter().all(|&s| !g.allowed(s).contains(&C)));
        assert_eq!(g.step(s0, B), Err(GuideError::RejectedToken { state: 0, token: B }));
        assert!(g.accepts(&[A, B, E]));
        assert!(!g.accepts(&[A, E]));
    }

    #[test]
    fn a_then_repeated_b_tokens() {
        let g = compile_guide("a( b)*", &chars()).unwrap();
        let s0 = g.initial();
        assert_eq!(g.allowed(s0), &[A]);
        let s1 = g.step(s0, A).unwrap();
        assert!(g.is_accepting(s1));
        assert_eq!(g.allowed(s1), &[B, E]);
        let s2 = g.step(s1, B).unwrap();
        assert_eq!(g.allowed(s2), &[B, E]);
        assert!(reachable(&g).iter().all(|&s| !g.allowed(s).contains(&C)));
        assert_eq!(g.step(s1, E).unwrap(), s1);
    }

    #[test]
    fn universal_language() {
        let g = compile_guide(".*", &chars()).unwrap();
        for s in reachable(&g) {
            assert_eq!(g.allowed(s), &[A, B, C, E]);
            assert!(g.is_accepting(s));
        }
        let s1 = g.step(g.initial(), B).unwrap();
        assert_eq!(g.step(s1, C).unwrap(), s1);
        assert_eq!(g.step(s1, A).unwrap(), s1);
    }

    #[test]
    fn empty_intersection() {
        let g = compile_guide("x", &chars()).unwrap();
        assert!(g.allowed(g.initial()).is_empty());
        assert!(g.is_empty_language());
        assert_eq!(g.shortest_match_len(), None);
        let g = compile_guide("", &chars()).unwrap();
        assert_eq!(g.allowed(g.initial()), &[E]);
        assert_eq!(g.shortest_match_len(), Some(1));
    }

    #[test]
    fn index_invariants() {
        let vocab = Vocabulary::with_eos_last(["a", "ab", "b", "ba", "c", "</s>"]).unwrap();
        for p in ["(a|b)*", "a b*", "ab( ba)+", "[ab]+( c)?", "c|a b", ".*", "b?"] {
            let g = compile_guide(p, &vocab).unwrap();
            for s in reachable(&g) {
                for t in vocab.tokens() {
                    let allowed = g.allowed(s).contains(&t);
                    assert_eq!(allowed, g.is_allowed(s, t));
                    match g.step(s, t) {
                        Ok(n) => {
                            assert!(allowed);
                            assert!(g.dfa().is_live(g.dfa_state(n)));
                            if g.fits(s, t, 0, 64) && t != vocab.eos() {
                                assert!(g.min_tokens_to_accept(n).is_some(), "{p}: dead end");
                            }
                        }
                        Err(_) => assert!(!allowed),
                    }
                }
                assert_eq!(g.allowed(s).contains(&vocab.eos()), g.is_accepting(s));
            }
        }
    }

    #[test]
    fn token_level_dead_ends_are_not_permitted() {
        // "a" keeps the DFA live (it prefixes "ab"), but no token can follow
        // it because the next token would start with a space.
        let vocab = Vocabulary::with_eos_last(["a", "ab", "ba", "</s>"]).unwrap();
        let g = compile_guide("ab( ba)+", &vocab).unwrap();
        let s0 = g.initial();
        assert_eq!(g.allowed(s0), &[Token(0), Token(1)]);
        let after_a = g.step(s0, Token(0)).unwrap();
        assert_eq!(g.min_tokens_to_accept(after_a), None);
        let c = Cursor::new(&g, 8);
        assert!(!c.permits(Token(0)));
        assert!(c.permits(Token(1)));
    }

    #[test]
    fn length_aware_fit() {
        let vocab = Vocabulary::with_eos_last(["a", "b", "</s>"]).unwrap();
        let g = compile_guide("a a a|b", &vocab).unwrap();
        let s0 = g.initial();
        // "a a a" needs three tokens plus EOS.
        assert!(g.fits(s0, Token(0), 0, 4));
        assert!(!g.fits(s0, Token(0), 0, 3));
        assert!(g.fits(s0, Token(1), 0, 2));
        assert!(!g.fits(s0, Token(2), 0, 2));
    }
}
