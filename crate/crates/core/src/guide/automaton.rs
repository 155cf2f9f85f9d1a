//! Thompson NFA, subset construction and live-state trimming.

use std::collections::{HashMap, VecDeque};

use super::parse::{Ast, ByteSet};

#[derive(Clone, Debug)]
enum NState {
    Byte(ByteSet, usize),
    Split(usize, usize),
    Eps(usize),
    Match,
}

/// Placeholder target patched once the successor fragment is known.
const HOLE: usize = usize::MAX;

struct Nfa {
    states: Vec<NState>,
}

struct Frag {
    start: usize,
    /// (state, which edge) pairs still pointing at `HOLE`.
    outs: Vec<(usize, u8)>,
}

impl Nfa {
    fn push(&mut self, s: NState) -> usize {
        self.states.push(s);
        self.states.len() - 1
    }

    fn patch(&mut self, outs: &[(usize, u8)], target: usize) {
        for &(s, which) in outs {
            match (&mut self.states[s], which) {
                (NState::Byte(_, n), _) | (NState::Eps(n), _) | (NState::Split(n, _), 0) => *n = target,
                (NState::Split(_, n), _) => *n = target,
                (NState::Match, _) => unreachable!("match state has no out edge"),
            }
        }
    }

    fn build(&mut self, ast: &Ast) -> Frag {
        match ast {
            Ast::Empty => {
                let s = self.push(NState::Eps(HOLE));
                Frag { start: s, outs: vec![(s, 0)] }
            }
            Ast::Class(set) => {
                let s = self.push(NState::Byte(*set, HOLE));
                Frag { start: s, outs: vec![(s, 0)] }
            }
            Ast::Concat(items) => {
                let mut frags = items.iter().map(|a| self.build(a)).collect::<Vec<_>>().into_iter();
                let first = frags.next().expect("concat has items");
                let start = first.start;
                let mut outs = first.outs;
                for f in frags {
                    self.patch(&outs, f.start);
                    outs = f.outs;
                }
                Frag { start, outs }
            }
            Ast::Alt(branches) => {
                let frags: Vec<Frag> = branches.iter().map(|a| self.build(a)).collect();
                let mut outs = Vec::new();
                let mut start = frags.last().unwrap().start;
                outs.extend(frags.last().unwrap().outs.iter().copied());
                for f in frags.iter().rev().skip(1) {
                    start = self.push(NState::Split(f.start, start));
                    outs.extend(f.outs.iter().copied());
                }
                Frag { start, outs }
            }
            Ast::Star(inner) => {
                let f = self.build(inner);
                let s = self.push(NState::Split(f.start, HOLE));
                self.patch(&f.outs, s);
                Frag { start: s, outs: vec![(s, 1)] }
            }
            Ast::Plus(inner) => {
                let f = self.build(inner);
                let s = self.push(NState::Split(f.start, HOLE));
                self.patch(&f.outs, s);
                Frag { start: f.start, outs: vec![(s, 1)] }
            }
            Ast::Opt(inner) => {
                let f = self.build(inner);
                let s = self.push(NState::Split(f.start, HOLE));
                let mut outs = f.outs;
                outs.push((s, 1));
                Frag { start: s, outs }
            }
        }
    }

    fn closure(&self, seeds: impl IntoIterator<Item = usize>, mark: &mut [bool]) -> Vec<usize> {
        let mut stack: Vec<usize> = seeds.into_iter().collect();
        let mut out = Vec::new();
        mark.iter_mut().for_each(|m| *m = false);
        while let Some(s) = stack.pop() {
            if mark[s] {
                continue;
            }
            mark[s] = true;
            match self.states[s] {
                NState::Split(a, b) => {
                    stack.push(b);
                    stack.push(a);
                }
                NState::Eps(n) => stack.push(n),
                NState::Byte(..) | NState::Match => out.push(s),
            }
        }
        out.sort_unstable();
        out
    }
}

/// Byte equivalence classes: bytes no NFA edge distinguishes share a class.
fn byte_classes(nfa: &Nfa) -> ([u8; 256], usize) {
    let mut class = [0u8; 256];
    let mut count = 1usize;
    for s in &nfa.states {
        let NState::Byte(set, _) = s else { continue };
        let mut remap: HashMap<(u8, bool), usize> = HashMap::new();
        for b in 0..=255u8 {
            let key = (class[b as usize], set.contains(b));
            let fresh = remap.len();
            class[b as usize] = *remap.entry(key).or_insert(fresh) as u8;
        }
        count = remap.len();
    }
    (class, count)
}

/// A trimmed DFA over bytes. State 0 is the dead state; every other state is
/// live (an accepting state is reachable from it).
#[derive(Clone, Debug)]
pub struct Dfa {
    classes: [u8; 256],
    num_classes: usize,
    trans: Vec<u32>,
    accepting: Vec<bool>,
    start: u32,
}

pub const DEAD: u32 = 0;

impl Dfa {
    pub fn from_ast(ast: &Ast) -> Self {
        let mut nfa = Nfa { states: Vec::new() };
        let frag = nfa.build(ast);
        let m = nfa.push(NState::Match);
        nfa.patch(&frag.outs, m);
        let (classes, num_classes) = byte_classes(&nfa);
        let mut representative = vec![0u8; num_classes];
        for b in (0..=255u8).rev() {
            representative[classes[b as usize] as usize] = b;
        }

        // Subset construction. Raw state 0 is the empty set (dead).
        let mut mark = vec![false; nfa.states.len()];
        let mut ids: HashMap<Vec<usize>, u32> = HashMap::new();
        let mut sets: Vec<Vec<usize>> = vec![Vec::new()];
        ids.insert(Vec::new(), 0);
        let start_set = nfa.closure([frag.start], &mut mark);
        let raw_start = *ids.entry(start_set.clone()).or_insert_with(|| {
            sets.push(start_set);
            (sets.len() - 1) as u32
        });
        let mut raw_trans: Vec<u32> = Vec::new();
        let mut i = 0;
        while i < sets.len() {
            for &r in &representative {
                let moved = sets[i].iter().filter_map(|&s| match nfa.states[s] {
                    NState::Byte(set, n) if set.contains(r) => Some(n),
                    _ => None,
                });
                let target = nfa.closure(moved.collect::<Vec<_>>(), &mut mark);
                let next_id = sets.len() as u32;
                let id = *ids.entry(target.clone()).or_insert_with(|| {
                    sets.push(target);
                    next_id
                });
                raw_trans.push(id);
            }
            i += 1;
        }
        let raw_accepting: Vec<bool> =
            sets.iter().map(|s| s.iter().any(|&n| matches!(nfa.states[n], NState::Match))).collect();

        // Live states: backward closure of the accepting set.
        let n = sets.len();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            for c in 0..num_classes {
                preds[raw_trans[s * num_classes + c] as usize].push(s);
            }
        }
        let mut live = raw_accepting.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| live[s]).collect();
        while let Some(s) = queue.pop_front() {
            for &p in &preds[s] {
                if !live[p] {
                    live[p] = true;
                    queue.push_back(p);
                }
            }
        }

        // Renumber: dead = 0, live states in discovery order from 1.
        let mut remap = vec![DEAD; n];
        let mut next = 1u32;
        for s in 0..n {
            if live[s] {
                remap[s] = next;
                next += 1;
            }
        }
        let count = next as usize;
        let mut trans = vec![DEAD; count * num_classes];
        let mut accepting = vec![false; count];
        for s in 0..n {
            if !live[s] {
                continue;
            }
            let t = remap[s] as usize;
            accepting[t] = raw_accepting[s];
            for c in 0..num_classes {
                trans[t * num_classes + c] = remap[raw_trans[s * num_classes + c] as usize];
            }
        }
        Dfa { classes, num_classes, trans, accepting, start: remap[raw_start as usize] }
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    /// Number of states including the dead state.
    pub fn state_count(&self) -> usize {
        self.accepting.len()
    }

    #[inline]
    pub fn next(&self, state: u32, byte: u8) -> u32 {
        self.trans[state as usize * self.num_classes + self.classes[byte as usize] as usize]
    }

    pub fn run(&self, mut state: u32, bytes: &[u8]) -> u32 {
        for &b in bytes {
            if state == DEAD {
                break;
            }
            state = self.next(state, b);
        }
        state
    }

    pub fn is_accepting(&self, state: u32) -> bool {
        self.accepting[state as usize]
    }

    pub fn is_live(&self, state: u32) -> bool {
        state != DEAD
    }

    pub fn matches(&self, text: &str) -> bool {
        self.is_accepting(self.run(self.start, text.as_bytes()))
    }
}
