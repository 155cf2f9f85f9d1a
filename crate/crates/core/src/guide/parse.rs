//! Regex syntax: literals, concatenation, `|`, `*`, `+`, `?`, `.`, bracket
//! classes, groups and backslash escapes (`\d \w \s \D \W \S \n \t \r` plus
//! escaped punctuation). Patterns are ASCII and match whole strings.

use super::GuideError;

/// A set of bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct ByteSet([u64; 4]);

impl ByteSet {
    pub fn single(b: u8) -> Self {
        let mut s = Self::default();
        s.insert(b);
        s
    }

    pub fn range(lo: u8, hi: u8) -> Self {
        let mut s = Self::default();
        for b in lo..=hi {
            s.insert(b);
        }
        s
    }

    pub fn insert(&mut self, b: u8) {
        self.0[(b >> 6) as usize] |= 1 << (b & 63);
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0[(b >> 6) as usize] & (1 << (b & 63)) != 0
    }

    pub fn union(mut self, other: ByteSet) -> Self {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a |= b;
        }
        self
    }

    /// Complement within ASCII.
    pub fn negate_ascii(self) -> Self {
        let mut s = Self::default();
        for b in 0..128u8 {
            if !self.contains(b) {
                s.insert(b);
            }
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ast {
    Empty,
    Class(ByteSet),
    Concat(Vec<Ast>),
    Alt(Vec<Ast>),
    Star(Box<Ast>),
    Plus(Box<Ast>),
    Opt(Box<Ast>),
}

pub fn parse(pattern: &str) -> Result<Ast, GuideError> {
    if let Some(pos) = pattern.bytes().position(|b| !b.is_ascii()) {
        return Err(syntax(pos, "non-ASCII character"));
    }
    let mut p = Parser { src: pattern.as_bytes(), pos: 0 };
    let ast = p.alternation()?;
    if p.pos < p.src.len() {
        // Only an unmatched `)` stops the top-level alternation early.
        return Err(syntax(p.pos, "unmatched `)`"));
    }
    Ok(ast)
}

fn syntax(position: usize, msg: &str) -> GuideError {
    GuideError::RegexSyntax { position, message: msg.to_string() }
}

fn digit() -> ByteSet {
    ByteSet::range(b'0', b'9')
}

fn word() -> ByteSet {
    ByteSet::range(b'a', b'z')
        .union(ByteSet::range(b'A', b'Z'))
        .union(digit())
        .union(ByteSet::single(b'_'))
}

fn space() -> ByteSet {
    [b' ', b'\t', b'\n', b'\r', 0x0b, 0x0c]
        .into_iter()
        .fold(ByteSet::default(), |s, b| s.union(ByteSet::single(b)))
}

fn any_but_newline() -> ByteSet {
    ByteSet::single(b'\n').negate_ascii()
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn alternation(&mut self) -> Result<Ast, GuideError> {
        let mut branches = vec![self.concatenation()?];
        while self.peek() == Some(b'|') {
            self.pos += 1;
            branches.push(self.concatenation()?);
        }
        Ok(if branches.len() == 1 { branches.pop().unwrap() } else { Ast::Alt(branches) })
    }

    fn concatenation(&mut self) -> Result<Ast, GuideError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == b'|' || c == b')' {
                break;
            }
            items.push(self.repetition()?);
        }
        Ok(match items.len() {
            0 => Ast::Empty,
            1 => items.pop().unwrap(),
            _ => Ast::Concat(items),
        })
    }

    fn repetition(&mut self) -> Result<Ast, GuideError> {
        let mut atom = self.atom()?;
        while let Some(op) = self.peek() {
            atom = match op {
                b'*' => Ast::Star(Box::new(atom)),
                b'+' => Ast::Plus(Box::new(atom)),
                b'?' => Ast::Opt(Box::new(atom)),
                _ => break,
            };
            self.pos += 1;
        }
        Ok(atom)
    }

    fn atom(&mut self) -> Result<Ast, GuideError> {
        let start = self.pos;
        let c = self.peek().ok_or_else(|| syntax(start, "unexpected end of pattern"))?;
        self.pos += 1;
        match c {
            b'(' => {
                let inner = self.alternation()?;
                if self.peek() != Some(b')') {
                    return Err(syntax(start, "unclosed group"));
                }
                self.pos += 1;
                Ok(inner)
            }
            b'*' | b'+' | b'?' => Err(syntax(start, "repetition operator with nothing to repeat")),
            b'[' => self.class(start).map(Ast::Class),
            b'.' => Ok(Ast::Class(any_but_newline())),
            b'\\' => self.escape(start).map(Ast::Class),
            _ => Ok(Ast::Class(ByteSet::single(c))),
        }
    }

    fn escape(&mut self, start: usize) -> Result<ByteSet, GuideError> {
        let c = self.peek().ok_or_else(|| syntax(start, "dangling escape"))?;
        self.pos += 1;
        Ok(match c {
            b'd' => digit(),
            b'D' => digit().negate_ascii(),
            b'w' => word(),
            b'W' => word().negate_ascii(),
            b's' => space(),
            b'S' => space().negate_ascii(),
            b'n' => ByteSet::single(b'\n'),
            b't' => ByteSet::single(b'\t'),
            b'r' => ByteSet::single(b'\r'),
            c if c.is_ascii_alphanumeric() => {
                return Err(syntax(start, "unsupported escape sequence"));
            }
            c => ByteSet::single(c),
        })
    }

    fn class(&mut self, start: usize) -> Result<ByteSet, GuideError> {
        let negated = self.peek() == Some(b'^');
        if negated {
            self.pos += 1;
        }
        let mut set = ByteSet::default();
        let mut first = true;
        loop {
            let item_pos = self.pos;
            let c = self.peek().ok_or_else(|| syntax(start, "unclosed character class"))?;
            if c == b']' && !first {
                self.pos += 1;
                break;
            }
            first = false;
            self.pos += 1;
            let lo = match c {
                b'\\' => {
                    let e = self.escape(item_pos)?;
                    // Multi-byte escapes cannot start a range.
                    if e.0.iter().map(|w| w.count_ones()).sum::<u32>() != 1 {
                        set = set.union(e);
                        continue;
                    }
                    (0..=255u8).find(|&b| e.contains(b)).unwrap()
                }
                c => c,
            };
            if self.peek() == Some(b'-') && self.src.get(self.pos + 1).is_some_and(|&n| n != b']') {
                self.pos += 1;
                let hi_pos = self.pos;
                let mut hi = self.src[self.pos];
                self.pos += 1;
                if hi == b'\\' {
                    let e = self.escape(hi_pos)?;
                    if e.0.iter().map(|w| w.count_ones()).sum::<u32>() != 1 {
                        return Err(syntax(hi_pos, "class escape cannot end a range"));
                    }
                    hi = (0..=255u8).find(|&b| e.contains(b)).unwrap();
                }
                if hi < lo {
                    return Err(syntax(item_pos, "reversed range in character class"));
                }
                set = set.union(ByteSet::range(lo, hi));
            } else {
                set.insert(lo);
            }
        }
        let set = if negated { set.negate_ascii() } else { set };
        if set.is_empty() {
            return Err(syntax(start, "empty character class"));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_pos(p: &str) -> usize {
        match parse(p) {
            Err(GuideError::RegexSyntax { position, .. }) => position,
            other => panic!("expected syntax error for {p:?}, got {other:?}"),
        }
    }

    #[test]
    fn parses_supported_constructs() {
        assert_eq!(parse("").unwrap(), Ast::Empty);
        assert_eq!(parse("a").unwrap(), Ast::Class(ByteSet::single(b'a')));
        assert!(matches!(parse("a|b").unwrap(), Ast::Alt(v) if v.len() == 2));
        assert!(matches!(parse("(ab)*").unwrap(), Ast::Star(_)));
        assert!(matches!(parse("a+?").unwrap(), Ast::Opt(_)));
        assert!(parse("[a-z0-9_-]+").is_ok());
        assert!(parse("[]a]").is_ok());
        assert!(parse("\\-mem2reg( \\-sroa)?").is_ok());
        assert!(parse("()").is_ok());
        assert!(parse("a||b").is_ok());
    }

    #[test]
    fn class_contents() {
        let Ast::Class(s) = parse("[^a-y]").unwrap() else { panic!() };
        assert!(s.contains(b'z') && !s.contains(b'a') && !s.contains(b'm'));
        let Ast::Class(s) = parse("[\\d.]").unwrap() else { panic!() };
        assert!(s.contains(b'7') && s.contains(b'.') && !s.contains(b'a'));
        let Ast::Class(s) = parse(".").unwrap() else { panic!() };
        assert!(s.contains(b' ') && !s.contains(b'\n'));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        assert_eq!(err_pos("ab)"), 2);
        assert_eq!(err_pos("a(b"), 1);
        assert_eq!(err_pos("*a"), 0);
        assert_eq!(err_pos("a|+"), 2);
        assert_eq!(err_pos("[abc"), 0);
        assert_eq!(err_pos("x[z-a]"), 2);
        assert_eq!(err_pos("ab\\"), 2);
        assert_eq!(err_pos("\\q"), 0);
        assert_eq!(err_pos("é"), 0);
    }
}
