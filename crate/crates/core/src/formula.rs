//! Text formula mini-language for mixed models.
//!
//! ```text
//! quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)
//! ```
//!
//! - `a*b` expands to `a + b + a:b`; `a:b` is an interaction.
//! - `1` / `0` (or `-1`) keep or drop the intercept.
//! - `log(x)` is the natural log of a numeric column.
//! - `(expr|g1:g2)` is a random-effect term whose random vector is coded by
//!   `expr`, with one level per unique combination of the grouping factors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Parametrization;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Atom {
    Var(String),
    Log(String),
}

impl Atom {
    /// Name of the underlying data column.
    pub fn column(&self) -> &str {
        match self {
            Atom::Var(c) | Atom::Log(c) => c,
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Var(c) => write!(f, "{c}"),
            Atom::Log(c) => write!(f, "log({c})"),
        }
    }
}

/// Interaction of atoms; the empty term is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term(pub Vec<Atom>);

impl Term {
    pub fn degree(&self) -> usize {
        self.0.len()
    }

    /// Same atoms irrespective of order.
    fn canonical(&self) -> Vec<Atom> {
        let mut a = self.0.clone();
        a.sort();
        a
    }

    pub fn same_as(&self, other: &Term) -> bool {
        self.canonical() == other.canonical()
    }

    /// The term without atom `i`.
    pub fn without(&self, i: usize) -> Term {
        let mut a = self.0.clone();
        a.remove(i);
        Term(a)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        write!(f, "{}", parts.join(":"))
    }
}

/// Fixed part of a formula (or the coding expression inside a random term).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl Effects {
    /// Whether `t` (possibly the intercept) is part of the model.
    pub fn contains(&self, t: &Term) -> bool {
        if t.0.is_empty() {
            return self.intercept;
        }
        self.terms.iter().any(|x| x.same_as(t))
    }
}

impl fmt::Display for Effects {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec![if self.intercept { "1".to_string() } else { "0".to_string() }];
        parts.extend(self.terms.iter().map(|t| t.to_string()));
        write!(f, "{}", parts.join(" + "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub effects: Effects,
    pub group: Vec<String>,
}

impl RandomTerm {
    pub fn group_name(&self) -> String {
        self.group.join(":")
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.effects.intercept {
            parts.push("1".to_string());
        } else {
            parts.push("0".to_string());
        }
        parts.extend(self.effects.terms.iter().map(|t| t.to_string()));
        write!(f, "({}|{})", parts.join("+"), self.group_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub fixed: Effects,
    pub random: Vec<RandomTerm>,
}

impl Formula {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, pos: 0 };
        if p.peek() == Some(&Tok::Tilde) {
            p.pos += 1;
        }
        let sum = p.sum()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Formula(format!("unexpected trailing input in `{text}`")));
        }
        let mut random = Vec::new();
        let mut raw = Vec::new();
        for item in sum.items {
            match item {
                Item::Random(r) => random.push(r),
                other => raw.push(other),
            }
        }
        let fixed = build_effects(raw, sum.neg_intercept)?;
        Ok(Self { fixed, random })
    }

    /// Columns referenced anywhere in the formula.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        let mut push = |c: &str| {
            if !cols.iter().any(|x| x == c) {
                cols.push(c.to_string());
            }
        };
        for t in &self.fixed.terms {
            t.0.iter().for_each(|a| push(a.column()));
        }
        for r in &self.random {
            for t in &r.effects.terms {
                t.0.iter().for_each(|a| push(a.column()));
            }
            r.group.iter().for_each(|g| push(g));
        }
        cols
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.fixed.intercept {
            parts.push("0".to_string());
        } else if self.fixed.terms.is_empty() {
            parts.push("1".to_string());
        }
        parts.extend(self.fixed.terms.iter().map(|t| t.to_string()));
        parts.extend(self.random.iter().map(|r| r.to_string()));
        write!(f, "{}", parts.join(" + "))
    }
}

/// Mean and dispersion formulas plus the count parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaSpec {
    pub mean: Formula,
    pub dispersion: Formula,
    pub parametrization: Parametrization,
}

impl FormulaSpec {
    pub fn parse(mean: &str, dispersion: &str, parametrization: Parametrization) -> Result<Self> {
        let mean = Formula::parse(mean)?;
        if !mean.fixed.intercept {
            return Err(Error::Formula("the mean model needs an intercept".into()));
        }
        Ok(Self { mean, dispersion: Formula::parse(dispersion)?, parametrization })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Plus,
    Minus,
    Star,
    Colon,
    Bar,
    LParen,
    RParen,
    Tilde,
}

fn tokenize(text: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => {}
            '+' => out.push(Tok::Plus),
            '-' => out.push(Tok::Minus),
            '*' => out.push(Tok::Star),
            ':' => out.push(Tok::Colon),
            '|' => out.push(Tok::Bar),
            '(' => out.push(Tok::LParen),
            ')' => out.push(Tok::RParen),
            '~' => out.push(Tok::Tilde),
            c if c.is_ascii_digit() => {
                let start = i;
                while i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                    i += 1;
                }
                out.push(Tok::Num(chars[start..=i].iter().collect()));
            }
            c if c.is_alphabetic() || c == '_' || c == '.' => {
                let start = i;
                while i + 1 < chars.len()
                    && (chars[i + 1].is_alphanumeric() || chars[i + 1] == '_' || chars[i + 1] == '.')
                {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..=i].iter().collect()));
            }
            other => return Err(Error::Formula(format!("unexpected character `{other}` in `{text}`"))),
        }
        i += 1;
    }
    Ok(out)
}

enum Item {
    One,
    Zero,
    Product(Vec<Vec<Atom>>),
    Random(RandomTerm),
}

struct Sum {
    items: Vec<Item>,
    neg_intercept: bool,
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(Error::Formula(format!("expected {t:?}, found {got:?}"))),
        }
    }

    fn sum(&mut self) -> Result<Sum> {
        let mut items = Vec::new();
        let mut neg_intercept = false;
        let mut negate = false;
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            negate = true;
        }
        loop {
            let item = self.term()?;
            if negate {
                match item {
                    Item::One => neg_intercept = true,
                    _ => return Err(Error::Formula("only `-1` may be subtracted".into())),
                }
            } else {
                items.push(item);
            }
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    negate = false;
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    negate = true;
                }
                _ => break,
            }
        }
        Ok(Sum { items, neg_intercept })
    }

    fn term(&mut self) -> Result<Item> {
        if self.peek() == Some(&Tok::LParen) {
            // Either a random term or a function call never starts with '('.
            self.pos += 1;
            let inner = self.sum()?;
            self.expect(Tok::Bar)?;
            let mut group = vec![self.ident()?];
            while self.peek() == Some(&Tok::Colon) {
                self.pos += 1;
                group.push(self.ident()?);
            }
            self.expect(Tok::RParen)?;
            let effects = build_effects(
                inner.items.into_iter().map(|i| match i {
                    Item::Random(_) => Err(Error::Formula("nested random terms".into())),
                    other => Ok(other),
                }).collect::<Result<Vec<_>>>()?,
                inner.neg_intercept,
            )?;
            return Ok(Item::Random(RandomTerm { effects, group }));
        }
        if let Some(Tok::Num(n)) = self.peek().cloned() {
            self.pos += 1;
            return match n.as_str() {
                "1" => Ok(Item::One),
                "0" => Ok(Item::Zero),
                other => Err(Error::Formula(format!("unexpected number `{other}`"))),
            };
        }
        let mut factors = vec![self.interaction()?];
        while self.peek() == Some(&Tok::Star) {
            self.pos += 1;
            factors.push(self.interaction()?);
        }
        Ok(Item::Product(factors))
    }

    fn interaction(&mut self) -> Result<Vec<Atom>> {
        let mut atoms = vec![self.atom()?];
        while self.peek() == Some(&Tok::Colon) {
            self.pos += 1;
            atoms.push(self.atom()?);
        }
        Ok(atoms)
    }

    fn atom(&mut self) -> Result<Atom> {
        let name = self.ident()?;
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let arg = self.ident()?;
            self.expect(Tok::RParen)?;
            return match name.as_str() {
                "log" => Ok(Atom::Log(arg)),
                other => Err(Error::Formula(format!("unsupported function `{other}`"))),
            };
        }
        Ok(Atom::Var(name))
    }

    fn ident(&mut self) -> Result<String> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            got => Err(Error::Formula(format!("expected a name, found {got:?}"))),
        }
    }
}

fn build_effects(items: Vec<Item>, neg_intercept: bool) -> Result<Effects> {
    let mut intercept = true;
    let mut terms: Vec<Term> = Vec::new();
    for item in items {
        match item {
            Item::One => intercept = true,
            Item::Zero => intercept = false,
            Item::Product(factors) => {
                let n = factors.len();
                for mask in 1u32..(1u32 << n) {
                    let mut atoms = Vec::new();
                    for (i, f) in factors.iter().enumerate() {
                        if mask & (1 << i) != 0 {
                            atoms.extend(f.iter().cloned());
                        }
                    }
                    let t = Term(atoms);
                    if !terms.iter().any(|x| x.same_as(&t)) {
                        terms.push(t);
                    }
                }
            }
            Item::Random(_) => unreachable!("random terms are split off by the caller"),
        }
    }
    if neg_intercept {
        intercept = false;
    }
    terms.sort_by_key(|t| t.degree());
    Ok(Effects { intercept, terms })
}
