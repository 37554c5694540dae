//! Words and polynomials over the operator alphabet `{PL, QL, L}`.
//!
//! A word is read left to right as operator composition, so the rightmost
//! letter acts on `u_k^0` first. A polynomial of order `i` stands for
//! `prefactor · t^i · P e^{tL} [Σ coeff · word] u_k^0`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

pub type Rational = Ratio<i64>;

/// Operator letter. The derived ordering `PL < QL < L` is the canonical one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    PL,
    QL,
    L,
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Letter::PL => "PL",
            Letter::QL => "QL",
            Letter::L => "L",
        })
    }
}

/// Serialized as its space-separated display form, e.g. `"PL QL"`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OperatorWord(pub Vec<Letter>);

impl Serialize for OperatorWord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OperatorWord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OperatorWord::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid operator word {s:?}")))
    }
}

impl OperatorWord {
    pub fn new(letters: impl Into<Vec<Letter>>) -> Self {
        Self(letters.into())
    }

    /// Parses space- or dot-separated letters, e.g. `"PL QL QL"`.
    pub fn parse(s: &str) -> Option<Self> {
        let letters: Option<Vec<Letter>> = s
            .split(|c: char| c.is_whitespace() || c == '.' || c == '·')
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "PL" => Some(Letter::PL),
                "QL" => Some(Letter::QL),
                "L" => Some(Letter::L),
                _ => None,
            })
            .collect();
        letters.filter(|l| !l.is_empty()).map(Self)
    }

    pub fn letters(&self) -> &[Letter] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_projected(&self) -> bool {
        self.0.first() == Some(&Letter::PL)
    }

    /// All words obtained by replacing each `L` with `PL` or `QL`.
    fn expand_l(&self) -> Vec<OperatorWord> {
        let mut out = vec![Vec::with_capacity(self.0.len())];
        for &letter in &self.0 {
            if letter == Letter::L {
                let mut next = Vec::with_capacity(out.len() * 2);
                for w in out {
                    let mut a = w.clone();
                    a.push(Letter::PL);
                    let mut b = w;
                    b.push(Letter::QL);
                    next.push(a);
                    next.push(b);
                }
                out = next;
            } else {
                out.iter_mut().for_each(|w| w.push(letter));
            }
        }
        out.into_iter().map(OperatorWord).collect()
    }
}

impl fmt::Display for OperatorWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// `prefactor · t^order · Σ coeff · word`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorPoly {
    pub order: usize,
    pub prefactor: Rational,
    pub terms: BTreeMap<OperatorWord, Rational>,
}

impl OperatorPoly {
    pub fn new(order: usize, prefactor: Rational) -> Self {
        Self {
            order,
            prefactor,
            terms: BTreeMap::new(),
        }
    }

    /// Adds `coeff · word`, dropping the entry if it cancels.
    pub fn add(&mut self, word: OperatorWord, coeff: Rational) {
        match self.terms.entry(word) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += coeff;
                if e.get().is_zero() {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                if !coeff.is_zero() {
                    e.insert(coeff);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, word: &OperatorWord) -> Rational {
        self.terms.get(word).copied().unwrap_or_else(Rational::zero)
    }

    /// Coefficient of `word` including the prefactor.
    pub fn absolute_coefficient(&self, word: &OperatorWord) -> Rational {
        self.coefficient(word) * self.prefactor
    }

    /// Rescales so the prefactor becomes `prefactor`, keeping the value.
    pub fn with_prefactor(&self, prefactor: Rational) -> Self {
        let scale = self.prefactor / prefactor;
        Self {
            order: self.order,
            prefactor,
            terms: self
                .terms
                .iter()
                .map(|(w, c)| (w.clone(), *c * scale))
                .collect(),
        }
    }

    /// Terms as `(coeff, word)` ordered by descending |coeff|, then by word.
    pub fn sorted_terms(&self) -> Vec<(Rational, &OperatorWord)> {
        let mut v: Vec<_> = self.terms.iter().map(|(w, c)| (*c, w)).collect();
        v.sort_by(|a, b| b.0.abs().cmp(&a.0.abs()).then_with(|| a.1.cmp(b.1)));
        v
    }

    /// S-expression form `(poly <order> <prefactor> (<coeff> PL QL) ...)`.
    pub fn to_sexpr(&self) -> String {
        let mut s = format!("(poly {} {}", self.order, self.prefactor);
        for (w, c) in &self.terms {
            s.push_str(&format!("\n  ({c} {w})"));
        }
        s.push(')');
        s
    }
}

impl fmt::Display for OperatorPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} t^{} [", self.prefactor, self.order)?;
        for (i, (w, c)) in self.terms.iter().enumerate() {
            match (i, c.is_negative()) {
                (0, true) => f.write_str("-")?,
                (0, false) => {}
                (_, true) => f.write_str(" - ")?,
                (_, false) => f.write_str(" + ")?,
            }
            let mag = c.abs();
            if mag.is_one() {
                write!(f, "{w}")?;
            } else {
                write!(f, "{mag}·{w}")?;
            }
        }
        f.write_str("]")
    }
}

fn factorial(n: usize) -> i64 {
    (1..=n as i64).product()
}

/// `(-1)^{i+1} / i!`, the prefactor convention used for order `i`.
pub fn standard_prefactor(order: usize) -> Rational {
    let sign = if order % 2 == 1 { 1 } else { -1 };
    Rational::new(sign, factorial(order))
}

/// Expands `L` letters and merges equal words. With `commuting`, `PL` and
/// `QL` are treated as commuting operators: the final letter (the one acting
/// on `u_k^0`) stays in place, the remaining letters are sorted with `QL`
/// first, and words that then begin with `QL` are dropped because
/// `P e^{tL} QL = P QL e^{tL} = 0` once `QL` commutes with `L`.
pub fn canonicalize(poly: &OperatorPoly, commuting: bool) -> OperatorPoly {
    let mut out = OperatorPoly::new(poly.order, poly.prefactor);
    for (word, coeff) in &poly.terms {
        for w in word.expand_l() {
            if commuting {
                let mut letters = w.0;
                if let Some((_, prefix)) = letters.split_last_mut() {
                    prefix.sort_by(|a, b| b.cmp(a));
                }
                if letters.len() > 1 && letters[0] == Letter::QL {
                    continue;
                }
                out.add(OperatorWord(letters), *coeff);
            } else {
                out.add(w, *coeff);
            }
        }
    }
    out
}

/// Complete memory approximation for orders `1..=n`, one fully projected
/// polynomial per order with prefactor `(-1)^{i+1}/i!`.
///
/// Every pending term `c t^p P e^{tL} W u^0` whose word starts with `QL` is
/// replaced by its own termwise-integrated memory expansion
/// `Σ_{i,j} (-1)^i t^{i+j+1} / (i! j! (i+j+1)) L^i PL (QL)^j W`; words
/// starting with `L` are split into `PL` and `QL` branches; words starting
/// with `PL` are closed.
pub fn complete_memory_operator_terms(n: usize) -> Vec<OperatorPoly> {
    let mut closed: Vec<OperatorPoly> = (1..=n)
        .map(|i| OperatorPoly::new(i, Rational::one()))
        .collect();
    let mut pending: Vec<(Rational, usize, Vec<Letter>)> =
        vec![(Rational::one(), 0, vec![Letter::QL])];
    while let Some((c, p, w)) = pending.pop() {
        match w[0] {
            Letter::PL => closed[p - 1].add(OperatorWord(w), c),
            Letter::L => {
                let mut a = w.clone();
                a[0] = Letter::PL;
                let mut b = w;
                b[0] = Letter::QL;
                pending.push((c, p, a));
                pending.push((c, p, b));
            }
            Letter::QL => {
                for i in 0..n.saturating_sub(p) {
                    for j in 0..n - p - i {
                        let sign = if i % 2 == 0 { 1 } else { -1 };
                        let coeff = c * Rational::new(
                            sign,
                            factorial(i) * factorial(j) * (i + j + 1) as i64,
                        );
                        let mut word = vec![Letter::L; i];
                        word.push(Letter::PL);
                        word.extend(std::iter::repeat_n(Letter::QL, j));
                        word.extend_from_slice(&w);
                        pending.push((coeff, p + i + j + 1, word));
                    }
                }
            }
        }
    }
    closed
        .into_iter()
        .map(|poly| canonicalize(&poly, false).with_prefactor(standard_prefactor(poly.order)))
        .collect()
}

/// BCH approximation for orders `1..=n`: order `j` is
/// `(-1)^{j+1} t^j / j! · (PL)^j QL`.
pub fn bch_operator_terms(n: usize) -> Vec<OperatorPoly> {
    (1..=n)
        .map(|j| {
            let mut p = OperatorPoly::new(j, standard_prefactor(j));
            let mut w = vec![Letter::PL; j];
            w.push(Letter::QL);
            p.add(OperatorWord(w), Rational::one());
            p
        })
        .collect()
}
