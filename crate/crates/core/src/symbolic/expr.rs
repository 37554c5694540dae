//! Convolution trees produced by applying operator words to `u_k^0`.
//!
//! The Liouvillian of the truncated system acts on the two leaves as
//!
//! ```text
//! L û = Disp(û) + Ĉ(û + ũ, û + ũ)
//! L ũ = Disp(ũ) + C̃(û + ũ, û + ũ)
//! ```
//!
//! with `Disp(e) = iε²k³ e`, and extends to every other node as a
//! derivation: `L Disp(e) = Disp(L e)` and
//! `L C(a, b) = C(L a, b) + C(a, L b)`. Expressions are kept as linear
//! combinations of hash-consed monomials whose convolution arguments are
//! sorted, so symmetric duplicates merge into integer multiplicities. `P`
//! keeps the monomials free of `ũ` and `Q` keeps the rest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use super::operator::{Letter, OperatorPoly, Rational};
use crate::error::{Error, Result};
use crate::spectral::{
    conv_truncated, scale_by_k_power, ModePartition, ModeSet, SpectralField, C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

/// One node of a convolution tree; children are referenced by id and
/// always precede their parent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvNode {
    /// `û`, the resolved leaf.
    Resolved,
    /// `ũ`, the unresolved leaf.
    Unresolved,
    /// `iε²k³` times the child.
    Disp(NodeId),
    /// `-(ik/2) Σ a_p b_q` with the output restricted to `retain`; `a <= b`.
    Conv {
        retain: ModeSet,
        a: NodeId,
        b: NodeId,
    },
}

type Lin = BTreeMap<NodeId, Rational>;

fn add_to(lin: &mut Lin, id: NodeId, c: Rational) {
    if c.is_zero() {
        return;
    }
    let e = lin.entry(id).or_insert_with(Rational::zero);
    *e += c;
    if e.is_zero() {
        lin.remove(&id);
    }
}

#[derive(Default)]
struct Arena {
    nodes: Vec<ConvNode>,
    index: HashMap<ConvNode, NodeId>,
    unresolved: Vec<bool>,
    lie: HashMap<NodeId, Rc<Lin>>,
    words: HashMap<Vec<Letter>, Rc<Lin>>,
}

impl Arena {
    fn intern(&mut self, node: ConvNode) -> NodeId {
        let node = match node {
            ConvNode::Conv { retain, a, b } if b < a => ConvNode::Conv { retain, a: b, b: a },
            n => n,
        };
        if let Some(&id) = self.index.get(&node) {
            return id;
        }
        let has_tilde = match &node {
            ConvNode::Resolved => false,
            ConvNode::Unresolved => true,
            ConvNode::Disp(c) => self.unresolved[c.0 as usize],
            ConvNode::Conv { a, b, .. } => {
                self.unresolved[a.0 as usize] || self.unresolved[b.0 as usize]
            }
        };
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node.clone());
        self.unresolved.push(has_tilde);
        self.index.insert(node, id);
        id
    }

    fn leaf_sum(&mut self) -> Lin {
        let mut l = Lin::new();
        add_to(&mut l, self.intern(ConvNode::Resolved), Rational::one());
        add_to(&mut l, self.intern(ConvNode::Unresolved), Rational::one());
        l
    }

    fn disp(&mut self, a: &Lin) -> Lin {
        let mut out = Lin::new();
        for (&id, &c) in a {
            let d = self.intern(ConvNode::Disp(id));
            add_to(&mut out, d, c);
        }
        out
    }

    fn conv(&mut self, retain: ModeSet, a: &Lin, b: &Lin) -> Lin {
        let mut out = Lin::new();
        for (&x, &cx) in a {
            for (&y, &cy) in b {
                let id = self.intern(ConvNode::Conv { retain, a: x, b: y });
                add_to(&mut out, id, cx * cy);
            }
        }
        out
    }

    fn single(id: NodeId) -> Lin {
        let mut l = Lin::new();
        l.insert(id, Rational::one());
        l
    }

    fn liouville(&mut self, id: NodeId) -> Rc<Lin> {
        if let Some(l) = self.lie.get(&id) {
            return l.clone();
        }
        let out = match self.nodes[id.0 as usize].clone() {
            leaf @ (ConvNode::Resolved | ConvNode::Unresolved) => {
                let retain = if leaf == ConvNode::Resolved {
                    ModeSet::Resolved
                } else {
                    ModeSet::Unresolved
                };
                let mut out = self.disp(&Self::single(id));
                let u = self.leaf_sum();
                for (k, c) in self.conv(retain, &u, &u) {
                    add_to(&mut out, k, c);
                }
                out
            }
            ConvNode::Disp(child) => {
                let lc = self.liouville(child);
                self.disp(&lc)
            }
            ConvNode::Conv { retain, a, b } => {
                let la = self.liouville(a);
                let lb = self.liouville(b);
                let mut out = self.conv(retain, &la, &Self::single(b));
                for (k, c) in self.conv(retain, &Self::single(a), &lb) {
                    add_to(&mut out, k, c);
                }
                out
            }
        };
        let out = Rc::new(out);
        self.lie.insert(id, out.clone());
        out
    }

    fn apply(&mut self, letters: &[Letter]) -> Rc<Lin> {
        if let Some(l) = self.words.get(letters) {
            return l.clone();
        }
        let out = match letters.split_first() {
            None => {
                let u = self.intern(ConvNode::Resolved);
                Rc::new(Self::single(u))
            }
            Some((&first, rest)) => {
                let inner = self.apply(rest);
                let mut out = Lin::new();
                for (&id, &c) in inner.iter() {
                    let l = self.liouville(id);
                    for (&k, &v) in l.iter() {
                        let keep = match first {
                            Letter::L => true,
                            Letter::PL => !self.unresolved[k.0 as usize],
                            Letter::QL => self.unresolved[k.0 as usize],
                        };
                        if keep {
                            add_to(&mut out, k, c * v);
                        }
                    }
                }
                Rc::new(out)
            }
        };
        self.words.insert(letters.to_vec(), out.clone());
        out
    }

    /// Copies the nodes reachable from `lin` into a compact expression.
    fn extract(&self, lin: &Lin) -> ConvExpr {
        let mut reach = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = lin.keys().copied().collect();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut reach[id.0 as usize], true) {
                continue;
            }
            match &self.nodes[id.0 as usize] {
                ConvNode::Disp(c) => stack.push(*c),
                ConvNode::Conv { a, b, .. } => {
                    stack.push(*a);
                    stack.push(*b);
                }
                _ => {}
            }
        }
        let mut remap = vec![NodeId(u32::MAX); self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !reach[i] {
                continue;
            }
            remap[i] = NodeId(nodes.len() as u32);
            nodes.push(match node {
                ConvNode::Disp(c) => ConvNode::Disp(remap[c.0 as usize]),
                ConvNode::Conv { retain, a, b } => {
                    let (a, b) = (remap[a.0 as usize], remap[b.0 as usize]);
                    ConvNode::Conv {
                        retain: *retain,
                        a: a.min(b),
                        b: a.max(b),
                    }
                }
                n => n.clone(),
            });
        }
        let mut terms: Vec<(Rational, NodeId)> = lin
            .iter()
            .map(|(id, c)| (*c, remap[id.0 as usize]))
            .collect();
        terms.sort_by_key(|t| t.1);
        ConvExpr { nodes, terms }
    }
}

/// A linear combination `Σ c_j · node_j` of convolution trees sharing one
/// node table. Coefficients are exact rationals; every factor `iε²` is
/// carried by a [`ConvNode::Disp`] node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvExpr {
    nodes: Vec<ConvNode>,
    terms: Vec<(Rational, NodeId)>,
}

impl ConvExpr {
    pub fn nodes(&self) -> &[ConvNode] {
        &self.nodes
    }

    pub fn terms(&self) -> &[(Rational, NodeId)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains_unresolved(&self) -> bool {
        self.nodes.contains(&ConvNode::Unresolved)
    }

    /// Evaluates on a resolved field; `u_hat` must vanish outside `|k| < N`.
    /// The result has `k_max = M - 1` and is supported on the resolved set.
    pub fn evaluate(
        &self,
        u_hat: &SpectralField,
        epsilon: f64,
        partition: &ModePartition,
    ) -> Result<SpectralField> {
        if self.contains_unresolved() {
            return Err(Error::Symbolic(
                "expression still contains the unresolved leaf; evaluate_with needs ũ".into(),
            ));
        }
        self.evaluate_with(u_hat, None, epsilon, partition)
    }

    /// Evaluates with an explicit unresolved field (zero when `None`).
    pub fn evaluate_with(
        &self,
        u_hat: &SpectralField,
        u_tilde: Option<&SpectralField>,
        epsilon: f64,
        partition: &ModePartition,
    ) -> Result<SpectralField> {
        let k_max = partition.full_k_max();
        for k in u_hat.wavenumbers() {
            if !partition.contains(ModeSet::Resolved, k) && u_hat.get(k) != C64::new(0.0, 0.0) {
                return Err(Error::Dimension(format!(
                    "resolved input has a nonzero mode k = {k} outside |k| < {}",
                    partition.n()
                )));
            }
        }
        let uh = u_hat.resized(k_max);
        let ut = match u_tilde {
            Some(v) => {
                let mut v = v.resized(k_max);
                v.restrict(ModeSet::Unresolved, partition);
                v
            }
            None => SpectralField::zeros(k_max),
        };
        let disp = C64::new(0.0, epsilon * epsilon);
        let mut values: Vec<SpectralField> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node {
                ConvNode::Resolved => uh.clone(),
                ConvNode::Unresolved => ut.clone(),
                ConvNode::Disp(c) => scale_by_k_power(&values[c.0 as usize], 3).scaled(disp),
                ConvNode::Conv { retain, a, b } => conv_truncated(
                    &values[a.0 as usize],
                    &values[b.0 as usize],
                    *retain,
                    partition,
                )?,
            };
            values.push(v);
        }
        let mut out = SpectralField::zeros(k_max);
        for (c, id) in &self.terms {
            let w = *c.numer() as f64 / *c.denom() as f64;
            out.add_scaled(C64::new(w, 0.0), &values[id.0 as usize]);
        }
        Ok(out)
    }

    fn node_string(&self, id: NodeId, out: &mut String) {
        match &self.nodes[id.0 as usize] {
            ConvNode::Resolved => out.push('u'),
            ConvNode::Unresolved => out.push('v'),
            ConvNode::Disp(c) => {
                out.push_str("(disp ");
                self.node_string(*c, out);
                out.push(')');
            }
            ConvNode::Conv { retain, a, b } => {
                out.push_str(match retain {
                    ModeSet::Resolved => "(chat ",
                    ModeSet::Unresolved => "(ctilde ",
                    ModeSet::All => "(c ",
                });
                self.node_string(*a, out);
                out.push(' ');
                self.node_string(*b, out);
                out.push(')');
            }
        }
    }

    /// Fully inlined s-expression. `u` is `û`, `v` is `ũ`, `disp` is
    /// multiplication by `iε²k³`, `chat`/`ctilde` are the resolved and
    /// unresolved convolutions. Exponential in depth for shared subtrees;
    /// use [`ConvExpr::to_sexpr_shared`] for large expressions.
    pub fn to_sexpr(&self) -> String {
        let mut s = String::from("(+");
        for (c, id) in &self.terms {
            let _ = write!(s, " (* {c} ");
            self.node_string(*id, &mut s);
            s.push(')');
        }
        s.push(')');
        s
    }

    /// S-expression with one `let` binding per shared node.
    pub fn to_sexpr_shared(&self) -> String {
        let mut s = String::from("(let (");
        for (i, node) in self.nodes.iter().enumerate() {
            let body = match node {
                ConvNode::Resolved => "u".to_string(),
                ConvNode::Unresolved => "v".to_string(),
                ConvNode::Disp(c) => format!("(disp n{})", c.0),
                ConvNode::Conv { retain, a, b } => {
                    let op = match retain {
                        ModeSet::Resolved => "chat",
                        ModeSet::Unresolved => "ctilde",
                        ModeSet::All => "c",
                    };
                    format!("({op} n{} n{})", a.0, b.0)
                }
            };
            let _ = write!(s, "\n  (n{i} {body})");
        }
        s.push_str(")\n  (+");
        for (c, id) in &self.terms {
            let _ = write!(s, " (* {c} n{})", id.0);
        }
        s.push_str("))");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("expression serializes")
    }
}

/// Expands the bracket `Σ coeff · word` of `poly` into a convolution tree
/// over `û`. The polynomial's prefactor and power of `t` are not included.
///
/// Fails if some word is not projected, since the result would still
/// depend on `ũ`.
pub fn expand_to_conv(poly: &OperatorPoly) -> Result<ConvExpr> {
    let mut arena = Arena::default();
    let mut total = Lin::new();
    for (word, coeff) in &poly.terms {
        let lin = arena.apply(word.letters());
        for (&id, &c) in lin.iter() {
            add_to(&mut total, id, c * *coeff);
        }
    }
    let expr = arena.extract(&total);
    if expr.contains_unresolved() {
        return Err(Error::Symbolic(format!(
            "order-{} polynomial leaves unresolved leaves after projection",
            poly.order
        )));
    }
    Ok(expr)
}

/// Expression for `W u_k^0` with an arbitrary word; may contain `ũ`.
pub fn apply_word(letters: &[Letter]) -> ConvExpr {
    let mut arena = Arena::default();
    let lin = arena.apply(letters);
    arena.extract(&lin)
}

/// The memory kernel `R^i` of the complete memory approximation, normalized
/// so the memory is `Σ (-1)^{i+1} t^i / i! · R^i`.
pub fn memory_term(order: usize) -> Result<ConvExpr> {
    let polys = super::operator::complete_memory_operator_terms(order);
    let poly = polys
        .last()
        .ok_or_else(|| Error::Symbolic("memory order must be at least 1".into()))?;
    expand_to_conv(poly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::operator::{OperatorWord, Rational};

    fn sine_partition() -> ModePartition {
        ModePartition::rom(4).unwrap()
    }

    #[test]
    fn t_model_tree() {
        let e = memory_term(1).unwrap();
        assert_eq!(e.to_sexpr(), "(+ (* 2 (chat u (ctilde u u))))");
    }

    #[test]
    fn t_model_of_sine_vanishes() {
        let p = sine_partition();
        let v = memory_term(1)
            .unwrap()
            .evaluate(&SpectralField::sine(3), 0.1, &p)
            .unwrap();
        assert!(v.is_zero());
    }

    #[test]
    fn markov_word_and_identity() {
        let p = sine_partition();
        let id = apply_word(&[]);
        let u = SpectralField::sine(3);
        let v = id.evaluate(&u, 0.1, &p).unwrap();
        assert_eq!(v.resized(3), u);

        let markov = apply_word(&[Letter::PL]);
        let r = markov.evaluate(&u, 0.1, &p).unwrap();
        assert!((r.get(2) - C64::new(0.0, 0.25)).norm() < 1e-15);
        assert!((r.get(1) - C64::new(0.005, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn unprojected_word_is_rejected() {
        let mut poly = OperatorPoly::new(1, Rational::one());
        poly.add(OperatorWord::parse("QL QL").unwrap(), Rational::one());
        assert!(matches!(expand_to_conv(&poly), Err(Error::Symbolic(_))));
        assert!(apply_word(&[Letter::QL]).contains_unresolved());
    }

    #[test]
    fn input_outside_resolved_set_is_rejected() {
        let p = sine_partition();
        let mut u = SpectralField::sine(7);
        u.set(5, C64::new(1.0, 0.0));
        u.set(-5, C64::new(1.0, 0.0));
        assert!(apply_word(&[]).evaluate(&u, 0.1, &p).is_err());
    }

    #[test]
    fn json_round_trip() {
        let e = memory_term(2).unwrap();
        let back: ConvExpr = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(back, e);
        assert!(e.to_sexpr_shared().starts_with("(let ("));
    }
}
