//! Symbolic derivation of memory terms.
//!
//! [`operator`] builds the operator polynomials of the complete memory and
//! BCH approximations; [`expr`] applies them to `u_k^0` through the
//! Liouvillian of the truncated KdV system, yielding convolution trees over
//! the resolved field that can be evaluated numerically.

pub mod expr;
pub mod operator;

pub use expr::{expand_to_conv, memory_term, ConvExpr, ConvNode};
pub use operator::{
    bch_operator_terms, canonicalize, complete_memory_operator_terms, standard_prefactor, Letter,
    OperatorPoly, OperatorWord, Rational,
};
