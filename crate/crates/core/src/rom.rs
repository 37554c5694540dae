//! Markov and memory terms of the reduced KdV model and the reduced model
//! right-hand sides.
//!
//! All terms are evaluated with padded transforms on the buffer range
//! `|k| < M`. Writing `A = iε²k³û + Ĉ(û,û)` (the Markov term),
//! `T = C̃(û,û)` and `D(x) = iε²k³x`, the kernels are
//!
//! ```text
//! R¹ = 2Ĉ(û, T)
//! R² = -2Ĉ(T, T) - 2Ĉ(û, X),             X = D(T) + 2C̃(û, T - A)
//! R³ = 2Ĉ(û, W₃) + 6Ĉ(T, X)
//! R⁴ = 2Ĉ(û, W₄) - 8Ĉ(T, W₃) + 48Ĉ(C̃(û, A), D(T) + 2C̃(û, T)) - 6Ĉ(Y, Y)
//! ```
//!
//! with `W₃`, `W₄`, `Y` built from the same shared intermediates below. The
//! memory contribution at order `i` is `(-1)^{i+1} t^i / i! · R^i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{dispersion_multipliers, run_semilinear, Nonlinearity};
use crate::spectral::{
    conv_full, Convolver, ModePartition, ModeSet, SpectralField, TransformCount, C64,
};

pub const MAX_ORDER: usize = 4;

/// Reduced model settings. The buffer is always `M = 2N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RomConfig {
    pub n: usize,
    pub epsilon: f64,
    /// Highest memory order, at most [`MAX_ORDER`].
    pub order: usize,
    /// `α_1 .. α_order`; unused when `renormalized` is false.
    pub alphas: Vec<f64>,
    pub renormalized: bool,
}

impl RomConfig {
    pub fn markov(n: usize, epsilon: f64) -> Self {
        Self {
            n,
            epsilon,
            order: 0,
            alphas: Vec::new(),
            renormalized: true,
        }
    }

    pub fn renormalized(n: usize, epsilon: f64, alphas: Vec<f64>) -> Self {
        Self {
            n,
            epsilon,
            order: alphas.len(),
            alphas,
            renormalized: true,
        }
    }

    /// Truncated series `R⁰ + Σ (-1)^{i+1} t^i / i! R^i` without coefficients.
    pub fn raw(n: usize, epsilon: f64, order: usize) -> Self {
        Self {
            n,
            epsilon,
            order,
            alphas: Vec::new(),
            renormalized: false,
        }
    }

    pub fn partition(&self) -> Result<ModePartition> {
        ModePartition::rom(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order > MAX_ORDER {
            return Err(Error::InvalidConfig(format!(
                "memory order {} exceeds {MAX_ORDER}",
                self.order
            )));
        }
        if self.renormalized && self.alphas.len() != self.order {
            return Err(Error::InvalidConfig(format!(
                "order {} needs {} renormalization coefficients, got {}",
                self.order,
                self.order,
                self.alphas.len()
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        self.partition().map(|_| ())
    }

    /// Weight of `R^i` at time `t`, for `i` in `1..=order`.
    ///
    /// The renormalized ansatz `α_i(t) = α_i t^{-i}` cancels the `t^i`
    /// factor analytically, so the weight is `α_i` for every `t`, including
    /// `t = 0`.
    pub fn weight(&self, i: usize, t: f64) -> f64 {
        if self.renormalized {
            self.alphas[i - 1]
        } else {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            let fact: f64 = (1..=i).map(|j| j as f64).product();
            sign * t.powi(i as i32) / fact
        }
    }
}

/// Kernels `R⁰ .. R^n` evaluated at one state, each with `k_max = N - 1`.
/// Entries not requested are `None`.
#[derive(Clone, Debug, Default)]
pub struct MemoryTerms {
    pub r: Vec<Option<SpectralField>>,
}

impl MemoryTerms {
    pub fn get(&self, i: usize) -> Option<&SpectralField> {
        self.r.get(i).and_then(|r| r.as_ref())
    }
}

type Spec = Vec<C64>;
type Phys = Vec<f64>;

/// Transform-based evaluator of the Markov and memory kernels for one
/// partition and dispersion coefficient.
pub struct MemoryEvaluator {
    partition: ModePartition,
    epsilon: f64,
    conv: Convolver,
    disp: Spec,
    resolved: Vec<bool>,
    unresolved: Vec<bool>,
}

impl std::fmt::Debug for MemoryEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryEvaluator")
            .field("partition", &self.partition)
            .field("epsilon", &self.epsilon)
            .field("conv", &self.conv)
            .finish()
    }
}

fn comb(parts: &[(f64, &[C64])]) -> Spec {
    let mut out = vec![C64::new(0.0, 0.0); parts[0].1.len()];
    for (c, x) in parts {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += *c * v;
        }
    }
    out
}

/// `Σ c_j a_j b_j` pointwise in physical space.
fn products(parts: &[(f64, &[f64], &[f64])]) -> Phys {
    let mut out = vec![0.0; parts[0].1.len()];
    for (c, a, b) in parts {
        for ((o, x), y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
            *o += c * x * y;
        }
    }
    out
}

fn lin_phys(parts: &[(f64, &[f64])]) -> Phys {
    let mut out = vec![0.0; parts[0].1.len()];
    for (c, x) in parts {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += c * v;
        }
    }
    out
}

impl MemoryEvaluator {
    pub fn new(partition: ModePartition, epsilon: f64) -> Self {
        let k_max = partition.full_k_max();
        let km = k_max as i64;
        Self {
            partition,
            epsilon,
            conv: Convolver::new(k_max),
            disp: dispersion_multipliers(k_max, epsilon),
            resolved: (-km..=km)
                .map(|k| partition.contains(ModeSet::Resolved, k))
                .collect(),
            unresolved: (-km..=km)
                .map(|k| partition.contains(ModeSet::Unresolved, k))
                .collect(),
        }
    }

    pub fn partition(&self) -> &ModePartition {
        &self.partition
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn transform_count(&self) -> TransformCount {
        self.conv.transform_count()
    }

    pub fn reset_count(&mut self) {
        self.conv.reset_count();
    }

    fn inv(&mut self, s: &[C64]) -> Phys {
        self.conv.physical(s)
    }

    /// Full-range convolution coefficients of a physical-space product.
    fn fwd(&mut self, prod: &[f64]) -> Spec {
        let mut out = vec![C64::new(0.0, 0.0); self.disp.len()];
        self.conv.derivative_of_product(prod, &mut out);
        out
    }

    fn keep(&self, v: &[C64], set: ModeSet) -> Spec {
        let mask = match set {
            ModeSet::Resolved => &self.resolved,
            ModeSet::Unresolved => &self.unresolved,
            ModeSet::All => return v.to_vec(),
        };
        v.iter()
            .zip(mask)
            .map(|(c, &m)| if m { *c } else { C64::new(0.0, 0.0) })
            .collect()
    }

    fn f(&self, v: &[C64]) -> Spec {
        self.keep(v, ModeSet::Resolved)
    }

    fn g(&self, v: &[C64]) -> Spec {
        self.keep(v, ModeSet::Unresolved)
    }

    fn d(&self, v: &[C64]) -> Spec {
        v.iter().zip(&self.disp).map(|(x, l)| x * l).collect()
    }

    fn to_field(&self, v: Spec) -> SpectralField {
        SpectralField::from_coeffs(v)
            .expect("odd length")
            .resized(self.partition.resolved_k_max())
    }

    /// Evaluates the kernels whose orders are flagged in `wanted`
    /// (index 0 is the Markov term). `u_hat` is projected onto `|k| < N`.
    pub fn terms(&mut self, u_hat: &SpectralField, wanted: &[bool]) -> MemoryTerms {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        let top = (0..wanted.len()).rev().find(|&i| want(i)).unwrap_or(0);
        let mut out = MemoryTerms {
            r: vec![None; top + 1],
        };
        let mut u = u_hat.resized(self.partition.full_k_max());
        u.restrict(ModeSet::Resolved, &self.partition);
        let u = u.coeffs().to_vec();

        let pu = self.inv(&u);
        let cuu = self.fwd(&products(&[(1.0, &pu, &pu)]));
        let chuu = self.f(&cuu);
        let t = self.g(&cuu);
        let a = comb(&[(1.0, &self.d(&u)), (1.0, &chuu)]);
        if want(0) {
            out.r[0] = Some(self.to_field(a.clone()));
        }
        if top == 0 {
            return out;
        }

        let pa = self.inv(&a);
        let pt = self.inv(&t);
        let p2 = self.fwd(&products(&[(1.0, &pu, &pt)]));
        if want(1) {
            out.r[1] = Some(self.to_field(comb(&[(2.0, &self.f(&p2))])));
        }
        if top == 1 {
            return out;
        }

        let p1 = self.fwd(&products(&[(1.0, &pu, &pa)]));
        let g1 = self.g(&p1);
        let dt = self.d(&t);
        let gprime = comb(&[(1.0, &dt), (2.0, &self.g(&p2))]);
        let pg1 = self.inv(&g1);
        let pgp = self.inv(&gprime);
        // X = D(T) + 2C̃(û, T) - 2C̃(û, A)
        let px = lin_phys(&[(1.0, &pgp), (-2.0, &pg1)]);
        if want(2) {
            let s = self.fwd(&products(&[(1.0, &pt, &pt), (1.0, &pu, &px)]));
            out.r[2] = Some(self.to_field(comb(&[(-2.0, &self.f(&s))])));
        }
        if top == 2 {
            return out;
        }

        let da = self.d(&a);
        let ddt = self.d(&dt);
        let z3 = comb(&[
            (1.0, &da),
            (1.0, &dt),
            (2.0, &self.f(&comb(&[(1.0, &p1), (-2.0, &p2)]))),
            (2.0, &self.g(&comb(&[(1.0, &p2), (-2.0, &p1)]))),
        ]);
        let pz3 = self.inv(&z3);
        let pa_minus_t = lin_phys(&[(1.0, &pa), (-1.0, &pt)]);
        let q = self.fwd(&products(&[
            (1.0, &pu, &pz3),
            (1.0, &pa, &pa_minus_t),
            (1.0, &pt, &pt),
        ]));
        let w3 = comb(&[
            (1.0, &ddt),
            (-2.0, &self.d(&self.g(&comb(&[(2.0, &p1), (-1.0, &p2)])))),
            (2.0, &self.g(&q)),
        ]);
        let pw3 = self.inv(&w3);
        if want(3) {
            let s = self.fwd(&products(&[(2.0, &pu, &pw3), (6.0, &pt, &px)]));
            out.r[3] = Some(self.to_field(self.f(&s)));
        }
        if top == 3 {
            return out;
        }

        let za = comb(&[
            (3.0, &da),
            (1.0, &dt),
            (2.0, &self.f(&comb(&[(3.0, &p1), (-5.0, &p2)]))),
            (-2.0, &self.g(&comb(&[(3.0, &p1), (-1.0, &p2)]))),
        ]);
        let zc = comb(&[
            (-1.0, &da),
            (-3.0, &dt),
            (-2.0, &self.f(&comb(&[(1.0, &p1), (-3.0, &p2)]))),
            (2.0, &self.g(&comb(&[(5.0, &p1), (-3.0, &p2)]))),
        ]);
        let pza = self.inv(&za);
        let pzc = self.inv(&zc);
        let pa_minus_2t = lin_phys(&[(1.0, &pa), (-2.0, &pt)]);
        let p3a_minus_2t = lin_phys(&[(3.0, &pa), (-2.0, &pt)]);
        let z4f = self.fwd(&products(&[
            (2.0, &pu, &pzc),
            (-2.0, &pa, &pa_minus_2t),
            (-6.0, &pt, &pt),
        ]));
        let z4g = self.fwd(&products(&[
            (2.0, &pu, &pza),
            (2.0, &pa, &p3a_minus_2t),
            (2.0, &pt, &pt),
        ]));
        let z4 = comb(&[
            (-1.0, &self.d(&da)),
            (-2.0, &self.d(&self.f(&comb(&[(1.0, &p1), (-3.0, &p2)])))),
            (1.0, &self.f(&z4f)),
            (1.0, &ddt),
            (2.0, &self.d(&self.g(&comb(&[(1.0, &p2), (-3.0, &p1)])))),
            (1.0, &self.g(&z4g)),
        ]);
        let pz4 = self.inv(&z4);
        let wd = self.fwd(&products(&[
            (-2.0, &pu, &pza),
            (-2.0, &pa, &p3a_minus_2t),
            (-2.0, &pt, &pt),
        ]));
        let wp = self.fwd(&products(&[
            (2.0, &pa, &pza),
            (-2.0, &pu, &pz4),
            (2.0, &pt, &pzc),
        ]));
        let w4 = comb(&[
            (-1.0, &self.d(&ddt)),
            (
                2.0,
                &self.d(&self.d(&self.g(&comb(&[(3.0, &p1), (-1.0, &p2)])))),
            ),
            (1.0, &self.d(&self.g(&wd))),
            (1.0, &self.g(&wp)),
        ]);
        let pw4 = self.inv(&w4);
        // Y = D(T) + 2C̃(û, A + T)
        let py = lin_phys(&[(1.0, &pgp), (2.0, &pg1)]);
        let s = self.fwd(&products(&[
            (2.0, &pu, &pw4),
            (-8.0, &pt, &pw3),
            (48.0, &pg1, &pgp),
            (-6.0, &py, &py),
        ]));
        out.r[4] = Some(self.to_field(self.f(&s)));
        out
    }

    /// All kernels `R⁰ ..= R^order`.
    pub fn all_terms(&mut self, u_hat: &SpectralField, order: usize) -> Vec<SpectralField> {
        let wanted = vec![true; order + 1];
        self.terms(u_hat, &wanted)
            .r
            .into_iter()
            .map(|r| r.expect("requested"))
            .collect()
    }

    /// A single kernel.
    pub fn term(&mut self, u_hat: &SpectralField, order: usize) -> SpectralField {
        let mut wanted = vec![false; order + 1];
        wanted[order] = true;
        self.terms(u_hat, &wanted)
            .r
            .swap_remove(order)
            .expect("requested")
    }
}

/// `iε²k³û_k + Ĉ_k(û, û)` on the resolved set.
pub fn r0_markov(u_hat: &SpectralField, epsilon: f64, partition: &ModePartition) -> SpectralField {
    MemoryEvaluator::new(*partition, epsilon).term(u_hat, 0)
}

/// The t-model kernel `2Ĉ(û, C̃(û, û))`.
pub fn r1_tmodel(u_hat: &SpectralField, epsilon: f64, partition: &ModePartition) -> SpectralField {
    MemoryEvaluator::new(*partition, epsilon).term(u_hat, 1)
}

/// Memory kernel `R^i` for `i` in `2..=4`.
pub fn r_high(
    u_hat: &SpectralField,
    epsilon: f64,
    partition: &ModePartition,
    i: usize,
) -> Result<SpectralField> {
    if !(2..=MAX_ORDER).contains(&i) {
        return Err(Error::InvalidConfig(format!(
            "higher memory kernels are defined for orders 2..=4, got {i}"
        )));
    }
    Ok(MemoryEvaluator::new(*partition, epsilon).term(u_hat, i))
}

/// Exact memory contribution `2Ĉ(û, ũ) + Ĉ(ũ, ũ)` on `|k| < N` for a full
/// state `u` of any size, with `û` its projection and `ũ = u - û`.
///
/// Evaluated by direct sums without subtracting the Markov part, so each
/// mode keeps full relative precision even when the buffer modes are tiny.
pub fn exact_memory(u: &SpectralField, partition: &ModePartition) -> SpectralField {
    let k_res = partition.resolved_k_max();
    let k_max = u.k_max().max(k_res);
    let u = u.resized(k_max);
    let mut u_hat = u.clone();
    u_hat.restrict(ModeSet::Resolved, partition);
    let mut u_tilde = u.clone();
    u_tilde.add_scaled(C64::new(-1.0, 0.0), &u_hat);
    let mut out = conv_full(&u_hat, &u_tilde).scaled(C64::new(2.0, 0.0));
    out.add_scaled(C64::new(1.0, 0.0), &conv_full(&u_tilde, &u_tilde));
    out.resized(k_res)
}

/// Reduced-model right-hand side as a [`Nonlinearity`]: everything except
/// the linear dispersive part of the Markov term.
pub struct RomNonlinearity {
    config: RomConfig,
    eval: MemoryEvaluator,
    wanted: Vec<bool>,
}

impl RomNonlinearity {
    pub fn new(config: RomConfig) -> Result<Self> {
        config.validate()?;
        let eval = MemoryEvaluator::new(config.partition()?, config.epsilon);
        let mut wanted = vec![true; config.order + 1];
        if config.renormalized {
            for (i, a) in config.alphas.iter().enumerate() {
                wanted[i + 1] = *a != 0.0;
            }
        }
        Ok(Self {
            config,
            eval,
            wanted,
        })
    }

    pub fn transform_count(&self) -> TransformCount {
        self.eval.transform_count()
    }

    pub fn reset_count(&mut self) {
        self.eval.reset_count();
    }

    /// Full right-hand side including dispersion.
    pub fn rhs(&mut self, u_hat: &SpectralField, t: f64) -> SpectralField {
        let terms = self.eval.terms(u_hat, &self.wanted);
        let mut out = terms.get(0).expect("markov term").clone();
        for i in 1..=self.config.order {
            if let Some(r) = terms.get(i) {
                out.add_scaled(C64::new(self.config.weight(i, t), 0.0), r);
            }
        }
        out
    }
}

impl Nonlinearity for RomNonlinearity {
    fn eval(&mut self, u: &[C64], t: f64, out: &mut [C64]) {
        let field = SpectralField::from_coeffs(u.to_vec()).expect("odd length");
        let r = self.rhs(&field, t);
        let lin = dispersion_multipliers(field.k_max(), self.config.epsilon);
        for ((o, v), (c, l)) in out.iter_mut().zip(r.coeffs()).zip(u.iter().zip(&lin)) {
            *o = v - l * c;
        }
    }
}

/// Reduced-model right-hand side `R⁰ + Σ w_i(t) R^i` at one state.
pub fn rom_rhs(u_hat: &SpectralField, t: f64, config: &RomConfig) -> Result<SpectralField> {
    if t < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "time must be non-negative, got {t}"
        )));
    }
    Ok(RomNonlinearity::new(config.clone())?.rhs(u_hat, t))
}

/// Integrates a reduced model from `u0` (projected onto `|k| < N`) for
/// `steps` steps of size `dt`, calling `observer(step, t, û)`.
pub fn integrate_rom<F>(
    u0: &SpectralField,
    config: &RomConfig,
    dt: f64,
    steps: u64,
    observer: F,
) -> Result<(SpectralField, TransformCount)>
where
    F: FnMut(u64, f64, &SpectralField),
{
    let mut nl = RomNonlinearity::new(config.clone())?;
    let k_max = config.n - 1;
    let u = u0.resized(k_max);
    let linear = dispersion_multipliers(k_max, config.epsilon);
    let last = run_semilinear(&u, &linear, dt, steps, &mut nl, observer)?;
    Ok((last, nl.transform_count()))
}
