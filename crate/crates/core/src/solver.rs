//! Fully resolved Fourier-Galerkin solver for `u_t + u u_x + ε² u_xxx = 0`
//! on the 2π-periodic domain, and the mass diagnostics derived from it.
//!
//! In Fourier space each mode obeys `du_k/dt = iε²k³u_k + C_k(u, u)`.
//! Time stepping defaults to the fourth-order exponential time differencing
//! Runge-Kutta scheme of Cox and Matthews: the dispersive part is integrated
//! exactly and the convolution enters through four explicit stages. A Lawson
//! integrating-factor RK4 stepper is kept for comparison; with `M = 256` it
//! develops a high-wavenumber instability at `dt = 0.001`. The same steppers
//! drive the reduced models in [`crate::rom`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{conv_full, Convolver, ModePartition, ModeSet, SpectralField, C64};

/// Coefficients larger than this mark a run as blown up.
pub const BLOW_UP_THRESHOLD: f64 = 1e10;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullModelConfig {
    pub epsilon: f64,
    /// Positive-mode count; the model keeps `|k| < m`.
    pub m: usize,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for FullModelConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            m: 256,
            dt: 1e-3,
            t_end: 100.0,
        }
    }
}

impl FullModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "t_end must be non-negative, got {}",
                self.t_end
            )));
        }
        if self.m < 2 {
            return Err(Error::InvalidConfig(format!(
                "m must be at least 2, got {}",
                self.m
            )));
        }
        Ok(())
    }

    pub fn k_max(&self) -> usize {
        self.m - 1
    }

    pub fn steps(&self) -> u64 {
        step_count(self.t_end, self.dt)
    }
}

/// Number of steps of size `dt` that reach `t_end`.
pub fn step_count(t_end: f64, dt: f64) -> u64 {
    (t_end / dt).round() as u64
}

/// Sampled solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
    /// Largest `|M(t) - M(0)| / M(0)` seen over every step, not just samples.
    pub max_mass_drift: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, &SpectralField)> {
        self.times.last().copied().zip(self.states.last())
    }

    /// Index of the sample closest to `t`.
    pub fn nearest(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
    }
}

/// `iε²k³` for `|k| <= k_max`, ordered like [`SpectralField`] coefficients.
pub fn dispersion_multipliers(k_max: usize, epsilon: f64) -> Vec<C64> {
    let km = k_max as i64;
    (-km..=km)
        .map(|k| C64::new(0.0, epsilon * epsilon * (k as f64).powi(3)))
        .collect()
}

/// Right-hand side of the full Galerkin system, convolution by direct sum.
pub fn rhs_full(u: &SpectralField, epsilon: f64) -> SpectralField {
    let k_max = u.k_max();
    let mut out = conv_full(u, u);
    for (o, (c, l)) in out.coeffs_mut().iter_mut().zip(
        u.coeffs()
            .iter()
            .zip(dispersion_multipliers(k_max, epsilon)),
    ) {
        *o += l * c;
    }
    out
}

/// Nonlinear part of a semilinear system `du/dt = Λu + N(u, t)`.
pub trait Nonlinearity {
    fn eval(&mut self, u: &[C64], t: f64, out: &mut [C64]);
}

/// Quadratic KdV nonlinearity `C(u, u)` evaluated with padded transforms.
pub struct FullNonlinearity {
    conv: Convolver,
    phys: Vec<f64>,
}

impl FullNonlinearity {
    pub fn new(k_max: usize) -> Self {
        let conv = Convolver::new(k_max);
        let phys = vec![0.0; conv.len()];
        Self { conv, phys }
    }

    pub fn convolver(&self) -> &Convolver {
        &self.conv
    }
}

impl Nonlinearity for FullNonlinearity {
    fn eval(&mut self, u: &[C64], _t: f64, out: &mut [C64]) {
        self.conv.to_physical(u, &mut self.phys);
        self.phys.iter_mut().for_each(|v| *v *= *v);
        let phys = std::mem::take(&mut self.phys);
        self.conv.derivative_of_product(&phys, out);
        self.phys = phys;
    }
}

/// No nonlinearity: pure dispersion.
pub struct LinearOnly;

impl Nonlinearity for LinearOnly {
    fn eval(&mut self, _u: &[C64], _t: f64, out: &mut [C64]) {
        out.iter_mut().for_each(|o| *o = ZERO);
    }
}

/// Lawson fourth-order integrating-factor Runge-Kutta stepper.
#[derive(Clone, Debug)]
pub struct IfRk4 {
    dt: f64,
    half: Vec<C64>,
    full: Vec<C64>,
    k1: Vec<C64>,
    k2: Vec<C64>,
    k3: Vec<C64>,
    k4: Vec<C64>,
    tmp: Vec<C64>,
}

impl IfRk4 {
    pub fn new(linear: &[C64], dt: f64) -> Self {
        let n = linear.len();
        Self {
            dt,
            half: linear.iter().map(|l| (l * (0.5 * dt)).exp()).collect(),
            full: linear.iter().map(|l| (l * dt).exp()).collect(),
            k1: vec![ZERO; n],
            k2: vec![ZERO; n],
            k3: vec![ZERO; n],
            k4: vec![ZERO; n],
            tmp: vec![ZERO; n],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `u` from `t` to `t + dt` in place.
    pub fn step<N: Nonlinearity + ?Sized>(&mut self, u: &mut [C64], t: f64, nl: &mut N) {
        let dt = self.dt;
        let h = 0.5 * dt;
        nl.eval(u, t, &mut self.k1);
        for i in 0..u.len() {
            self.tmp[i] = self.half[i] * (u[i] + h * self.k1[i]);
        }
        nl.eval(&self.tmp, t + h, &mut self.k2);
        for i in 0..u.len() {
            self.tmp[i] = self.half[i] * u[i] + h * self.k2[i];
        }
        nl.eval(&self.tmp, t + h, &mut self.k3);
        for i in 0..u.len() {
            self.tmp[i] = self.full[i] * u[i] + dt * self.half[i] * self.k3[i];
        }
        nl.eval(&self.tmp, t + dt, &mut self.k4);
        for i in 0..u.len() {
            u[i] = self.full[i] * u[i]
                + (dt / 6.0)
                    * (self.full[i] * self.k1[i]
                        + 2.0 * self.half[i] * (self.k2[i] + self.k3[i])
                        + self.k4[i]);
        }
    }
}

/// `(e^z - 1)/z`, `(e^z - 1 - z)/z²`-type ETDRK4 weights, evaluated by the
/// contour average of Kassam and Trefethen so that small `|z|` does not
/// suffer cancellation.
fn etd_weights(z: C64) -> [C64; 4] {
    const POINTS: usize = 64;
    let mut acc = [ZERO; 4];
    for j in 0..POINTS {
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / POINTS as f64;
        // Upper and lower half circles together keep the average real for
        // real z.
        for r in [C64::from_polar(1.0, theta), C64::from_polar(1.0, -theta)] {
            let w = z + r;
            let ew = w.exp();
            let w2 = w * w;
            let w3 = w2 * w;
            acc[0] += ((w * 0.5).exp() - 1.0) / w;
            acc[1] += (-4.0 - w + ew * (4.0 - 3.0 * w + w2)) / w3;
            acc[2] += (2.0 + w + ew * (-2.0 + w)) / w3;
            acc[3] += (-4.0 - 3.0 * w - w2 + ew * (4.0 - w)) / w3;
        }
    }
    acc.map(|a| a / (2 * POINTS) as f64)
}

/// Cox-Matthews fourth-order exponential time differencing Runge-Kutta.
#[derive(Clone, Debug)]
pub struct Etdrk4 {
    dt: f64,
    e: Vec<C64>,
    e2: Vec<C64>,
    q: Vec<C64>,
    f1: Vec<C64>,
    f2: Vec<C64>,
    f3: Vec<C64>,
    nu: Vec<C64>,
    na: Vec<C64>,
    nb: Vec<C64>,
    nc: Vec<C64>,
    a: Vec<C64>,
    b: Vec<C64>,
}

impl Etdrk4 {
    pub fn new(linear: &[C64], dt: f64) -> Self {
        let n = linear.len();
        let mut out = Self {
            dt,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
            nu: vec![ZERO; n],
            na: vec![ZERO; n],
            nb: vec![ZERO; n],
            nc: vec![ZERO; n],
            a: vec![ZERO; n],
            b: vec![ZERO; n],
        };
        for l in linear {
            let z = l * dt;
            let [q, f1, f2, f3] = etd_weights(z);
            out.e.push(z.exp());
            out.e2.push((z * 0.5).exp());
            out.q.push(q * dt);
            out.f1.push(f1 * dt);
            out.f2.push(f2 * dt);
            out.f3.push(f3 * dt);
        }
        out
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `u` from `t` to `t + dt` in place.
    pub fn step<N: Nonlinearity + ?Sized>(&mut self, u: &mut [C64], t: f64, nl: &mut N) {
        let h = 0.5 * self.dt;
        nl.eval(u, t, &mut self.nu);
        for i in 0..u.len() {
            self.a[i] = self.e2[i] * u[i] + self.q[i] * self.nu[i];
        }
        nl.eval(&self.a, t + h, &mut self.na);
        for i in 0..u.len() {
            self.b[i] = self.e2[i] * u[i] + self.q[i] * self.na[i];
        }
        nl.eval(&self.b, t + h, &mut self.nb);
        for i in 0..u.len() {
            // Stage c overwrites a, which is no longer needed.
            self.a[i] = self.e2[i] * self.a[i] + self.q[i] * (2.0 * self.nb[i] - self.nu[i]);
        }
        nl.eval(&self.a, t + self.dt, &mut self.nc);
        for i in 0..u.len() {
            u[i] = self.e[i] * u[i]
                + self.f1[i] * self.nu[i]
                + 2.0 * self.f2[i] * (self.na[i] + self.nb[i])
                + self.f3[i] * self.nc[i];
        }
    }
}

/// Time integration scheme for semilinear systems.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Etdrk4,
    IfRk4,
}

enum Stepper {
    Etd(Etdrk4),
    If(IfRk4),
}

impl Stepper {
    fn new(scheme: Scheme, linear: &[C64], dt: f64) -> Self {
        match scheme {
            Scheme::Etdrk4 => Self::Etd(Etdrk4::new(linear, dt)),
            Scheme::IfRk4 => Self::If(IfRk4::new(linear, dt)),
        }
    }

    fn step<N: Nonlinearity + ?Sized>(&mut self, u: &mut [C64], t: f64, nl: &mut N) {
        match self {
            Self::Etd(s) => s.step(u, t, nl),
            Self::If(s) => s.step(u, t, nl),
        }
    }
}

fn blown_up(u: &SpectralField) -> bool {
    u.coeffs()
        .iter()
        .any(|c| !c.re.is_finite() || !c.im.is_finite() || c.norm() > BLOW_UP_THRESHOLD)
}

/// Drives a semilinear system with the default [`Scheme`]; see
/// [`run_semilinear_with`].
pub fn run_semilinear<N, F>(
    u0: &SpectralField,
    linear: &[C64],
    dt: f64,
    steps: u64,
    nl: &mut N,
    observer: F,
) -> Result<SpectralField>
where
    N: Nonlinearity + ?Sized,
    F: FnMut(u64, f64, &SpectralField),
{
    run_semilinear_with(Scheme::default(), u0, linear, dt, steps, nl, observer)
}

/// Drives a semilinear system, symmetrizing after each step and calling
/// `observer(step, t, u)` at step 0 and after every step.
///
/// Returns the final state, or [`Error::BlowUp`] with the offending step.
pub fn run_semilinear_with<N, F>(
    scheme: Scheme,
    u0: &SpectralField,
    linear: &[C64],
    dt: f64,
    steps: u64,
    nl: &mut N,
    mut observer: F,
) -> Result<SpectralField>
where
    N: Nonlinearity + ?Sized,
    F: FnMut(u64, f64, &SpectralField),
{
    if linear.len() != u0.coeffs().len() {
        return Err(Error::Dimension(format!(
            "linear multiplier has {} entries, state has {}",
            linear.len(),
            u0.coeffs().len()
        )));
    }
    let mut stepper = Stepper::new(scheme, linear, dt);
    let mut u = u0.clone();
    observer(0, 0.0, &u);
    for step in 1..=steps {
        let t = (step - 1) as f64 * dt;
        stepper.step(u.coeffs_mut(), t, nl);
        u.symmetrize();
        let t_new = step as f64 * dt;
        if blown_up(&u) {
            return Err(Error::BlowUp { step, time: t_new });
        }
        observer(step, t_new, &u);
    }
    Ok(u)
}

/// One step of the full model.
pub fn imex_step(u: &SpectralField, dt: f64, epsilon: f64) -> Result<SpectralField> {
    let linear = dispersion_multipliers(u.k_max(), epsilon);
    run_semilinear(
        u,
        &linear,
        dt,
        1,
        &mut FullNonlinearity::new(u.k_max()),
        |_, _, _| {},
    )
}

/// One step of the dispersion-only model (nonlinearity switched off).
pub fn linear_step(u: &SpectralField, dt: f64, epsilon: f64) -> SpectralField {
    let linear = dispersion_multipliers(u.k_max(), epsilon);
    run_semilinear(u, &linear, dt, 1, &mut LinearOnly, |_, _, _| {})
        .expect("linear phase rotation cannot blow up from a finite state")
}

/// Integrates the full model, calling `observer` at every step, and returns
/// the final state together with the maximum relative total-mass drift.
pub fn integrate_observed<F>(
    u0: &SpectralField,
    config: &FullModelConfig,
    mut observer: F,
) -> Result<(SpectralField, f64)>
where
    F: FnMut(u64, f64, &SpectralField),
{
    config.validate()?;
    let u0 = u0.resized(config.k_max());
    let m0 = u0.total_mass();
    let mut drift = 0.0f64;
    let linear = dispersion_multipliers(config.k_max(), config.epsilon);
    let mut nl = FullNonlinearity::new(config.k_max());
    let last = run_semilinear(
        &u0,
        &linear,
        config.dt,
        config.steps(),
        &mut nl,
        |s, t, u| {
            if m0 > 0.0 {
                drift = drift.max((u.total_mass() - m0).abs() / m0);
            }
            observer(s, t, u);
        },
    )?;
    Ok((last, drift))
}

/// Integrates the full model recording every `sample_stride`-th step; the
/// initial and final states are always recorded.
pub fn integrate(
    u0: &SpectralField,
    config: &FullModelConfig,
    sample_stride: u64,
) -> Result<Trajectory> {
    if sample_stride == 0 {
        return Err(Error::InvalidConfig(
            "sample_stride must be positive".into(),
        ));
    }
    let steps = config.steps();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let (_, max_mass_drift) = integrate_observed(u0, config, |s, t, u| {
        if s % sample_stride == 0 || s == steps {
            times.push(t);
            states.push(u.clone());
        }
    })?;
    Ok(Trajectory {
        times,
        states,
        max_mass_drift,
    })
}

/// Per-mode masses `|u_k|²` and their rates `2 Re(conj(u_k) R_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MassDiagnostics {
    pub k: Vec<i64>,
    pub mass: Vec<f64>,
    pub rate: Vec<f64>,
}

/// Mass and mass rate of every mode of `u` lying in `set`, with the rate
/// taken from the full right-hand side of the whole stored field.
pub fn mass_and_derivative(
    u: &SpectralField,
    epsilon: f64,
    set: ModeSet,
    partition: &ModePartition,
) -> MassDiagnostics {
    let r = if u.k_max() >= 16 {
        let mut nl = FullNonlinearity::new(u.k_max());
        let mut c = vec![ZERO; u.coeffs().len()];
        nl.eval(u.coeffs(), 0.0, &mut c);
        let lin = dispersion_multipliers(u.k_max(), epsilon);
        let mut r = SpectralField::from_coeffs(c).expect("odd length");
        for (o, (l, v)) in r.coeffs_mut().iter_mut().zip(lin.iter().zip(u.coeffs())) {
            *o += l * v;
        }
        r
    } else {
        rhs_full(u, epsilon)
    };
    let mut out = MassDiagnostics {
        k: Vec::new(),
        mass: Vec::new(),
        rate: Vec::new(),
    };
    for k in u.wavenumbers() {
        if partition.contains(set, k) || (set == ModeSet::All) {
            let v = u.get(k);
            out.k.push(k);
            out.mass.push(v.norm_sqr());
            out.rate.push(2.0 * (v.conj() * r.get(k)).re);
        }
    }
    out
}

/// Taylor expansion of the truncated full system about `t = 0`, used where
/// the exponentially small high modes of a smooth initial condition must be
/// resolved to full relative precision.
#[derive(Clone, Debug)]
pub struct TaylorSolution {
    coeffs: Vec<SpectralField>,
}

impl TaylorSolution {
    /// Computes `order + 1` Taylor coefficients of the system on `|k| <= k_max`.
    pub fn new(u0: &SpectralField, epsilon: f64, k_max: usize, order: usize) -> Self {
        let lin = dispersion_multipliers(k_max, epsilon);
        let mut coeffs = vec![u0.resized(k_max)];
        for n in 0..order {
            let mut next = SpectralField::zeros(k_max);
            for (o, (l, a)) in next
                .coeffs_mut()
                .iter_mut()
                .zip(lin.iter().zip(coeffs[n].coeffs()))
            {
                *o = l * a;
            }
            // Σ_{j=0}^{n} C(a_j, a_{n-j}) using symmetry of the bilinear form.
            for j in 0..=n / 2 {
                let c = conv_full(&coeffs[j], &coeffs[n - j]);
                let w = if 2 * j == n { 1.0 } else { 2.0 };
                next.add_scaled(Complex64::new(w, 0.0), &c);
            }
            next.scale(Complex64::new(1.0 / (n + 1) as f64, 0.0));
            coeffs.push(next);
        }
        Self { coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn state(&self, t: f64) -> SpectralField {
        let mut acc = SpectralField::zeros(self.coeffs[0].k_max());
        for c in self.coeffs.iter().rev() {
            acc.scale(Complex64::new(t, 0.0));
            acc.add_scaled(Complex64::new(1.0, 0.0), c);
        }
        acc
    }

    pub fn derivative(&self, t: f64) -> SpectralField {
        let mut acc = SpectralField::zeros(self.coeffs[0].k_max());
        for (n, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc.scale(Complex64::new(t, 0.0));
            acc.add_scaled(Complex64::new(n as f64, 0.0), c);
        }
        acc
    }
}

/// States of the truncated full system at increasing `times`, obtained by
/// repeated Taylor re-expansion.
///
/// Each step is at most a tenth of the current time (so a mode growing like
/// `t^j` is re-expanded well inside its convergence region) and at most
/// `5 / max|ε²k³|`. Every mode keeps full relative precision, which a fixed
/// step integrator cannot offer for exponentially small high modes.
pub fn taylor_samples(
    u0: &SpectralField,
    epsilon: f64,
    k_max: usize,
    order: usize,
    times: &[f64],
) -> Result<Vec<SpectralField>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidConfig(
            "sample times must be non-negative and non-decreasing".into(),
        ));
    }
    let omega = epsilon * epsilon * (k_max as f64).powi(3);
    let h_lin = if omega > 0.0 {
        5.0 / omega
    } else {
        f64::INFINITY
    };
    let mut t = 0.0;
    let mut u = u0.resized(k_max);
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let h = if t == 0.0 {
                (target - t).min(h_lin)
            } else {
                (target - t).min(0.1 * t).min(h_lin)
            };
            u = TaylorSolution::new(&u, epsilon, k_max, order).state(h);
            t = if target - t - h <= 1e-15 * target {
                target
            } else {
                t + h
            };
        }
        out.push(u.clone());
    }
    Ok(out)
}
