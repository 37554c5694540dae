//! Renormalization coefficients: mass-derivative datasets, the least-squares
//! fit of `α_i`, nondimensionalization and power-law scaling fits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rom::{MemoryEvaluator, MAX_ORDER};
use crate::solver::Trajectory;
use crate::spectral::{Convolver, ModePartition, ModeSet, SpectralField, C64};

/// Domain length.
pub const DOMAIN_LENGTH: f64 = 2.0 * PI;

/// Odd-order terms count as negligible when their contribution norm stays
/// below this fraction of the second-order contribution.
pub const ODD_TERM_THRESHOLD: f64 = 0.05;

/// Relative singular value below which a design matrix counts as rank
/// deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// What the exact per-mode mass rate `ΔM_k` measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassTarget {
    /// `2 Re(conj(u_k) R_k(u))` with the full right-hand side, including the
    /// Markov exchange between resolved modes.
    FullRhs,
    /// The full rate minus the Markov contribution, i.e. the memory part only.
    #[default]
    MemoryOnly,
}

/// Per-mode mass rates over `k ∈ F` sampled in a window.
///
/// `exact[j][m]` and `terms[i-1][j][m]` refer to time `times[j]` and
/// wavenumber `wavenumbers[m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassDerivativeDataset {
    pub n: usize,
    pub epsilon: f64,
    pub window: (f64, f64),
    pub stride: usize,
    pub target: MassTarget,
    pub wavenumbers: Vec<i64>,
    pub times: Vec<f64>,
    pub exact: Vec<Vec<f64>>,
    pub terms: Vec<Vec<Vec<f64>>>,
}

impl MassDerivativeDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Samples with `t_a <= t <= t_b`.
    pub fn window(&self, t_a: f64, t_b: f64) -> Result<Self> {
        check_window(t_a, t_b, self.window)?;
        let keep: Vec<usize> = (0..self.len())
            .filter(|&j| self.times[j] >= t_a - 1e-9 && self.times[j] <= t_b + 1e-9)
            .collect();
        Ok(Self {
            window: (t_a, t_b),
            times: keep.iter().map(|&j| self.times[j]).collect(),
            exact: keep.iter().map(|&j| self.exact[j].clone()).collect(),
            terms: self
                .terms
                .iter()
                .map(|term| keep.iter().map(|&j| term[j].clone()).collect())
                .collect(),
            ..self.clone()
        })
    }

    /// `Σ_k ΔM_k(t_j)` per sample.
    pub fn exact_totals(&self) -> Vec<f64> {
        self.exact.iter().map(|row| row.iter().sum()).collect()
    }

    /// `Σ_k ΔM_k^i(t_j)` per sample.
    pub fn term_totals(&self, i: usize) -> Vec<f64> {
        self.terms[i - 1]
            .iter()
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Frobenius norm of `ΔM^i` over the whole dataset.
    pub fn term_norm(&self, i: usize) -> f64 {
        self.terms[i - 1]
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Pearson correlation between `ΔM_k^i(t_j)` and `ΔM_k(t_j)` over every
    /// sample and mode.
    pub fn modal_correlation(&self, i: usize) -> f64 {
        let x: Vec<f64> = self.terms[i - 1].iter().flatten().copied().collect();
        let y: Vec<f64> = self.exact.iter().flatten().copied().collect();
        pearson(&x, &y)
    }

    /// Pearson correlation between the aggregates `Σ_k ΔM_k^i` and `Σ_k ΔM_k`.
    pub fn aggregate_correlation(&self, i: usize) -> f64 {
        pearson(&self.term_totals(i), &self.exact_totals())
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn check_window(t_a: f64, t_b: f64, available: (f64, f64)) -> Result<()> {
    let tol = 1e-9 * available.1.abs().max(1.0);
    if !(t_a <= t_b) || t_a < available.0 - tol || t_b > available.1 + tol {
        return Err(Error::Range {
            requested: (t_a, t_b),
            available,
        });
    }
    Ok(())
}

/// Streaming construction of a [`MassDerivativeDataset`] from full states.
pub struct DatasetBuilder {
    partition: ModePartition,
    target: MassTarget,
    eval: MemoryEvaluator,
    full: Option<(usize, Convolver)>,
    data: MassDerivativeDataset,
}

impl DatasetBuilder {
    pub fn new(
        n: usize,
        epsilon: f64,
        window: (f64, f64),
        stride: usize,
        target: MassTarget,
    ) -> Result<Self> {
        let partition = ModePartition::rom(n)?;
        let km = n as i64 - 1;
        Ok(Self {
            partition,
            target,
            eval: MemoryEvaluator::new(partition, epsilon),
            full: None,
            data: MassDerivativeDataset {
                n,
                epsilon,
                window,
                stride,
                target,
                wavenumbers: (-km..=km).collect(),
                times: Vec::new(),
                exact: Vec::new(),
                terms: vec![Vec::new(); MAX_ORDER],
            },
        })
    }

    /// Records one sample of the full state `u` (any `k_max >= N - 1`).
    pub fn push(&mut self, t: f64, u: &SpectralField) {
        let k_max = u.k_max().max(self.partition.resolved_k_max());
        let u = u.resized(k_max);
        let conv = match &mut self.full {
            Some((km, c)) if *km == k_max => c,
            _ => &mut self.full.insert((k_max, Convolver::new(k_max))).1,
        };
        // Memory part 2Ĉ(û, ũ) + Ĉ(ũ, ũ), formed without subtracting the
        // Markov part so that small buffer modes keep their precision.
        let mut hat = u.clone();
        hat.restrict(ModeSet::Resolved, &self.partition);
        let mut tilde = u.clone();
        tilde.add_scaled(C64::new(-1.0, 0.0), &hat);
        let ph = conv.physical(hat.coeffs());
        let pt = conv.physical(tilde.coeffs());
        let prod: Vec<f64> = ph.iter().zip(&pt).map(|(a, b)| (2.0 * a + b) * b).collect();
        let mut memory = vec![C64::new(0.0, 0.0); u.coeffs().len()];
        conv.derivative_of_product(&prod, &mut memory);

        let u_hat = u.resized(self.partition.resolved_k_max());
        let kernels = self.eval.all_terms(&u_hat, MAX_ORDER);
        let rate = |v: C64, r: C64| 2.0 * (v.conj() * r).re;
        let km = k_max as i64;
        let exact: Vec<f64> = self
            .data
            .wavenumbers
            .iter()
            .map(|&k| {
                let mem = rate(u_hat.get(k), memory[(k + km) as usize]);
                match self.target {
                    // Dispersion is skew and drops out of the Markov rate.
                    MassTarget::FullRhs => mem + rate(u_hat.get(k), kernels[0].get(k)),
                    MassTarget::MemoryOnly => mem,
                }
            })
            .collect();
        self.data.times.push(t);
        self.data.exact.push(exact);
        for i in 1..=MAX_ORDER {
            let row = self
                .data
                .wavenumbers
                .iter()
                .map(|&k| rate(u_hat.get(k), kernels[i].get(k)))
                .collect();
            self.data.terms[i - 1].push(row);
        }
    }

    pub fn finish(self) -> MassDerivativeDataset {
        self.data
    }
}

/// Builds a dataset from every `stride`-th trajectory sample inside the
/// window.
pub fn build_dataset(
    trajectory: &Trajectory,
    partition: &ModePartition,
    epsilon: f64,
    window: (f64, f64),
    stride: usize,
    target: MassTarget,
) -> Result<MassDerivativeDataset> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    if partition.m() != 2 * partition.n() {
        return Err(Error::InvalidConfig(format!(
            "reduced models use M = 2N, got N = {} and M = {}",
            partition.n(),
            partition.m()
        )));
    }
    let available = match (trajectory.times.first(), trajectory.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::InvalidConfig("empty trajectory".into())),
    };
    check_window(window.0, window.1, available)?;
    let mut builder = DatasetBuilder::new(partition.n(), epsilon, window, stride, target)?;
    let tol = 1e-9 * available.1.abs().max(1.0);
    trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .filter(|(t, _)| **t >= window.0 - tol && **t <= window.1 + tol)
        .step_by(stride)
        .for_each(|(t, u)| builder.push(*t, u));
    Ok(builder.finish())
}

/// Fitted renormalization prefactors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub orders: Vec<usize>,
    /// `α_1 .. α_4`; orders that were not fitted are zero.
    pub alphas: [f64; MAX_ORDER],
    pub residual: f64,
    pub window: (f64, f64),
    pub stride: usize,
}

impl FitResult {
    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i - 1]
    }

    /// `α_1 .. α_order` for a reduced model of the given order.
    pub fn rom_alphas(&self, order: usize) -> Vec<f64> {
        self.alphas[..order].to_vec()
    }

    /// `|α_i| · ‖ΔM^i‖` over the dataset.
    pub fn contribution(&self, data: &MassDerivativeDataset, i: usize) -> f64 {
        self.alpha(i).abs() * data.term_norm(i)
    }

    /// Both odd contributions stay below [`ODD_TERM_THRESHOLD`] times the
    /// second-order one.
    pub fn odd_terms_negligible(&self, data: &MassDerivativeDataset) -> bool {
        let reference = ODD_TERM_THRESHOLD * self.contribution(data, 2);
        [1, 3]
            .iter()
            .all(|&i| self.contribution(data, i) < reference)
    }
}

/// Cost `C_F(α)`: squared per-mode mismatches plus squared net-flow
/// mismatches, over every sample.
pub fn fit_cost(data: &MassDerivativeDataset, alphas: &[f64; MAX_ORDER]) -> f64 {
    let mut cost = 0.0;
    for j in 0..data.len() {
        let mut net = 0.0;
        for m in 0..data.wavenumbers.len() {
            let model: f64 = (1..=MAX_ORDER)
                .map(|i| alphas[i - 1] * data.terms[i - 1][j][m])
                .sum();
            let r = data.exact[j][m] - model;
            cost += r * r;
            net += r;
        }
        cost += net * net;
    }
    cost
}

/// Least-squares solution of `min ‖A x - y‖` with a rank check. Columns are
/// scaled to unit norm before factorization.
fn solve_least_squares(a: DMatrix<f64>, y: DVector<f64>) -> Result<DVector<f64>> {
    let cols = a.ncols();
    let scales: Vec<f64> = (0..cols).map(|c| a.column(c).norm()).collect();
    if let Some(c) = scales.iter().position(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::SingularFit(format!(
            "regressor {c} vanishes or is not finite"
        )));
    }
    let mut scaled = a;
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let qr = scaled.qr();
    let qty = qr.q().transpose() * &y;
    let svd = qr.r().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= RANK_TOLERANCE * smax {
        return Err(Error::SingularFit(format!(
            "design matrix is rank deficient (singular values {smin:e} / {smax:e})"
        )));
    }
    let x = svd
        .solve(&qty, 0.0)
        .map_err(|e| Error::SingularFit(e.to_string()))?;
    Ok(DVector::from_iterator(
        cols,
        x.iter().zip(&scales).map(|(v, s)| v / s),
    ))
}

/// Minimizes [`fit_cost`] over `α_i` for `i` in `orders`, with the other
/// prefactors held at zero.
pub fn fit_alphas(data: &MassDerivativeDataset, orders: &[usize]) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::SingularFit("empty dataset".into()));
    }
    let mut orders = orders.to_vec();
    orders.sort_unstable();
    orders.dedup();
    if orders.is_empty() || orders.iter().any(|&i| i == 0 || i > MAX_ORDER) {
        return Err(Error::InvalidConfig(format!(
            "fit orders must be a nonempty subset of 1..={MAX_ORDER}, got {orders:?}"
        )));
    }
    let n_k = data.wavenumbers.len();
    let rows = data.len() * (n_k + 1);
    let mut a = DMatrix::zeros(rows, orders.len());
    let mut y = DVector::zeros(rows);
    for j in 0..data.len() {
        let base = j * (n_k + 1);
        for m in 0..n_k {
            y[base + m] = data.exact[j][m];
            for (c, &i) in orders.iter().enumerate() {
                a[(base + m, c)] = data.terms[i - 1][j][m];
            }
        }
        y[base + n_k] = data.exact[j].iter().sum();
        for (c, &i) in orders.iter().enumerate() {
            a[(base + n_k, c)] = data.terms[i - 1][j].iter().sum();
        }
    }
    if y.iter().all(|v| *v == 0.0) {
        let alphas = [0.0; MAX_ORDER];
        return Ok(FitResult {
            orders,
            alphas,
            residual: 0.0,
            window: data.window,
            stride: data.stride,
        });
    }
    let x = solve_least_squares(a, y)?;
    let mut alphas = [0.0; MAX_ORDER];
    for (c, &i) in orders.iter().enumerate() {
        alphas[i - 1] = x[c];
    }
    Ok(FitResult {
        residual: fit_cost(data, &alphas),
        orders,
        alphas,
        window: data.window,
        stride: data.stride,
    })
}

/// Characteristic scales of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondimParams {
    pub l: f64,
    /// `sqrt((1/L) ∫ u₀² dx)`.
    pub u: f64,
    /// `L / U`.
    pub t: f64,
    /// Dispersive Reynolds number `sqrt(U) L / ε`.
    pub re: f64,
    /// Resolution `N L`.
    pub lambda: f64,
}

impl NondimParams {
    pub fn new(epsilon: f64, n: usize, u0: &SpectralField) -> Result<Self> {
        let l = DOMAIN_LENGTH;
        let u = u0.total_mass().sqrt();
        if !(u > 0.0) {
            return Err(Error::InvalidConfig(
                "initial condition has zero energy".into(),
            ));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "nondimensionalization needs epsilon > 0, got {epsilon}"
            )));
        }
        Ok(Self {
            l,
            u,
            t: l / u,
            re: u.sqrt() * l / epsilon,
            lambda: n as f64 * l,
        })
    }
}

/// `Π_i = α_i / T^i` together with the scales used.
pub fn nondimensionalize(
    alphas: &[f64],
    epsilon: f64,
    n: usize,
    u0: &SpectralField,
) -> Result<(Vec<f64>, NondimParams)> {
    let p = NondimParams::new(epsilon, n, u0)?;
    let pi = alphas
        .iter()
        .enumerate()
        .map(|(j, a)| a / p.t.powi(j as i32 + 1))
        .collect();
    Ok((pi, p))
}

/// One sample for the scaling regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub pi: f64,
    pub re: f64,
    pub lambda: f64,
}

/// `Π_i = a Re^b Λ^c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingLaw {
    pub order: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub n_points: usize,
    /// Coefficient of determination of the log-log regression.
    pub r_squared: f64,
    pub max_log_residual: f64,
}

impl ScalingLaw {
    pub fn evaluate(&self, re: f64, lambda: f64) -> f64 {
        self.a * re.powf(self.b) * lambda.powf(self.c)
    }
}

/// Regresses `log|Π|` on `(1, log Re, log Λ)`. All `Π` must share one sign.
pub fn fit_scaling_law(order: usize, points: &[ScalingPoint]) -> Result<ScalingLaw> {
    if points.len() < 3 {
        return Err(Error::SingularFit(format!(
            "scaling fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let positive = points.iter().filter(|p| p.pi > 0.0).count();
    let negative = points.iter().filter(|p| p.pi < 0.0).count();
    if positive + negative != points.len() || (positive > 0 && negative > 0) {
        return Err(Error::SignInconsistency(format!(
            "order {order}: {positive} positive, {negative} negative and {} zero coefficients",
            points.len() - positive - negative
        )));
    }
    if points.iter().any(|p| !(p.re > 0.0 && p.lambda > 0.0)) {
        return Err(Error::InvalidConfig(
            "Re and Lambda must be positive".into(),
        ));
    }
    let sign = if positive > 0 { 1.0 } else { -1.0 };
    let a = DMatrix::from_fn(points.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => points[r].re.ln(),
        _ => points[r].lambda.ln(),
    });
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.pi.abs().ln()));
    let x = solve_least_squares(a.clone(), y.clone()).map_err(|e| match e {
        Error::SingularFit(m) => Error::SingularFit(format!("degenerate (Re, Lambda) design: {m}")),
        other => other,
    })?;
    let fitted = &a * &x;
    let resid = &y - &fitted;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res = resid.norm_squared();
    Ok(ScalingLaw {
        order,
        a: sign * x[0].exp(),
        b: x[1],
        c: x[2],
        n_points: points.len(),
        r_squared: if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else {
            1.0
        },
        max_log_residual: resid.amax(),
    })
}

/// `α_i = a_i Re^{b_i} Λ^{c_i} T^i` for `i = 1..=order`; orders without a
/// law get zero.
pub fn predict_alphas(
    epsilon: f64,
    n: usize,
    laws: &[ScalingLaw],
    u0: &SpectralField,
    order: usize,
) -> Result<Vec<f64>> {
    let p = NondimParams::new(epsilon, n, u0)?;
    Ok((1..=order)
        .map(|i| {
            laws.iter()
                .find(|l| l.order == i)
                .map_or(0.0, |l| l.evaluate(p.re, p.lambda) * p.t.powi(i as i32))
        })
        .collect())
}

/// Fit of `(α₂, α₄)` on one window width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub width: f64,
    pub alpha2: Option<f64>,
    pub alpha4: Option<f64>,
    pub error: Option<String>,
    /// Relative change against the widest window.
    pub rel_change_alpha2: Option<f64>,
    pub rel_change_alpha4: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub entries: Vec<WindowEntry>,
    /// Largest relative change of `α₂` among widths of at least 3.
    pub max_rel_change_alpha2_wide: f64,
    /// Widths whose fit failed or changed sign or moved `α₂` by more than
    /// 25% against the widest window.
    pub unstable_widths: Vec<f64>,
}

/// Refits `(α₂, α₄)` on the windows `[t_a, t_a + w]` for each width and
/// compares against the widest.
pub fn fit_window_robustness(data: &MassDerivativeDataset, widths: &[f64]) -> Result<WindowReport> {
    let mut sorted = widths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t_a = data.window.0;
    let mut entries: Vec<WindowEntry> = sorted
        .iter()
        .map(|&w| {
            let fit = data
                .window(t_a, t_a + w)
                .and_then(|d| fit_alphas(&d, &[2, 4]));
            match fit {
                Ok(f) => WindowEntry {
                    width: w,
                    alpha2: Some(f.alpha(2)),
                    alpha4: Some(f.alpha(4)),
                    error: None,
                    rel_change_alpha2: None,
                    rel_change_alpha4: None,
                },
                Err(e) => WindowEntry {
                    width: w,
                    alpha2: None,
                    alpha4: None,
                    error: Some(e.to_string()),
                    rel_change_alpha2: None,
                    rel_change_alpha4: None,
                },
            }
        })
        .collect();
    let reference = entries
        .last()
        .and_then(|e| e.alpha2.zip(e.alpha4))
        .ok_or_else(|| Error::SingularFit("widest window could not be fitted".into()))?;
    let rel = |x: f64, r: f64| (x - r).abs() / r.abs();
    let mut unstable = Vec::new();
    let mut wide = 0.0f64;
    for e in &mut entries {
        match e.alpha2.zip(e.alpha4) {
            Some((a2, a4)) => {
                let c2 = rel(a2, reference.0);
                e.rel_change_alpha2 = Some(c2);
                e.rel_change_alpha4 = Some(rel(a4, reference.1));
                if e.width >= 3.0 {
                    wide = wide.max(c2);
                }
                if c2 > 0.25
                    || a2.signum() != reference.0.signum()
                    || a4.signum() != reference.1.signum()
                {
                    unstable.push(e.width);
                }
            }
            None => unstable.push(e.width),
        }
    }
    Ok(WindowReport {
        entries,
        max_rel_change_alpha2_wide: wide,
        unstable_widths: unstable,
    })
}

/// Exact scaling-law data, for tests and diagnostics.
pub fn synthetic_points(a: f64, b: f64, c: f64, grid: &[(f64, f64)]) -> Vec<ScalingPoint> {
    grid.iter()
        .map(|&(re, lambda)| ScalingPoint {
            pi: a * re.powf(b) * lambda.powf(c),
            re,
            lambda,
        })
        .collect()
}
