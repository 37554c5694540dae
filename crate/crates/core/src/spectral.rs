//! Fourier representation of real 2π-periodic fields and the truncated
//! convolution algebra used by every model in the crate.
//!
//! A [`SpectralField`] stores the coefficients `u_k` of
//! `u(x) = Σ u_k e^{ikx}` for `|k| <= k_max`, ordered `k = -k_max ..= k_max`.
//! Real fields satisfy `u_{-k} = conj(u_k)`.
//!
//! The convolution `C_k(f, g) = -(ik/2) Σ_{p+q=k} f_p g_q` is the Fourier
//! image of `-(1/2) ∂_x (f g)`. [`conv_truncated`] evaluates it by direct
//! summation and is the reference; [`Convolver`] is the padded-transform
//! fast path used inside time loops.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Complex Fourier coefficients indexed by signed wavenumber.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    k_max: usize,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn zeros(k_max: usize) -> Self {
        Self {
            k_max,
            coeffs: vec![C64::new(0.0, 0.0); 2 * k_max + 1],
        }
    }

    /// Builds a field from a function of the wavenumber.
    pub fn from_fn(k_max: usize, mut f: impl FnMut(i64) -> C64) -> Self {
        let km = k_max as i64;
        Self {
            k_max,
            coeffs: (-km..=km).map(&mut f).collect(),
        }
    }

    /// Wraps coefficients ordered `k = -k_max ..= k_max`.
    pub fn from_coeffs(coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "coefficient vector length {} is even; expected 2*k_max+1",
                coeffs.len()
            )));
        }
        Ok(Self {
            k_max: coeffs.len() / 2,
            coeffs,
        })
    }

    /// Coefficients of `sin(x)`: `u_1 = -i/2`, `u_{-1} = i/2`.
    pub fn sine(k_max: usize) -> Self {
        let mut f = Self::zeros(k_max);
        if k_max >= 1 {
            f.set(1, C64::new(0.0, -0.5));
            f.set(-1, C64::new(0.0, 0.5));
        }
        f
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn wavenumbers(&self) -> impl Iterator<Item = i64> {
        let km = self.k_max as i64;
        -km..=km
    }

    #[inline]
    fn index(&self, k: i64) -> Option<usize> {
        let km = self.k_max as i64;
        (k.abs() <= km).then(|| (k + km) as usize)
    }

    /// Coefficient at `k`; zero outside the stored range.
    #[inline]
    pub fn get(&self, k: i64) -> C64 {
        self.index(k)
            .map(|i| self.coeffs[i])
            .unwrap_or(C64::new(0.0, 0.0))
    }

    /// Sets the coefficient at `k`. Panics if `|k| > k_max`.
    pub fn set(&mut self, k: i64, value: C64) {
        let i = self
            .index(k)
            .unwrap_or_else(|| panic!("wavenumber {k} outside |k| <= {}", self.k_max));
        self.coeffs[i] = value;
    }

    /// Copy with a different `k_max`: extra modes are zero, dropped modes are truncated.
    pub fn resized(&self, k_max: usize) -> Self {
        Self::from_fn(k_max, |k| self.get(k))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// `Σ_k |u_k|²`, which equals `(1/2π) ∫ u² dx`.
    pub fn total_mass(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Mass in the modes `|k| < n`.
    pub fn mass_below(&self, n: usize) -> f64 {
        self.wavenumbers()
            .filter(|k| k.unsigned_abs() < n as u64)
            .map(|k| self.get(k).norm_sqr())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `sqrt(Σ |u_k|²)`.
    pub fn l2_norm(&self) -> f64 {
        self.total_mass().sqrt()
    }

    /// Largest `|u_{-k} - conj(u_k)|` relative to the largest coefficient.
    pub fn hermitian_defect(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let km = self.k_max as i64;
        (0..=km)
            .map(|k| (self.get(-k) - self.get(k).conj()).norm())
            .fold(0.0, f64::max)
            / scale
    }

    /// Projects onto Hermitian-symmetric fields: `u_k ← (u_k + conj(u_{-k}))/2`.
    pub fn symmetrize(&mut self) {
        let km = self.k_max as i64;
        for k in 1..=km {
            let avg = (self.get(k) + self.get(-k).conj()) * 0.5;
            self.set(k, avg);
            self.set(-k, avg.conj());
        }
        let i0 = self.k_max;
        self.coeffs[i0].im = 0.0;
    }

    pub fn scale(&mut self, c: C64) {
        self.coeffs.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c * other`, both fields with the same `k_max`.
    pub fn add_scaled(&mut self, c: C64, other: &SpectralField) {
        assert_eq!(self.k_max, other.k_max, "k_max mismatch in add_scaled");
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += c * b;
        }
    }

    /// `Σ_k |a_k - b_k|²` over the union of both ranges.
    pub fn distance_sqr(&self, other: &SpectralField) -> f64 {
        let km = self.k_max.max(other.k_max) as i64;
        (-km..=km)
            .map(|k| (self.get(k) - other.get(k)).norm_sqr())
            .sum()
    }

    /// Zeroes every mode outside `set`.
    pub fn restrict(&mut self, set: ModeSet, partition: &ModePartition) {
        let km = self.k_max as i64;
        for (i, k) in (-km..=km).enumerate() {
            if !partition.contains(set, k) {
                self.coeffs[i] = C64::new(0.0, 0.0);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FieldRecord {
    k_max: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Serialize for SpectralField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FieldRecord {
            k_max: self.k_max,
            re: self.coeffs.iter().map(|c| c.re).collect(),
            im: self.coeffs.iter().map(|c| c.im).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpectralField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = FieldRecord::deserialize(d)?;
        let n = 2 * rec.k_max + 1;
        if rec.re.len() != n || rec.im.len() != n {
            return Err(serde::de::Error::custom(format!(
                "expected {n} coefficients for k_max = {}, got re: {}, im: {}",
                rec.k_max,
                rec.re.len(),
                rec.im.len()
            )));
        }
        Ok(SpectralField {
            k_max: rec.k_max,
            coeffs: rec
                .re
                .into_iter()
                .zip(rec.im)
                .map(|(re, im)| C64::new(re, im))
                .collect(),
        })
    }
}

/// Resolved set `F = {|k| < N}` and unresolved buffer `G = {N <= |k| < M}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModePartition {
    n: usize,
    m: usize,
}

impl ModePartition {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m <= n {
            return Err(Error::InvalidConfig(format!(
                "mode partition needs 0 < N < M, got N = {n}, M = {m}"
            )));
        }
        Ok(Self { n, m })
    }

    /// The ROM partition with buffer `M = 2N`.
    pub fn rom(n: usize) -> Result<Self> {
        Self::new(n, 2 * n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Largest wavenumber of the full (resolved + buffer) range.
    pub fn full_k_max(&self) -> usize {
        self.m - 1
    }

    pub fn resolved_k_max(&self) -> usize {
        self.n - 1
    }

    #[inline]
    pub fn contains(&self, set: ModeSet, k: i64) -> bool {
        let a = k.unsigned_abs() as usize;
        match set {
            ModeSet::Resolved => a < self.n,
            ModeSet::Unresolved => a >= self.n && a < self.m,
            ModeSet::All => a < self.m,
        }
    }
}

/// Selector for the output modes a convolution keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSet {
    Resolved,
    Unresolved,
    All,
}

/// Direct-sum truncated convolution `-(ik/2) Σ_{p+q=k} f_p g_q`, kept for
/// `k` in `retain` (the restriction applies to the output index only).
///
/// The result has `k_max = M - 1`. Exact up to floating-point summation.
pub fn conv_truncated(
    f: &SpectralField,
    g: &SpectralField,
    retain: ModeSet,
    partition: &ModePartition,
) -> Result<SpectralField> {
    if f.k_max != g.k_max {
        return Err(Error::Dimension(format!(
            "convolution operands have k_max {} and {}",
            f.k_max, g.k_max
        )));
    }
    Ok(direct_conv(f, g, partition.full_k_max(), |k| {
        partition.contains(retain, k)
    }))
}

/// Untruncated product `-(ik/2) Σ_{p+q=k} f_p g_q` kept for `|k| <= k_max` of
/// the operands. Panics if the operand sizes differ.
pub fn conv_full(f: &SpectralField, g: &SpectralField) -> SpectralField {
    assert_eq!(f.k_max, g.k_max, "k_max mismatch in conv_full");
    direct_conv(f, g, f.k_max, |_| true)
}

fn direct_conv(
    f: &SpectralField,
    g: &SpectralField,
    k_out: usize,
    keep: impl Fn(i64) -> bool,
) -> SpectralField {
    let kin = f.k_max as i64;
    let mut out = SpectralField::zeros(k_out);
    let kout = k_out as i64;
    for k in -kout..=kout {
        if !keep(k) {
            continue;
        }
        let lo = (k - kin).max(-kin);
        let hi = (k + kin).min(kin);
        let mut acc = C64::new(0.0, 0.0);
        for p in lo..=hi {
            acc += f.coeffs[(p + kin) as usize] * g.coeffs[(k - p + kin) as usize];
        }
        out.set(k, acc * (-I * (k as f64) * 0.5));
    }
    out
}

/// Multiplies component `j` by `j^p`.
pub fn scale_by_k_power(f: &SpectralField, p: u32) -> SpectralField {
    SpectralField::from_fn(f.k_max, |k| f.get(k) * (k as f64).powi(p as i32))
}

/// Keeps the resolved modes `|k| < N`, zeroes the rest.
pub fn project_resolved(f: &SpectralField, partition: &ModePartition) -> SpectralField {
    let mut out = f.clone();
    out.restrict(ModeSet::Resolved, partition);
    out
}

/// Complex samples `Σ_k u_k e^{i k x_j}` at `x_j = 2πj/n`.
pub fn real_space_samples_complex(f: &SpectralField, n_points: usize) -> Result<Vec<C64>> {
    if n_points < 2 * f.k_max + 1 {
        return Err(Error::Aliasing {
            n_points,
            k_max: f.k_max,
        });
    }
    let mut buf = vec![C64::new(0.0, 0.0); n_points];
    let km = f.k_max as i64;
    for k in -km..=km {
        let idx = k.rem_euclid(n_points as i64) as usize;
        buf[idx] += f.get(k);
    }
    FftPlanner::new()
        .plan_fft_inverse(n_points)
        .process(&mut buf);
    Ok(buf)
}

/// Real-space values of the field on `n_points` uniform points of `[0, 2π)`.
pub fn real_space_samples(f: &SpectralField, n_points: usize) -> Result<Vec<f64>> {
    Ok(real_space_samples_complex(f, n_points)?
        .into_iter()
        .map(|c| c.re)
        .collect())
}

/// Relative L2 distance between two fields in real space, measured on a
/// grid fine enough to hold both exactly.
pub fn relative_l2_error(exact: &SpectralField, approx: &SpectralField) -> f64 {
    // By Parseval the grid norm equals the coefficient norm; sampling is kept
    // so the metric is literally the real-space one.
    let km = exact.k_max.max(approx.k_max);
    let n = 2 * km + 2;
    let a = real_space_samples(&exact.resized(km), n).expect("grid sized to k_max");
    let b = real_space_samples(&approx.resized(km), n).expect("grid sized to k_max");
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

/// Forward and inverse transform tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformCount {
    pub forward: u64,
    pub inverse: u64,
}

impl TransformCount {
    /// Transform-plus-inverse pairs, counting an unmatched transform as a pair.
    pub fn pairs(&self) -> u64 {
        self.forward.max(self.inverse)
    }
}

fn is_smooth(mut n: usize) -> bool {
    for p in [2, 3, 5, 7] {
        while n.is_multiple_of(p) {
            n /= p;
        }
    }
    n == 1
}

/// Transform-based evaluation of truncated convolutions for fields with
/// `|k| <= k_max`, exact (alias-free) on every output mode `|k| <= k_max`.
///
/// Real-space arrays have length [`Convolver::len`] `>= 3 (k_max + 1)`.
pub struct Convolver {
    k_max: usize,
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buf: Vec<C64>,
    scratch: Vec<C64>,
    count: TransformCount,
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver")
            .field("k_max", &self.k_max)
            .field("len", &self.len)
            .field("count", &self.count)
            .finish()
    }
}

impl Clone for Convolver {
    fn clone(&self) -> Self {
        Self::new(self.k_max)
    }
}

impl Convolver {
    pub fn new(k_max: usize) -> Self {
        // Products of inputs with |k| <= K reach 2K; output modes |k| <= K
        // stay clean when len >= 3K + 1. 3(K + 1) also covers the 3·(2N)
        // requirement for ROM buffers with K = 2N - 1.
        let mut len = 3 * (k_max + 1);
        while !is_smooth(len) {
            len += 1;
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            k_max,
            len,
            forward,
            inverse,
            buf: vec![C64::new(0.0, 0.0); len],
            scratch: vec![C64::new(0.0, 0.0); scratch_len],
            count: TransformCount::default(),
        }
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn transform_count(&self) -> TransformCount {
        self.count
    }

    pub fn reset_count(&mut self) {
        self.count = TransformCount::default();
    }

    /// Real-space samples of a Hermitian spectrum given as `k = -K ..= K`.
    pub fn to_physical(&mut self, spec: &[C64], out: &mut [f64]) {
        debug_assert_eq!(spec.len(), 2 * self.k_max + 1);
        debug_assert_eq!(out.len(), self.len);
        self.buf.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
        let km = self.k_max as i64;
        for (i, c) in spec.iter().enumerate() {
            let k = i as i64 - km;
            self.buf[k.rem_euclid(self.len as i64) as usize] = *c;
        }
        self.inverse
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        self.count.inverse += 1;
        for (o, c) in out.iter_mut().zip(&self.buf) {
            *o = c.re;
        }
    }

    /// Allocating form of [`Convolver::to_physical`].
    pub fn physical(&mut self, spec: &[C64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.to_physical(spec, &mut out);
        out
    }

    /// Given the real-space product `w = f g`, writes `-(ik/2) ŵ_k` for
    /// `|k| <= K` into `out`.
    pub fn derivative_of_product(&mut self, product: &[f64], out: &mut [C64]) {
        debug_assert_eq!(product.len(), self.len);
        debug_assert_eq!(out.len(), 2 * self.k_max + 1);
        for (b, p) in self.buf.iter_mut().zip(product) {
            *b = C64::new(*p, 0.0);
        }
        self.forward
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        self.count.forward += 1;
        let km = self.k_max as i64;
        let inv_len = 1.0 / self.len as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let k = i as i64 - km;
            let v = self.buf[k.rem_euclid(self.len as i64) as usize] * inv_len;
            *o = v * (-I * (k as f64) * 0.5);
        }
    }

    /// Transform path for [`conv_truncated`]: same contract, inputs must have
    /// `k_max` equal to this convolver's and to `M - 1`.
    pub fn conv(
        &mut self,
        f: &SpectralField,
        g: &SpectralField,
        retain: ModeSet,
        partition: &ModePartition,
    ) -> Result<SpectralField> {
        if f.k_max != g.k_max || f.k_max != self.k_max || partition.full_k_max() != self.k_max {
            return Err(Error::Dimension(format!(
                "transform convolution sized for k_max {} got operands {} / {} and M - 1 = {}",
                self.k_max,
                f.k_max,
                g.k_max,
                partition.full_k_max()
            )));
        }
        let pf = self.physical(&f.coeffs);
        let pg = self.physical(&g.coeffs);
        let prod: Vec<f64> = pf.iter().zip(&pg).map(|(a, b)| a * b).collect();
        let mut out = SpectralField::zeros(self.k_max);
        self.derivative_of_product(&prod, &mut out.coeffs);
        out.restrict(retain, partition);
        Ok(out)
    }
}

/// Uniform grid `x_j = 2πj/n`.
pub fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
}
