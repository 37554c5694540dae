//! Shared fixtures for integration tests: random fields and a direct-sum
//! transcription of the closed-form memory kernels.

#![allow(dead_code)]

use kdv_mz::spectral::{
    conv_truncated, scale_by_k_power, ModePartition, ModeSet, SpectralField, C64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random real field supported on `|k| < n`, stored with `k_max = k_max`.
pub fn random_resolved(n: usize, k_max: usize, seed: u64) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = SpectralField::zeros(k_max);
    for k in 1..n as i64 {
        let c = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        f.set(k, c);
        f.set(-k, c.conj());
    }
    f.set(0, C64::new(rng.random_range(-1.0..1.0), 0.0));
    f
}

pub fn rel_diff(a: &SpectralField, b: &SpectralField) -> f64 {
    let scale = a.l2_norm().max(b.l2_norm());
    if scale == 0.0 {
        return 0.0;
    }
    a.distance_sqr(b).sqrt() / scale
}

/// Which symbols of the closed forms to take at face value.
#[derive(Clone, Copy, Debug)]
pub struct Reading {
    /// The `-3ε² û^{k3}` argument inside the `2iε² C̃^{k3}(A, ...)` term of
    /// the fourth-order kernel; `false` reads it as `-3iε² û^{k3}`.
    pub literal_missing_i: bool,
    /// The bare `C(û, ...)` inside the `2 C̃(C̃(û,û), ...)` term; `false`
    /// reads it as the resolved convolution `Ĉ`.
    pub literal_bare_c: bool,
}

pub const LITERAL: Reading = Reading {
    literal_missing_i: true,
    literal_bare_c: true,
};

pub const CORRECTED: Reading = Reading {
    literal_missing_i: false,
    literal_bare_c: false,
};

/// Direct-sum evaluation of the closed forms, symbol for symbol.
pub struct Appendix {
    pub p: ModePartition,
    pub eps: f64,
    pub u: SpectralField,
}

impl Appendix {
    pub fn new(u_hat: &SpectralField, eps: f64, p: ModePartition) -> Self {
        Self {
            p,
            eps,
            u: u_hat.resized(p.full_k_max()),
        }
    }

    fn conv(&self, a: &SpectralField, b: &SpectralField, s: ModeSet) -> SpectralField {
        conv_truncated(a, b, s, &self.p).unwrap()
    }
    pub fn ch(&self, a: &SpectralField, b: &SpectralField) -> SpectralField {
        self.conv(a, b, ModeSet::Resolved)
    }
    pub fn ct(&self, a: &SpectralField, b: &SpectralField) -> SpectralField {
        self.conv(a, b, ModeSet::Unresolved)
    }
    pub fn call(&self, a: &SpectralField, b: &SpectralField) -> SpectralField {
        self.conv(a, b, ModeSet::All)
    }
    /// `c · ε^{2m} · k^{3m} · x`, with `c` a complex constant.
    pub fn kp(&self, c: C64, m: u32, x: &SpectralField) -> SpectralField {
        scale_by_k_power(x, 3 * m).scaled(c * self.eps.powi(2 * m as i32))
    }

    /// `Σ c_j x_j`
    pub fn lin(&self, parts: &[(f64, &SpectralField)]) -> SpectralField {
        self.clin(
            &parts
                .iter()
                .map(|(c, x)| (C64::new(*c, 0.0), *x))
                .collect::<Vec<_>>(),
        )
    }
    pub fn clin(&self, parts: &[(C64, &SpectralField)]) -> SpectralField {
        let mut out = SpectralField::zeros(self.p.full_k_max());
        for (c, x) in parts {
            out.add_scaled(*c, x);
        }
        out
    }

    pub fn r0(&self) -> SpectralField {
        let u = &self.u;
        self.lin(&[(1.0, &self.kp(I, 1, u)), (1.0, &self.ch(u, u))])
    }

    pub fn r1(&self) -> SpectralField {
        let u = &self.u;
        self.ch(u, &self.ct(u, u)).scaled(C64::new(2.0, 0.0))
    }

    pub fn r2(&self) -> SpectralField {
        let u = &self.u;
        let t = self.ct(u, u);
        let a = self.r0();
        let inner = self.lin(&[
            (1.0, &self.kp(I, 1, &t)),
            (2.0, &self.ct(u, &t)),
            (-2.0, &self.ct(u, &a)),
        ]);
        self.lin(&[(-2.0, &self.ch(&t, &t)), (-2.0, &self.ch(u, &inner))])
    }

    /// The nine-line bracket that multiplies `2Ĉ(û, ·)` in the third-order
    /// kernel and `-8Ĉ(C̃(û,û), ·)` in the fourth-order one.
    fn w3(&self) -> SpectralField {
        let u = &self.u;
        let t = self.ct(u, u);
        let a = self.r0();
        let u3 = self.kp(I, 1, u);
        let chuu = self.ch(u, u);
        // −ε⁴ C̃^{k6}(û,û)
        let l1 = self.kp(C64::new(-1.0, 0.0), 2, &t);
        // −2iε² C̃^{k3}(û, 2iε²û^{k3} + 2Ĉ(û,û) − C̃(û,û))
        let l2 = self.kp(
            C64::new(0.0, -2.0),
            1,
            &self.ct(u, &self.lin(&[(2.0, &u3), (2.0, &chuu), (-1.0, &t)])),
        );
        // 2C̃(û, Z3)
        let z3 = self.lin(&[
            (1.0, &self.kp(C64::new(-1.0, 0.0), 2, u)),
            (1.0, &self.kp(I, 1, &chuu)),
            (
                2.0,
                &self.ch(u, &self.lin(&[(1.0, &u3), (1.0, &chuu), (-2.0, &t)])),
            ),
            (1.0, &self.kp(I, 1, &t)),
            (2.0, &self.ct(u, &self.lin(&[(-2.0, &a), (1.0, &t)]))),
        ]);
        let l3 = self.ct(u, &z3).scaled(C64::new(2.0, 0.0));
        let l4 = self
            .ct(&a, &self.lin(&[(1.0, &a), (-1.0, &t)]))
            .scaled(C64::new(2.0, 0.0));
        let l5 = self.ct(&t, &t).scaled(C64::new(2.0, 0.0));
        self.lin(&[(1.0, &l1), (1.0, &l2), (1.0, &l3), (1.0, &l4), (1.0, &l5)])
    }

    pub fn r3(&self) -> SpectralField {
        let u = &self.u;
        let t = self.ct(u, u);
        let a = self.r0();
        let v = self.lin(&[
            (1.0, &self.kp(I, 1, &t)),
            (-2.0, &self.ct(u, &self.lin(&[(1.0, &a), (-1.0, &t)]))),
        ]);
        self.lin(&[(2.0, &self.ch(u, &self.w3())), (6.0, &self.ch(&t, &v))])
    }

    pub fn r4(&self, reading: Reading) -> SpectralField {
        let u = &self.u;
        let t = self.ct(u, u);
        let a = self.r0();
        let u3 = self.kp(I, 1, u);
        let u6 = self.kp(C64::new(-1.0, 0.0), 2, u); // −ε⁴û^{k6}
        let chuu = self.ch(u, u);
        // iε⁶ C̃^{k9}(û,û)
        let a1 = self.kp(C64::new(0.0, 1.0), 3, &t);
        // −2ε⁴ C̃^{k6}(û, 3iε²û^{k3} + 3Ĉ(û,û) − C̃(û,û))
        let a2 = self.kp(
            C64::new(-2.0, 0.0),
            2,
            &self.ct(u, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-1.0, &t)])),
        );
        // −2iε² C̃^{k3}(û, −3ε⁴û^{k6} + 3iε²Ĉ^{k3}(û,û) + 2Ĉ(û, 3iε²û^{k3} + 3Ĉ − 5C̃)
        //                 + iε² C̃^{k3}(û,û) − 2C̃(û, 3iε²û^{k3} + 3Ĉ − C̃))
        let a3_arg = self.lin(&[
            (3.0, &u6),
            (3.0, &self.kp(I, 1, &chuu)),
            (
                2.0,
                &self.ch(u, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-5.0, &t)])),
            ),
            (1.0, &self.kp(I, 1, &t)),
            (
                -2.0,
                &self.ct(u, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-1.0, &t)])),
            ),
        ]);
        let a3 = self.kp(C64::new(0.0, -2.0), 1, &self.ct(u, &a3_arg));
        // −2C̃(û, Z4)
        let z4_inner = self.lin(&[
            (-1.0, &u6), // ε⁴û^{k6}
            (1.0, &self.kp(C64::new(0.0, -1.0), 1, &chuu)),
            (
                -2.0,
                &self.ch(u, &self.lin(&[(1.0, &u3), (1.0, &chuu), (-3.0, &t)])),
            ),
            (1.0, &self.kp(C64::new(0.0, -3.0), 1, &t)),
            (
                2.0,
                &self.ct(u, &self.lin(&[(5.0, &u3), (5.0, &chuu), (-3.0, &t)])),
            ),
        ]);
        let z4_tail = self.lin(&[
            (3.0, &u6),
            (3.0, &self.kp(I, 1, &chuu)),
            (
                2.0,
                &self.ch(u, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-5.0, &t)])),
            ),
            (1.0, &self.kp(I, 1, &t)),
            (
                2.0,
                &self.ct(u, &self.lin(&[(-3.0, &u3), (-3.0, &chuu), (1.0, &t)])),
            ),
        ]);
        let z4 = self.lin(&[
            (1.0, &self.kp(C64::new(0.0, 1.0), 3, u)),     // iε⁶û^{k9}
            (1.0, &self.kp(C64::new(1.0, 0.0), 2, &chuu)), // ε⁴Ĉ^{k6}
            (
                1.0,
                &self.kp(
                    C64::new(0.0, -2.0),
                    1,
                    &self.ch(u, &self.lin(&[(1.0, &u3), (1.0, &chuu), (-3.0, &t)])),
                ),
            ),
            (2.0, &self.ch(u, &z4_inner)),
            (-2.0, &self.ch(&a, &self.lin(&[(1.0, &a), (-2.0, &t)]))),
            (-6.0, &self.ch(&t, &t)),
            (1.0, &self.kp(C64::new(-1.0, 0.0), 2, &t)),
            (
                1.0,
                &self.kp(
                    C64::new(0.0, 2.0),
                    1,
                    &self.ct(u, &self.lin(&[(-3.0, &u3), (-3.0, &chuu), (1.0, &t)])),
                ),
            ),
            (2.0, &self.ct(u, &z4_tail)),
            (
                2.0,
                &self.ct(&a, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-2.0, &t)])),
            ),
            (2.0, &self.ct(&t, &t)),
        ]);
        let a4 = self.ct(u, &z4).scaled(C64::new(-2.0, 0.0));
        // +2iε² C̃^{k3}(A, −3ε²û^{k3} − 3Ĉ(û,û) + 2C̃(û,û))
        let first = if reading.literal_missing_i {
            self.kp(C64::new(-3.0, 0.0), 1, u)
        } else {
            self.kp(C64::new(0.0, -3.0), 1, u)
        };
        let a5 = self.kp(
            C64::new(0.0, 2.0),
            1,
            &self.ct(&a, &self.lin(&[(1.0, &first), (-3.0, &chuu), (2.0, &t)])),
        );
        // −2C̃(A, 3ε⁴û^{k6} − 3iε²Ĉ^{k3} + 2Ĉ(û, −3A + 5T) − iε²C̃^{k3} + 2C̃(û, 3A − T))
        let z4b = self.lin(&[
            (-3.0, &u6),
            (1.0, &self.kp(C64::new(0.0, -3.0), 1, &chuu)),
            (
                2.0,
                &self.ch(u, &self.lin(&[(-3.0, &u3), (-3.0, &chuu), (5.0, &t)])),
            ),
            (1.0, &self.kp(C64::new(0.0, -1.0), 1, &t)),
            (
                2.0,
                &self.ct(u, &self.lin(&[(3.0, &u3), (3.0, &chuu), (-1.0, &t)])),
            ),
        ]);
        let a6 = self.ct(&a, &z4b).scaled(C64::new(-2.0, 0.0));
        // +2C̃(T, ε⁴û^{k6} − iε²Ĉ^{k3} − 2C(û, A − 3T) − 3iε²C̃^{k3} + 2C̃(û, 5A − 3T))
        let arg = self.lin(&[(1.0, &u3), (1.0, &chuu), (-3.0, &t)]);
        let bare = if reading.literal_bare_c {
            self.call(u, &arg)
        } else {
            self.ch(u, &arg)
        };
        let z4c = self.lin(&[
            (-1.0, &u6),
            (1.0, &self.kp(C64::new(0.0, -1.0), 1, &chuu)),
            (-2.0, &bare),
            (1.0, &self.kp(C64::new(0.0, -3.0), 1, &t)),
            (
                2.0,
                &self.ct(u, &self.lin(&[(5.0, &u3), (5.0, &chuu), (-3.0, &t)])),
            ),
        ]);
        let a7 = self.ct(&t, &z4c).scaled(C64::new(2.0, 0.0));
        // −2iε² C̃^{k3}(T, T)
        let a8 = self.kp(C64::new(0.0, -2.0), 1, &self.ct(&t, &t));
        let w4 = self.lin(&[
            (1.0, &a1),
            (1.0, &a2),
            (1.0, &a3),
            (1.0, &a4),
            (1.0, &a5),
            (1.0, &a6),
            (1.0, &a7),
            (1.0, &a8),
        ]);

        let y = self.lin(&[
            (1.0, &self.kp(I, 1, &t)),
            (2.0, &self.ct(u, &self.lin(&[(1.0, &a), (1.0, &t)]))),
        ]);
        let g = self.lin(&[(1.0, &self.kp(I, 1, &t)), (2.0, &self.ct(u, &t))]);
        self.lin(&[
            (2.0, &self.ch(u, &w4)),
            (-8.0, &self.ch(&t, &self.w3())),
            (48.0, &self.ch(&self.ct(u, &a), &g)),
            (-6.0, &self.ch(&y, &y)),
        ])
    }
}

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Norms of `m - Σ_{i≤n} (-1)^{i+1} t^i/i! R^i` for `n = 0..kernels.len()`,
/// with `kernels[i-1] = R^i`.
pub fn series_residuals(memory: &SpectralField, t: f64, kernels: &[SpectralField]) -> Vec<f64> {
    let mut acc = memory.clone();
    let mut out = vec![acc.l2_norm()];
    let mut fact = 1.0;
    for (j, r) in kernels.iter().enumerate() {
        let i = j + 1;
        fact *= i as f64;
        let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
        let w = sign * t.powi(i as i32) / fact;
        acc.add_scaled(C64::new(-w, 0.0), &r.resized(memory.k_max()));
        out.push(acc.l2_norm());
    }
    out
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
