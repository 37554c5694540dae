//! Order of accuracy of the memory expansion along exact trajectories.

mod common;

use common::*;
use kdv_mz::rom::{exact_memory, MemoryEvaluator};
use kdv_mz::solver::{taylor_samples, TaylorSolution};
use kdv_mz::spectral::{ModePartition, SpectralField};
use kdv_mz::symbolic::memory_term;
use kdv_mz::C64;

const TIMES: [f64; 5] = [0.002, 0.004, 0.008, 0.016, 0.032];

/// Residual norms for truncation orders 0..=4 along the truncated `M = 2N`
/// system started from a random resolved field.
fn random_ic_residuals(n: usize, seed: u64, flip_fourth: bool) -> Vec<Vec<f64>> {
    let p = ModePartition::rom(n).unwrap();
    let eps = 0.1;
    let u0 = random_resolved(n, n - 1, seed).scaled(C64::new(0.3, 0.0));
    let exact = TaylorSolution::new(&u0, eps, 2 * n - 1, 60);
    let mut ev = MemoryEvaluator::new(p, eps);
    TIMES
        .iter()
        .map(|&t| {
            let u = exact.state(t);
            let mut kernels = ev.all_terms(&u.resized(n - 1), 4);
            kernels.remove(0);
            if flip_fourth {
                kernels[3].scale(C64::new(-1.0, 0.0));
            }
            series_residuals(&exact_memory(&u, &p), t, &kernels)
        })
        .collect()
}

fn slopes(res: &[Vec<f64>]) -> Vec<f64> {
    (0..res[0].len())
        .map(|order| {
            let y: Vec<f64> = res.iter().map(|r| r[order]).collect();
            loglog_slope(&TIMES, &y)
        })
        .collect()
}

#[test]
fn each_order_gains_one_power_of_t() {
    for seed in [2, 5, 8] {
        let s = slopes(&random_ic_residuals(4, seed, false));
        for (order, slope) in s.iter().enumerate() {
            let expect = order as f64 + 1.0;
            assert!(
                (slope - expect).abs() < 0.15,
                "seed {seed} order {order}: {slope}"
            );
        }
    }
}

#[test]
fn reversed_fourth_order_sign_loses_accuracy() {
    let s = slopes(&random_ic_residuals(4, 2, true));
    assert!((s[4] - 4.0).abs() < 0.15, "slope {}", s[4]);
}

#[test]
fn sine_residual_slopes() {
    let n = 20;
    let p = ModePartition::rom(n).unwrap();
    let eps = 0.1;
    let ts: Vec<f64> = (0..=8).map(|j| 1e-3 * 10f64.powf(j as f64 / 4.0)).collect();
    let states = taylor_samples(&SpectralField::sine(1), eps, 50, 56, &ts).unwrap();
    let exprs: Vec<_> = (1..=2).map(|i| memory_term(i).unwrap()).collect();
    let res: Vec<Vec<f64>> = ts
        .iter()
        .zip(&states)
        .map(|(&t, u)| {
            let uh = u.resized(n - 1);
            let kernels: Vec<_> = exprs
                .iter()
                .map(|e| e.evaluate(&uh, eps, &p).unwrap())
                .collect();
            series_residuals(&exact_memory(u, &p), t, &kernels)
        })
        .collect();
    for order in 1..=2 {
        let y: Vec<f64> = res.iter().map(|r| r[order]).collect();
        let s = loglog_slope(&ts, &y);
        assert!(s >= order as f64 + 0.5, "order {order}: {s}");
    }
}

#[test]
fn taylor_samples_agree_with_stepper() {
    let u0 = random_resolved(6, 11, 4).scaled(C64::new(0.3, 0.0));
    let ts = [0.01, 0.05, 0.2];
    let samples = taylor_samples(&u0, 0.1, 11, 30, &ts).unwrap();
    let cfg = kdv_mz::solver::FullModelConfig {
        epsilon: 0.1,
        m: 12,
        dt: 1e-4,
        t_end: 0.2,
    };
    let traj = kdv_mz::solver::integrate(&u0, &cfg, 1).unwrap();
    for (t, s) in ts.iter().zip(&samples) {
        let i = traj.nearest(*t).unwrap();
        assert!(rel_diff(&traj.states[i], s) < 1e-10, "t {t}");
    }
    assert!(taylor_samples(&u0, 0.1, 11, 30, &[0.2, 0.1]).is_err());
}
