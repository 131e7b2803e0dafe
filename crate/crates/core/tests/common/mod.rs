//! Property checks shared by the property suite and the acceptance target.

#![allow(dead_code)]

use std::path::PathBuf;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use sdcert::bounds::{
    btau_single, emulation_bound_single, emulation_bound_two, htau_two, single_stationarity, two_stationarity,
    EmulationConstants, TwoFunctionConstants,
};
use sdcert::models::{parse_model, Model, SamplingSchedule};
use sdcert::numerics::{pencil_max_eig, sym_eig, Mat, SymMatrix};
use sdcert::sim::{run_ensemble, SimConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load_fixture_model(name: &str) -> Model {
    parse_model(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn runner(cases: u32, seed: u8) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[seed; 32]),
    )
}

fn positive() -> impl Strategy<Value = f64> {
    (-2.0f64..2.0).prop_map(|e| 10f64.powf(e))
}

fn two_constants() -> impl Strategy<Value = TwoFunctionConstants> {
    (positive(), positive(), positive(), positive()).prop_map(|(alpha_bar, alpha_b, gamma1, gamma2)| {
        TwoFunctionConstants {
            alpha_bar,
            alpha_b,
            gamma1,
            gamma2,
        }
    })
}

fn single_constants() -> impl Strategy<Value = EmulationConstants> {
    (positive(), positive(), positive()).prop_map(|(alpha_bar, alpha_b, alpha_f)| EmulationConstants {
        alpha_bar,
        alpha_b,
        alpha_f,
    })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

/// Maximality, bracket and monotonicity of the closed-form bounds.
pub fn bounds_properties(cases: u32) -> Result<(), String> {
    let mut r = runner(cases, 1);
    r.run(&(two_constants(), 1e-6f64..0.999), |(c, q)| {
        let best = emulation_bound_two(&c).unwrap();
        // bracket: the stationary point sits in (0, e⁻¹) with a sign change
        check(best.q_star > 0.0 && best.q_star < (-1.0f64).exp(), || format!("{best:?}"))?;
        check(two_stationarity(best.q_star * 0.9, &c) < 0.0, || "no sign change below".into())?;
        check(two_stationarity(best.q_star * 1.1, &c) > 0.0, || "no sign change above".into())?;
        // maximality over q
        let other = htau_two(q, &c).unwrap();
        check(other <= best.tau_max * (1.0 + 1e-9), || format!("τ̂({q}) = {other} > {}", best.tau_max))?;
        // monotonicity: larger α_b, γ₁, γ₂ shrink the bound, larger ᾱ grows it
        for worse in [
            TwoFunctionConstants { alpha_b: c.alpha_b * 1.5, ..c },
            TwoFunctionConstants { gamma1: c.gamma1 * 1.5, ..c },
            TwoFunctionConstants { gamma2: c.gamma2 * 1.5, ..c },
        ] {
            let t = emulation_bound_two(&worse).unwrap().tau_max;
            check(t < best.tau_max, || format!("{worse:?} gave {t} ≥ {}", best.tau_max))?;
        }
        let better = emulation_bound_two(&TwoFunctionConstants { alpha_bar: c.alpha_bar * 1.5, ..c }).unwrap();
        check(better.tau_max > best.tau_max, || "not increasing in ᾱ".into())
    })
    .map_err(|e| format!("two-function bound: {e}"))?;

    let mut r = runner(cases, 2);
    r.run(&(single_constants(), 1e-6f64..0.999, positive(), positive()), |(c, q, b1, b2)| {
        let best = emulation_bound_single(&c).unwrap();
        let lo = single_stationarity(best.q_star * 0.9, &c);
        let hi = single_stationarity(best.q_star * 1.1, &c);
        check(best.q_star < (-1.0f64).exp() && lo * hi < 0.0, || format!("{best:?}"))?;
        let other = btau_single(q, b1, b2, &c);
        check(other <= best.tau_max * (1.0 + 1e-9), || format!("τ̄({q},{b1},{b2}) = {other} > {}", best.tau_max))?;
        for worse in [
            EmulationConstants { alpha_b: c.alpha_b * 1.5, ..c },
            EmulationConstants { alpha_f: c.alpha_f * 1.5, ..c },
        ] {
            let t = emulation_bound_single(&worse).unwrap().tau_max;
            check(t < best.tau_max, || format!("{worse:?} gave {t} ≥ {}", best.tau_max))?;
        }
        Ok(())
    })
    .map_err(|e| format!("single-function bound: {e}"))
}

fn sym_strategy(n: usize) -> impl Strategy<Value = SymMatrix> {
    proptest::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| SymMatrix::symmetrize(Mat::from_vec(n, n, v)))
}

fn spd_strategy(n: usize) -> impl Strategy<Value = SymMatrix> {
    proptest::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| {
        let l = Mat::from_vec(n, n, v);
        SymMatrix::symmetrize(&l * l.transpose() + Mat::identity(n, n) * 0.5)
    })
}

fn invertible(n: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-1.0f64..1.0, n * n)
        .prop_map(move |v| Mat::from_vec(n, n, v) + Mat::identity(n, n) * 3.0)
}

/// Eigen-decomposition reconstruction and congruence invariance.
pub fn numerics_properties(cases: u32) -> Result<(), String> {
    let mut r = runner(cases, 3);
    r.run(&(1usize..7).prop_flat_map(sym_strategy), |s| {
        let e = sym_eig(&s).unwrap();
        let v = &e.eigenvectors;
        let lam = Mat::from_diagonal(&sdcert::numerics::Vector::from_vec(e.eigenvalues.clone()));
        let back = v * lam * v.transpose();
        let scale = 1.0 + s.norm();
        check((back - s.as_mat()).amax() <= 1e-10 * scale, || "V Λ Vᵀ ≠ S".into())?;
        let ortho = v.transpose() * v - Mat::identity(s.order(), s.order());
        check(ortho.amax() <= 1e-10, || "eigenvectors not orthonormal".into())?;
        check(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]), || "eigenvalues unsorted".into())
    })
    .map_err(|e| format!("eigen reconstruction: {e}"))?;

    let mut r = runner(cases, 4);
    r.run(&(sym_strategy(3), spd_strategy(3), invertible(3)), |(a, b, t)| {
        // λ_max(A, B) is invariant under A, B → TᵀAT, TᵀBT
        let l1 = pencil_max_eig(&a, &b).unwrap();
        let l2 = pencil_max_eig(&a.congruence(&t), &b.congruence(&t)).unwrap();
        check((l1 - l2).abs() <= 1e-8 * (1.0 + l1.abs()), || format!("{l1} vs {l2}"))?;
        // Sylvester: congruence keeps the inertia
        let inertia = |s: &SymMatrix| {
            let e = sym_eig(s).unwrap();
            let tol = 1e-9 * (1.0 + s.norm());
            (
                e.eigenvalues.iter().filter(|x| **x > tol).count(),
                e.eigenvalues.iter().filter(|x| **x < -tol).count(),
            )
        };
        check(inertia(&a) == inertia(&a.congruence(&t)), || "inertia changed".into())
    })
    .map_err(|e| format!("congruence: {e}"))
}

/// Ensembles do not depend on the number of worker threads.
pub fn determinism_properties(cases: u32) -> Result<(), String> {
    let model = load_fixture_model("ex1_sub1_control_gain.json");
    let mut r = runner(cases, 5);
    r.run(&(any::<u64>(), 1usize..6, prop_oneof![Just(true), Just(false)]), |(seed, workers, random)| {
        let cfg = SimConfig {
            dt_sim: 1e-3,
            horizon: 0.3,
            n_paths: 12,
            seed,
            schedule: if random {
                SamplingSchedule::UniformRandom { lo: 0.01, hi: 0.03 }
            } else {
                SamplingSchedule::Periodic { dt: 0.0234 }
            },
            store_stride: 5,
        };
        let pool = |k| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap();
        let a = pool(1).install(|| run_ensemble(&model, &cfg).unwrap());
        let b = pool(workers).install(|| run_ensemble(&model, &cfg).unwrap());
        check(a == b, || format!("{workers} workers changed the ensemble"))
    })
    .map_err(|e| format!("ensemble determinism: {e}"))
}
