//! The `verify` suites: numerical checks of the convergence theory with a
//! pass/fail line per invariant and a full convergence report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use hml_core::model::{Environment, ModelParams};
use hml_core::rng::rng_from_seed;
use hml_core::theory::{
    convergence_test, lyapunov_p_min_eig, pe_check, stability_cubic, theta_c, timescale_ratio,
    ConvergenceReport, ConvergenceSpec,
};

#[derive(Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceReport>,
}

pub fn run_suites(suite: &str, env: &Environment, seed: u64) -> Result<VerifyReport, String> {
    let mut checks = Vec::new();
    let mut convergence = None;
    let run_all = suite == "all";
    let mut matched = run_all;

    if run_all || suite == "theta_c" {
        matched = true;
        checks.extend(theta_c_suite(seed));
    }
    if run_all || suite == "pe" {
        matched = true;
        checks.extend(pe_suite(env, seed));
    }
    if run_all || suite == "convergence" {
        matched = true;
        let (mut cs, report) = convergence_suite(env, seed);
        checks.append(&mut cs);
        convergence = Some(report);
    }
    if run_all || suite == "timescale" {
        matched = true;
        checks.extend(timescale_suite());
    }
    if !matched {
        return Err(format!(
            "unknown suite {suite:?}; expected all, theta_c, pe, convergence, or timescale"
        ));
    }
    Ok(VerifyReport { suite: suite.to_string(), checks, convergence })
}

/// Root-finder against a coarse/fine bracketing scan, plus the strictness
/// property on both sides of the bound.
fn theta_c_suite(seed: u64) -> Vec<Check> {
    let mut rng = rng_from_seed(seed ^ 0x7C);
    let mut worst_gap = 0.0f64;
    let mut strict_ok = true;
    for _ in 0..200 {
        let c = rng.gen_range(1e-3..5.0);
        let mu = rng.gen_range(1e-3..5.0);
        let root = theta_c(c, mu);
        let scan = grid_scan_theta(c, mu, 1e-6, 10.0);
        worst_gap = worst_gap.max((root - scan).abs());
        if root > 1e-9 {
            strict_ok &= stability_cubic(root - 1e-9, c, mu) < 0.0;
            strict_ok &= stability_cubic(root + 1e-9, c, mu) >= -1e-12;
        }
    }
    vec![
        Check {
            name: "theta_c root-finder matches 1e-6 grid scan".into(),
            pass: worst_gap < 2e-6,
            detail: format!("worst gap {worst_gap:.2e} over 200 random (||C||, mu) pairs"),
        },
        Check {
            name: "cubic inequality strict below theta_c, violated above".into(),
            pass: strict_ok,
            detail: "checked at theta_c -/+ 1e-9".into(),
        },
    ]
}

/// Largest grid point with a strictly negative cubic, scanning downward.
pub fn grid_scan_theta(c: f64, mu: f64, step: f64, hi: f64) -> f64 {
    let n = (hi / step).round() as u64;
    for k in (0..=n).rev() {
        let theta = k as f64 * step;
        if stability_cubic(theta, c, mu) < 0.0 {
            return theta;
        }
    }
    0.0
}

fn pe_suite(env: &Environment, seed: u64) -> Vec<Check> {
    use hml_core::model::{hml_step, ModelState};

    // Filtered white noise at the fitted perceptual intensity.
    let mut params = ModelParams::subject(1);
    params.sigma_u = 0.0;
    let mut state = ModelState {
        delta_q: vec![0.0; env.joint_count()],
        w_hat: env.w_true().clone(),
        e_x: vec![0.0; env.cursor_dim()],
        u: vec![0.0; env.joint_count()],
        x: vec![2.5, 2.5],
    };
    let mut rng = rng_from_seed(seed ^ 0x9E);
    let mut trace = Vec::new();
    for _ in 0..12_000 {
        if hml_step(&mut state, env, &params, &mut rng).is_err() {
            break;
        }
        trace.push(state.delta_q.clone());
    }
    let level = pe_check(&trace, params.dt, 30.0).unwrap_or(0.0);

    // Rank-deficient counterexample: increments confined to one line.
    let line: Vec<Vec<f64>> = (0..2000)
        .map(|k| {
            let s = (k as f64 * 0.07).sin();
            (0..env.joint_count()).map(|j| s * (j as f64 + 1.0)).collect()
        })
        .collect();
    let line_level = pe_check(&line, params.dt, 5.0).unwrap_or(f64::NAN);

    vec![
        Check {
            name: "white perceptual noise excites all joint directions".into(),
            pass: level > 0.0,
            detail: format!("min windowed-Gramian eigenvalue {level:.3e}"),
        },
        Check {
            name: "line-confined increments have zero excitation".into(),
            pass: line_level.abs() < 1e-12,
            detail: format!("rank-one Gramian eigenvalue {line_level:.3e}"),
        },
    ]
}

fn convergence_suite(env: &Environment, seed: u64) -> (Vec<Check>, ConvergenceReport) {
    let params = ModelParams::subject(1);
    let spec = ConvergenceSpec { seed, ..ConvergenceSpec::default() };
    let report = convergence_test(env, &params, &spec);

    // Lyapunov matrix positivity at mapping estimates sampled around the
    // true rows, inside and near the bound region.
    let ts = timescale_ratio(&params);
    let mut rng = rng_from_seed(seed ^ 0x1AB);
    let mut min_eig = f64::INFINITY;
    for _ in 0..100 {
        let row = env.w_true().row(rng.gen_range(0..env.cursor_dim()));
        let perturbed: Vec<f64> = row
            .iter()
            .map(|w| w + rng.gen_range(-0.5..0.5))
            .collect();
        // Per-axis mapping estimate row: What_i Phi.
        let chat: Vec<f64> = (0..env.joint_count())
            .map(|j| {
                (0..env.synergy_count()).map(|k| perturbed[k] * env.phi()[(k, j)]).sum::<f64>()
            })
            .collect();
        min_eig = min_eig.min(lyapunov_p_min_eig(&chat, params.mu, ts.eps_u, ts.eps_e));
    }

    let checks = vec![
        Check {
            name: "Lyapunov matrix positive definite at sampled estimates".into(),
            pass: min_eig > 0.0,
            detail: format!("min lambda_min(P) = {min_eig:.3e} over 100 samples"),
        },
        Check {
            name: "weight error is non-increasing without exploration noise".into(),
            pass: report.w_tilde_nonincreasing,
            detail: format!("fitted decay rate {:.3e} 1/s", report.rate),
        },
        Check {
            name: "log weight error is linear over the final 80%".into(),
            pass: report.r_squared > 0.9,
            detail: format!("r^2 = {:.4}", report.r_squared),
        },
        Check {
            name: "initial weight error inside the cubic bound".into(),
            pass: !report.bound_violated,
            detail: format!("binding row {} bound {:.4}", report.binding_row, report.theta_c),
        },
        Check {
            name: "noise ball radius grows with exploration intensity".into(),
            pass: report.monotone_noise,
            detail: format!("{:?}", report.noise_radii),
        },
    ];
    (checks, report)
}

fn timescale_suite() -> Vec<Check> {
    let mut all_small = true;
    let mut details = Vec::new();
    for subject in 1..=6 {
        let ts = timescale_ratio(&ModelParams::subject(subject));
        all_small &= ts.epsilon < 0.05;
        details.push(format!("S{subject}={:.2e}", ts.epsilon));
    }
    let s1 = timescale_ratio(&ModelParams::subject(1));
    vec![
        Check {
            name: "timescale ratio below 0.05 for all fitted subjects".into(),
            pass: all_small,
            detail: details.join(", "),
        },
        Check {
            name: "subject-1 timescale ratio near 1.06e-3".into(),
            pass: (s1.epsilon - 1.06e-3).abs() < 1e-5,
            detail: format!("epsilon = {:.6e}", s1.epsilon),
        },
    ]
}
