//! Numerical validation of the convergence analysis: the cubic bound on
//! the initial weight error, persistency of excitation of the filtered
//! increments, noise-free exponential decay of the weight error, the
//! noise-ball growth with exploration intensity, and the two-timescale
//! ratio.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::model::{hml_step, Environment, ModelParams, ModelState};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("window of {window_samples} samples exceeds trajectory length {len}")]
    WindowTooLong { window_samples: usize, len: usize },
}

/// Cubic from the boundary-layer stability bound:
/// g(t) = t^3 - t^2 (2c + 1) + t (c^2 + 2c + mu) - c^2.
pub fn stability_cubic(theta: f64, c_norm: f64, mu: f64) -> f64 {
    theta * theta * theta - theta * theta * (2.0 * c_norm + 1.0)
        + theta * (c_norm * c_norm + 2.0 * c_norm + mu)
        - c_norm * c_norm
}

/// All real roots of the monic cubic t^3 + p t^2 + q t + r, ascending.
fn cubic_real_roots(p: f64, q: f64, r: f64) -> Vec<f64> {
    // Depressed form: t = s - p/3, s^3 + a s + b = 0.
    let shift = p / 3.0;
    let a = q - p * p / 3.0;
    let b = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let disc = -4.0 * a * a * a - 27.0 * b * b;
    let mut roots = if disc > 0.0 {
        // Three distinct real roots (trigonometric form).
        let m = 2.0 * (-a / 3.0).sqrt();
        let arg = (3.0 * b / (a * m)).clamp(-1.0, 1.0);
        let phi = arg.acos();
        (0..3)
            .map(|k| m * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() - shift)
            .collect::<Vec<f64>>()
    } else {
        // One real root (Cardano), possibly a double root at disc == 0.
        let half_b = b / 2.0;
        let inner = half_b * half_b + a * a * a / 27.0;
        let s = if inner >= 0.0 {
            let sq = inner.sqrt();
            (-half_b + sq).cbrt() + (-half_b - sq).cbrt()
        } else {
            // Numerically disc ~ 0; fall back to the trig form.
            let m = 2.0 * (-a / 3.0).max(0.0).sqrt();
            let arg = if a == 0.0 { 1.0 } else { (3.0 * b / (a * m)).clamp(-1.0, 1.0) };
            m * (arg.acos() / 3.0).cos()
        };
        vec![s - shift]
    };
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Polish with a couple of Newton steps.
    for root in roots.iter_mut() {
        for _ in 0..3 {
            let g = *root * *root * *root + p * *root * *root + q * *root + r;
            let dg = 3.0 * *root * *root + 2.0 * p * *root + q;
            if dg.abs() > 1e-12 {
                *root -= g / dg;
            }
        }
    }
    roots
}

/// Largest theta >= 0 whose left neighborhood satisfies the strict cubic
/// inequality g(theta) < 0: the supremum of the closure of the negative
/// region. Zero when the mapping norm is zero.
pub fn theta_c(c_norm: f64, mu: f64) -> f64 {
    assert!(c_norm >= 0.0 && mu > 0.0, "theta_c: need c_norm >= 0, mu > 0");
    if c_norm == 0.0 {
        return 0.0;
    }
    let p = -(2.0 * c_norm + 1.0);
    let q = c_norm * c_norm + 2.0 * c_norm + mu;
    let r = -c_norm * c_norm;
    let roots = cubic_real_roots(p, q, r);
    // g(0) = -c^2 < 0 and g -> +inf, so a positive root exists. The
    // supremum is the largest root approached from a negative region.
    for &root in roots.iter().rev() {
        if root > 0.0 && stability_cubic(root - 1e-9, c_norm, mu) < 0.0 {
            return root;
        }
    }
    0.0
}

/// Minimum windowed-Gramian eigenvalue of a filtered-increment trajectory:
/// min over sliding windows of lambda_min( (1/T_w) sum dq dq^T dt ).
pub fn pe_check(delta_q: &[Vec<f64>], dt: f64, window_secs: f64) -> Result<f64, TheoryError> {
    assert!(dt > 0.0 && window_secs > 0.0);
    let window_samples = (window_secs / dt).round().max(1.0) as usize;
    if window_samples > delta_q.len() {
        return Err(TheoryError::WindowTooLong { window_samples, len: delta_q.len() });
    }
    let m = delta_q[0].len();
    let stride = (window_samples / 4).max(1);
    let mut level = f64::INFINITY;
    let mut start = 0;
    loop {
        let mut gram = Mat::zeros(m, m);
        for dq in &delta_q[start..start + window_samples] {
            gram.add_outer(1.0 / window_samples as f64, dq, dq);
        }
        let eig = linalg::sym_eigen(&gram);
        let min = eig.values.last().copied().unwrap_or(0.0).max(0.0);
        level = level.min(min);
        if start + window_samples == delta_q.len() {
            break;
        }
        start = (start + stride).min(delta_q.len() - window_samples);
    }
    Ok(level)
}

/// Settings for the free-running convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSpec {
    /// Length of the noise-free decay run (s).
    pub duration: f64,
    /// Fixed target held for the whole run.
    pub target: [f64; 2],
    /// Cursor start position.
    pub start: [f64; 2],
    /// Initial weight-error norm per row, as a fraction of the row bound
    /// min(mu, theta_c).
    pub w_tilde_frac: f64,
    /// Window for the excitation Gramian (s).
    pub pe_window: f64,
    /// Exploration intensities for the noise-ball runs.
    pub noise_sigma_grid: Vec<f64>,
    /// Length of each noise-ball run (s).
    pub noise_duration: f64,
    pub seed: u64,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            duration: 300.0,
            target: [4.5, 4.5],
            start: [2.5, 2.5],
            w_tilde_frac: 0.8,
            pe_window: 5.0,
            noise_sigma_grid: vec![0.2, 0.8764, 2.0],
            noise_duration: 120.0,
            seed: 0,
        }
    }
}

/// Results of the convergence checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Fitted exponential decay rate of ||W - What|| (1/s).
    pub rate: f64,
    /// Goodness of the log-linear fit over the final 80% of the run.
    pub r_squared: f64,
    /// Minimum windowed-Gramian eigenvalue of the filtered increments.
    pub pe_level: f64,
    /// Cubic bound of the binding (smallest-bound) cursor axis.
    pub theta_c: f64,
    pub binding_row: usize,
    /// Timescale ratio gamma^2 / (eta k_p) and its factors.
    pub epsilon: f64,
    pub eps_u: f64,
    pub eps_e: f64,
    /// Long-run RMS state radius at the middle of the noise grid.
    pub residual_radius: f64,
    /// (sigma_u, RMS radius) per grid point.
    pub noise_radii: Vec<(f64, f64)>,
    /// Radius strictly increases along the grid.
    pub monotone_noise: bool,
    /// ||W - What|| never grew from one step to the next (sigma_u = 0).
    pub w_tilde_nonincreasing: bool,
    /// Initial weight error violated the row-wise bound min(mu, theta_c).
    pub bound_violated: bool,
}

/// Smallest eigenvalue of the boundary-layer Lyapunov matrix
///
/// ```text
/// P = [ eps_u I                  -eps_u Cbar^-1 chat^T          ]
///     [ -eps_u chat Cbar^-1       2 eps_e + eps_u chat Cbar^-2 chat^T ]
/// ```
///
/// for one cursor axis with mapping estimate row `chat` (length m) and
/// Cbar = chat^T chat + mu I. The convergence argument asserts P > 0;
/// this evaluates it numerically at a given estimate.
pub fn lyapunov_p_min_eig(chat: &[f64], mu: f64, eps_u: f64, eps_e: f64) -> f64 {
    let m = chat.len();
    // Cbar^-1 = (I - chat chat^T / (mu + ||chat||^2)) / mu  (Sherman-Morrison).
    let norm_sq = linalg::dot(chat, chat);
    let denom = mu + norm_sq;
    let cbar_inv = |v: &[f64]| -> Vec<f64> {
        let coef = linalg::dot(chat, v) / denom;
        v.iter().zip(chat).map(|(vi, ci)| (vi - coef * ci) / mu).collect()
    };
    let w = cbar_inv(chat); // Cbar^-1 chat^T
    let w2 = cbar_inv(&w); // Cbar^-2 chat^T

    let mut p = Mat::zeros(m + 1, m + 1);
    for i in 0..m {
        p[(i, i)] = eps_u;
        p[(i, m)] = -eps_u * w[i];
        p[(m, i)] = -eps_u * w[i];
    }
    p[(m, m)] = 2.0 * eps_e + eps_u * linalg::dot(chat, &w2);
    linalg::sym_eigen(&p).values.last().copied().unwrap_or(f64::NAN)
}

/// Timescale ratios from the singular perturbation decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimescaleRatio {
    /// gamma^2 / (eta k_p).
    pub epsilon: f64,
    /// gamma / eta.
    pub eps_u: f64,
    /// gamma / k_p.
    pub eps_e: f64,
}

pub fn timescale_ratio(params: &ModelParams) -> TimescaleRatio {
    TimescaleRatio {
        epsilon: params.gamma * params.gamma / (params.eta * params.k_p),
        eps_u: params.gamma / params.eta,
        eps_e: params.gamma / params.k_p,
    }
}

/// Build the initial state with a controlled weight error: each row of
/// What - W is a random direction scaled to `w_tilde_frac` of that row's
/// bound min(mu, theta_c(||C_row||, mu)).
fn initial_state_with_bounded_error(
    env: &Environment,
    params: &ModelParams,
    spec: &ConvergenceSpec,
) -> (ModelState, usize, f64, bool) {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x717));
    let n = env.cursor_dim();
    let h = env.synergy_count();

    let mut w_hat = env.w_true().clone();
    let mut binding_row = 0;
    let mut binding_bound = f64::INFINITY;
    let mut violated = false;
    for i in 0..n {
        let row_norm = linalg::norm2(env.c().row(i));
        let bound = params.mu.min(theta_c(row_norm, params.mu));
        if bound < binding_bound {
            binding_bound = bound;
            binding_row = i;
        }
        let mut dir: Vec<f64> = (0..h).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = linalg::norm2(&dir);
        let scale = spec.w_tilde_frac * bound / norm;
        dir.iter_mut().for_each(|x| *x *= scale);
        if spec.w_tilde_frac >= 1.0 {
            violated = true;
        }
        for k in 0..h {
            w_hat[(i, k)] += dir[k];
        }
    }

    let state = ModelState {
        delta_q: vec![0.0; env.joint_count()],
        w_hat,
        e_x: vec![spec.target[0] - spec.start[0], spec.target[1] - spec.start[1]],
        u: vec![0.0; env.joint_count()],
        x: spec.start.to_vec(),
    };
    (state, binding_row, binding_bound, violated)
}

/// Long-run RMS state radius sqrt(||W - What||_F^2 + ||u||^2 + ||e_x||^2)
/// over the final half of a free-running noisy simulation.
pub fn noise_radius(
    env: &Environment,
    params: &ModelParams,
    spec: &ConvergenceSpec,
    sigma_u: f64,
    seed: u64,
) -> f64 {
    let mut p = params.clone();
    p.sigma_u = sigma_u;
    let (mut state, _, _, _) = initial_state_with_bounded_error(env, &p, spec);
    let mut rng = rng_from_seed(seed);
    let steps = (spec.noise_duration / p.dt).round() as usize;
    let tail_from = steps / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for k in 0..steps {
        hml_step(&mut state, env, &p, &mut rng).expect("bounded-error run stays finite");
        if k >= tail_from {
            let w_err = state.w_hat.sub(env.w_true()).frobenius_norm();
            let r2 = w_err * w_err
                + linalg::dot(&state.u, &state.u)
                + linalg::dot(&state.e_x, &state.e_x);
            acc += r2;
            count += 1;
        }
    }
    (acc / count as f64).sqrt()
}

/// Free-running convergence check: noise-free weight-error decay with its
/// log-linear fit, excitation level, cubic bound, timescale ratios, and
/// the noise-ball radii across the sigma grid.
pub fn convergence_test(
    env: &Environment,
    params: &ModelParams,
    spec: &ConvergenceSpec,
) -> ConvergenceReport {
    let mut p = params.clone();
    p.sigma_u = 0.0;
    let (mut state, binding_row, binding_bound, bound_violated) =
        initial_state_with_bounded_error(env, &p, spec);

    let mut rng = rng_from_seed(spec.seed);
    let steps = (spec.duration / p.dt).round() as usize;
    let mut w_err = Vec::with_capacity(steps);
    let mut dq_trace: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut nonincreasing = true;
    let mut prev = state.w_hat.sub(env.w_true()).frobenius_norm();
    for _ in 0..steps {
        hml_step(&mut state, env, &p, &mut rng).expect("noise-free run stays finite");
        let err = state.w_hat.sub(env.w_true()).frobenius_norm();
        if err > prev + 1e-15 {
            nonincreasing = false;
        }
        prev = err;
        w_err.push(err);
        dq_trace.push(state.delta_q.clone());
    }

    // Log-linear fit over the final 80%.
    let fit_from = steps / 5;
    let pts: Vec<(f64, f64)> = w_err
        .iter()
        .enumerate()
        .skip(fit_from)
        .filter(|(_, &e)| e > 0.0)
        .map(|(k, &e)| (k as f64 * p.dt, e.ln()))
        .collect();
    let (slope, r_squared) = linear_fit(&pts);

    let pe_level = pe_check(&dq_trace, p.dt, spec.pe_window).unwrap_or(0.0);
    let ts = timescale_ratio(params);

    let mut noise_radii = Vec::new();
    for (i, &sigma) in spec.noise_sigma_grid.iter().enumerate() {
        let radius = noise_radius(env, params, spec, sigma, derive_seed(spec.seed, 1000 + i as u64));
        noise_radii.push((sigma, radius));
    }
    let monotone_noise = noise_radii.windows(2).all(|w| w[1].1 > w[0].1);
    let residual_radius = noise_radii
        .get(noise_radii.len() / 2)
        .map(|&(_, r)| r)
        .unwrap_or(f64::NAN);

    ConvergenceReport {
        rate: -slope,
        r_squared,
        pe_level,
        theta_c: binding_bound,
        binding_row,
        epsilon: ts.epsilon,
        eps_u: ts.eps_u,
        eps_e: ts.eps_e,
        residual_radius,
        noise_radii,
        monotone_noise,
        w_tilde_nonincreasing: nonincreasing,
        bound_violated,
    }
}

/// Least-squares line fit returning (slope, r^2).
fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (0.0, 1.0);
    }
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in pts {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return (0.0, 1.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{calibrated_env, default_env};
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Exhaustive grid-scan oracle for the cubic bound.
    pub(crate) fn theta_c_grid_scan(c_norm: f64, mu: f64, step: f64, hi: f64) -> f64 {
        let mut best = 0.0;
        let mut theta = 0.0;
        while theta <= hi {
            if stability_cubic(theta, c_norm, mu) < 0.0 {
                best = theta;
            }
            theta += step;
        }
        best
    }

    #[test]
    fn cubic_is_negative_at_zero_for_positive_mapping() {
        for &(c, mu) in &[(0.5, 0.3), (1.0, 2.4581), (4.0, 0.1)] {
            assert!(stability_cubic(0.0, c, mu) < 0.0);
        }
        assert_eq!(theta_c(0.0, 1.0), 0.0);
    }

    #[test]
    fn theta_c_matches_grid_scan_at_reference_point() {
        let c = 1.0;
        let mu = 2.4581;
        let fine = theta_c_grid_scan(c, mu, 1e-6, 10.0);
        let root = theta_c(c, mu);
        assert!(
            (root - fine).abs() < 2e-6,
            "root {root} vs grid {fine}"
        );
    }

    #[test]
    fn theta_c_straddles_the_inequality_boundary() {
        let mut rng = rng_from_seed(21);
        for _ in 0..1000 {
            let c = rng.gen_range(1e-3..5.0);
            let mu = rng.gen_range(1e-3..5.0);
            let t = theta_c(c, mu);
            assert!(t >= 0.0);
            if t > 1e-9 {
                assert!(
                    stability_cubic(t - 1e-9, c, mu) < 0.0,
                    "not negative just below theta_c at ({c}, {mu})"
                );
                assert!(
                    stability_cubic(t + 1e-9, c, mu) >= -1e-12,
                    "still negative just above theta_c at ({c}, {mu})"
                );
            }
        }
    }

    #[test]
    fn pe_level_of_degenerate_trajectories_is_zero() {
        let zeros = vec![vec![0.0; 4]; 200];
        assert_eq!(pe_check(&zeros, 0.01, 1.0).unwrap(), 0.0);

        // Samples confined to a line span a rank-one Gramian.
        let line: Vec<Vec<f64>> = (0..200)
            .map(|k| {
                let s = (k as f64 * 0.1).sin();
                vec![s, 2.0 * s, -s, 0.5 * s]
            })
            .collect();
        let level = pe_check(&line, 0.01, 1.0).unwrap();
        assert!(level.abs() < 1e-12);

        assert_eq!(
            pe_check(&line, 0.01, 10.0).unwrap_err(),
            TheoryError::WindowTooLong { window_samples: 1000, len: 200 }
        );
    }

    #[test]
    fn filtered_white_noise_is_persistently_exciting() {
        // dq driven by the perception filter under white noise alone.
        let env = calibrated_env(5, 6, 3);
        let mut params = ModelParams::subject(1);
        params.sigma_q = 0.137;
        params.gamma = 0.0;
        let mut state = ModelState {
            delta_q: vec![0.0; 6],
            w_hat: env.w_true().clone(),
            e_x: vec![0.0, 0.0],
            u: vec![0.0; 6],
            x: vec![2.5, 2.5],
        };
        let mut rng = rng_from_seed(4);
        let mut trace = Vec::new();
        for _ in 0..6000 {
            hml_step(&mut state, &env, &params, &mut rng).unwrap();
            trace.push(state.delta_q.clone());
        }
        let level = pe_check(&trace, params.dt, 20.0).unwrap();
        assert!(level > 0.0, "white-noise-driven increments must excite, got {level}");
    }

    #[test]
    fn pe_level_invariant_under_joint_frame_rotation() {
        let mut rng = rng_from_seed(6);
        let m = 5;
        let rot = crate::synthetic::random_orthonormal_rows(m, m, &mut rng);
        let trace: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..m).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let rotated: Vec<Vec<f64>> = trace.iter().map(|dq| rot.matvec(dq)).collect();
        let a = pe_check(&trace, 0.01, 1.0).unwrap();
        let b = pe_check(&rotated, 0.01, 1.0).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-8);
    }

    #[test]
    fn frozen_forward_model_has_zero_rate() {
        let env = default_env(3);
        let mut params = ModelParams::subject(1);
        params.gamma = 0.0;
        let spec = ConvergenceSpec {
            duration: 5.0,
            noise_sigma_grid: vec![],
            ..ConvergenceSpec::default()
        };
        let report = convergence_test(&env, &params, &spec);
        assert!(report.rate.abs() < 1e-12);
        assert!(report.w_tilde_nonincreasing);
    }

    #[test]
    fn timescale_ratio_reference_values() {
        let s1 = timescale_ratio(&ModelParams::subject(1));
        // 0.0664^2 / (3.1742 * 1.3098)
        assert_relative_eq!(s1.epsilon, 1.0605e-3, max_relative = 1e-3);

        let mut unit = ModelParams::subject(1);
        unit.gamma = 1.0;
        unit.eta = 1.0;
        unit.k_p = 1.0;
        assert_relative_eq!(timescale_ratio(&unit).epsilon, 1.0, epsilon = 1e-15);

        for subject in 1..=6 {
            let ts = timescale_ratio(&ModelParams::subject(subject));
            assert!(ts.epsilon < 0.05, "subject {subject}: epsilon {}", ts.epsilon);
            assert!(ts.eps_u < 1.0, "forward learning must be the slow process");
        }
    }

    #[test]
    fn lyapunov_matrix_is_positive_definite_at_sampled_estimates() {
        // Sampled mapping estimates across magnitudes and directions: the
        // boundary-layer Lyapunov matrix must stay positive definite
        // (its Schur complement is 2 eps_e, so any nonpositive eigenvalue
        // would be a counterexample worth flagging).
        let mut rng = rng_from_seed(33);
        let ts = timescale_ratio(&ModelParams::subject(1));
        for _ in 0..200 {
            let m = 7;
            let scale: f64 = rng.gen_range(0.01..4.0);
            let chat: Vec<f64> = (0..m)
                .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let mu = rng.gen_range(0.1..5.0);
            let min_eig = lyapunov_p_min_eig(&chat, mu, ts.eps_u, ts.eps_e);
            assert!(
                min_eig > 0.0,
                "counterexample: lambda_min(P) = {min_eig} at mu {mu}, ||chat|| {}",
                linalg::norm2(&chat)
            );
        }
    }

    #[test]
    fn noise_free_decay_is_monotone_and_log_linear() {
        let env = default_env(3);
        let params = ModelParams::subject(1);
        let spec = ConvergenceSpec {
            duration: 60.0,
            noise_sigma_grid: vec![],
            seed: 11,
            ..ConvergenceSpec::default()
        };
        let report = convergence_test(&env, &params, &spec);
        assert!(report.w_tilde_nonincreasing);
        assert!(report.rate > 0.0);
        assert!(report.r_squared > 0.9, "r^2 {}", report.r_squared);
        assert!(report.pe_level > 0.0);
        assert!(!report.bound_violated);
        assert!(report.theta_c > 0.0);
    }
}
