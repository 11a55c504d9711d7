//! The coupled motor learning dynamics, integrated by Euler-Maruyama.
//!
//! State per step (all updates computed from start-of-step values, then
//! committed together):
//!
//! ```text
//! eps     = C dq - What (Phi dq)                        estimation error
//! What   += dt * gamma * eps (Phi dq)^T                 forward learning
//! dq     += dt * (-a dq + u) + sqrt(dt) sigma_q xi_q    perception filter
//! u      += dt * eta * (-(Phi^T What^T What Phi + mu I) u
//!                        + k_p Phi^T What^T e_x)
//!           + sqrt(dt) sigma_u xi_u                     inverse learning
//! x      += dt * C u;   e_x -= dt * C u                 cursor / error
//! ```
//!
//! Noise draws are standard normal from the caller's generator, `xi_q`
//! before `xi_u`, one value per joint, every step regardless of the noise
//! intensities; trajectories are bitwise deterministic for a fixed seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::synergy::{decompose_weights, MappingMatrix, SynergyBasis, SynergyError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite state after step: {field}")]
    NonFiniteState { field: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Model parameters: the six fitted scalars, the fixed perceptual recency
/// parameter, and simulation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Forward learning rate (1/s).
    pub gamma: f64,
    /// Inverse learning rate (1/s).
    pub eta: f64,
    /// Optimality parameter weighting joint-velocity magnitude in the cost.
    pub mu: f64,
    /// Control parameter scaling error feedback (1/s).
    pub k_p: f64,
    /// Exploration noise intensity.
    pub sigma_u: f64,
    /// Perceptual noise intensity.
    pub sigma_q: f64,
    /// Perceptual recency parameter (1/s).
    pub a: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Target radius (screen units).
    pub rho_x: f64,
    /// Standard deviation of the random initial weight estimate.
    pub w0_scale: f64,
}

impl ModelParams {
    /// Simulation constants shared by every parameter set.
    pub const DEFAULT_DT: f64 = 0.01;
    pub const DEFAULT_RHO_X: f64 = 0.25;
    pub const DEFAULT_W0_SCALE: f64 = 0.1;

    /// Fitted parameter presets for the six study participants
    /// (1-based index).
    pub fn subject(index: usize) -> Self {
        let (gamma, eta, mu, k_p, sigma_u, sigma_q) = match index {
            1 => (0.0664, 3.1742, 2.4581, 1.3098, 0.8764, 0.1370),
            2 => (0.0030, 3.1448, 3.3056, 1.5965, 1.0165, 0.5451),
            3 => (0.0456, 1.5383, 3.3072, 3.2714, 1.0082, 0.0508),
            4 => (0.1398, 1.9856, 3.5735, 1.8976, 0.9556, 0.0169),
            5 => (0.0013, 2.4916, 3.5382, 1.5569, 1.9749, 0.7118),
            6 => (0.1252, 0.7131, 3.9744, 2.2515, 0.9298, 0.0064),
            _ => panic!("subject index must be 1..=6, got {index}"),
        };
        Self {
            gamma,
            eta,
            mu,
            k_p,
            sigma_u,
            sigma_q,
            a: 10.0,
            dt: Self::DEFAULT_DT,
            rho_x: Self::DEFAULT_RHO_X,
            w0_scale: Self::DEFAULT_W0_SCALE,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("eta", self.eta),
            ("mu", self.mu),
            ("k_p", self.k_p),
            ("a", self.a),
            ("dt", self.dt),
            ("rho_x", self.rho_x),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::DimensionMismatch(format!("{name} must be > 0, got {v}")));
            }
        }
        // gamma = 0 is meaningful (frozen forward learning, the
        // satisficing protocol), so it only needs to be non-negative.
        let nonneg = [
            ("gamma", self.gamma),
            ("sigma_u", self.sigma_u),
            ("sigma_q", self.sigma_q),
            ("w0_scale", self.w0_scale),
        ];
        for (name, v) in nonneg {
            if v < 0.0 || !v.is_finite() {
                return Err(ModelError::DimensionMismatch(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::subject(1)
    }
}

/// Ground-truth task environment: the mapping C, the synergy basis Phi,
/// and the projected weights W = C Phi^T.
#[derive(Debug, Clone)]
pub struct Environment {
    c: MappingMatrix,
    phi: SynergyBasis,
    w_true: Mat,
    /// ||C - W Phi||_2 / ||C||_2; zero when C lies in the synergy span.
    representation_residual: f64,
}

impl Environment {
    pub fn new(c: MappingMatrix, phi: SynergyBasis) -> Result<Self, SynergyError> {
        let (w_true, representation_residual) = decompose_weights(&c, &phi)?;
        Ok(Self { c, phi, w_true, representation_residual })
    }

    pub fn c(&self) -> &Mat {
        self.c.matrix()
    }

    pub fn phi(&self) -> &Mat {
        self.phi.matrix()
    }

    pub fn w_true(&self) -> &Mat {
        &self.w_true
    }

    pub fn representation_residual(&self) -> f64 {
        self.representation_residual
    }

    pub fn cursor_dim(&self) -> usize {
        self.c.cursor_dim()
    }

    pub fn joint_count(&self) -> usize {
        self.c.joint_count()
    }

    pub fn synergy_count(&self) -> usize {
        self.phi.count()
    }
}

/// Full simulation state.
#[derive(Debug, Clone)]
pub struct ModelState {
    /// Filtered joint-angle increments (length m).
    pub delta_q: Vec<f64>,
    /// Weight estimate (n x h).
    pub w_hat: Mat,
    /// Reaching error, target minus cursor (length n).
    pub e_x: Vec<f64>,
    /// Joint velocities (length m).
    pub u: Vec<f64>,
    /// Cursor position (length n).
    pub x: Vec<f64>,
}

impl ModelState {
    /// Rest state at `start`: zero velocities and increments, weight
    /// estimate drawn i.i.d. normal with deviation `w0_scale`.
    pub fn initial(env: &Environment, params: &ModelParams, start: &[f64], rng: &mut ChaCha8Rng) -> Self {
        let n = env.cursor_dim();
        let h = env.synergy_count();
        let m = env.joint_count();
        assert_eq!(start.len(), n, "start position dimension");
        let w_hat = Mat::from_fn(n, h, |_, _| params.w0_scale * rng.sample::<f64, _>(StandardNormal));
        Self {
            delta_q: vec![0.0; m],
            w_hat,
            e_x: vec![0.0; n],
            u: vec![0.0; m],
            x: start.to_vec(),
        }
    }

    pub fn check_dims(&self, env: &Environment) -> Result<(), ModelError> {
        let (n, m, h) = (env.cursor_dim(), env.joint_count(), env.synergy_count());
        if self.delta_q.len() != m
            || self.u.len() != m
            || self.e_x.len() != n
            || self.x.len() != n
            || self.w_hat.rows() != n
            || self.w_hat.cols() != h
        {
            return Err(ModelError::DimensionMismatch(format!(
                "state dims (dq {}, u {}, e {}, x {}, w {}x{}) vs env (m {m}, n {n}, h {h})",
                self.delta_q.len(),
                self.u.len(),
                self.e_x.len(),
                self.x.len(),
                self.w_hat.rows(),
                self.w_hat.cols()
            )));
        }
        Ok(())
    }

    fn nonfinite_field(&self) -> Option<&'static str> {
        if !self.delta_q.iter().all(|v| v.is_finite()) {
            Some("delta_q")
        } else if !self.w_hat.is_finite() {
            Some("w_hat")
        } else if !self.e_x.iter().all(|v| v.is_finite()) {
            Some("e_x")
        } else if !self.u.iter().all(|v| v.is_finite()) {
            Some("u")
        } else if !self.x.iter().all(|v| v.is_finite()) {
            Some("x")
        } else {
            None
        }
    }
}

/// Estimation error eps = C dq - What Phi dq.
pub fn estimation_error(env: &Environment, state: &ModelState) -> Result<Vec<f64>, ModelError> {
    state.check_dims(env)?;
    Ok(estimation_error_unchecked(env, state))
}

fn estimation_error_unchecked(env: &Environment, state: &ModelState) -> Vec<f64> {
    let dx = env.c().matvec(&state.delta_q);
    let phi_dq = env.phi().matvec(&state.delta_q);
    let pred = state.w_hat.matvec(&phi_dq);
    linalg::sub_vec(&dx, &pred)
}

/// One explicit-Euler update of the weight estimate; returns the new
/// What without mutating the state.
pub fn forward_step(state: &ModelState, env: &Environment, params: &ModelParams) -> Mat {
    let phi_dq = env.phi().matvec(&state.delta_q);
    let eps = estimation_error_unchecked(env, state);
    let mut w = state.w_hat.clone();
    w.add_outer(params.dt * params.gamma, &eps, &phi_dq);
    w
}

/// Cost J = 1/2 ||What Phi u - k_p e_x||^2 + mu/2 ||u||^2 driving the
/// inverse learning gradient flow.
pub fn inverse_cost(e_x: &[f64], u: &[f64], w_hat: &Mat, phi: &Mat, params: &ModelParams) -> f64 {
    let phi_u = phi.matvec(u);
    let chat_u = w_hat.matvec(&phi_u);
    let mismatch: f64 = chat_u
        .iter()
        .zip(e_x)
        .map(|(c, e)| {
            let d = c - params.k_p * e;
            d * d
        })
        .sum();
    0.5 * mismatch + 0.5 * params.mu * linalg::dot(u, u)
}

/// One Euler-Maruyama update of the joint velocities; returns the new u.
pub fn inverse_step(state: &ModelState, phi: &Mat, params: &ModelParams, noise_u: &[f64]) -> Vec<f64> {
    let phi_u = phi.matvec(&state.u);
    let chat_u = state.w_hat.matvec(&phi_u);
    let wt_chat_u = state.w_hat.tr_matvec(&chat_u);
    let quad = phi.tr_matvec(&wt_chat_u); // Phi^T What^T What Phi u
    let wt_e = state.w_hat.tr_matvec(&state.e_x);
    let feedback = phi.tr_matvec(&wt_e); // Phi^T What^T e_x

    let sqrt_dt = params.dt.sqrt();
    let mut u = state.u.clone();
    for i in 0..u.len() {
        let drift = -params.eta * (quad[i] + params.mu * state.u[i] - params.k_p * feedback[i]);
        u[i] += params.dt * drift + sqrt_dt * params.sigma_u * noise_u[i];
    }
    u
}

/// One Euler-Maruyama update of the perception filter; returns the new dq.
pub fn perception_step(state: &ModelState, params: &ModelParams, noise_q: &[f64]) -> Vec<f64> {
    let sqrt_dt = params.dt.sqrt();
    state
        .delta_q
        .iter()
        .zip(&state.u)
        .zip(noise_q)
        .map(|((dq, u), xi)| dq + params.dt * (-params.a * dq + u) + sqrt_dt * params.sigma_q * xi)
        .collect()
}

/// One full step of the coupled dynamics (Jacobi update order: every
/// component is advanced from the start-of-step state).
pub fn hml_step(
    state: &mut ModelState,
    env: &Environment,
    params: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<(), ModelError> {
    let m = env.joint_count();
    let mut noise_q = vec![0.0; m];
    let mut noise_u = vec![0.0; m];
    for v in noise_q.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for v in noise_u.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    hml_step_with_noise(state, env, params, &noise_q, &noise_u)
}

/// Step with caller-supplied noise vectors (used by the integrator tests).
pub fn hml_step_with_noise(
    state: &mut ModelState,
    env: &Environment,
    params: &ModelParams,
    noise_q: &[f64],
    noise_u: &[f64],
) -> Result<(), ModelError> {
    let w_next = forward_step(state, env, params);
    let dq_next = perception_step(state, params, noise_q);
    let u_next = inverse_step(state, env.phi(), params, noise_u);
    let cu = env.c().matvec(&state.u);

    state.w_hat = w_next;
    state.delta_q = dq_next;
    state.u = u_next;
    for i in 0..state.x.len() {
        state.x[i] += params.dt * cu[i];
        state.e_x[i] -= params.dt * cu[i];
    }

    if let Some(field) = state.nonfinite_field() {
        return Err(ModelError::NonFiniteState { field });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;

    pub(crate) fn toy_env(m: usize, h: usize) -> Environment {
        // Mapping built from the first two synergy rows with scales (2, 1),
        // so C = W Phi exactly.
        assert!(h >= 2 && h <= m);
        let phi = SynergyBasis::new(Mat::from_fn(h, m, |i, j| if i == j { 1.0 } else { 0.0 })).unwrap();
        let c = MappingMatrix::new(Mat::from_fn(2, m, |i, j| {
            if i == 0 && j == 0 {
                2.0
            } else if i == 1 && j == 1 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        Environment::new(c, phi).unwrap()
    }

    fn random_state(env: &Environment, rng: &mut ChaCha8Rng) -> ModelState {
        use rand_distr::StandardNormal;
        let mut s = ModelState::initial(env, &ModelParams::default(), &[0.0, 0.0], rng);
        s.delta_q.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        s.u.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        s.e_x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        s.w_hat = Mat::from_fn(env.cursor_dim(), env.synergy_count(), |_, _| rng.sample(StandardNormal));
        s
    }

    #[test]
    fn estimation_error_zero_for_true_weights_or_zero_regressor() {
        let env = toy_env(5, 3);
        let mut rng = rng_from_seed(1);
        let mut s = random_state(&env, &mut rng);
        s.w_hat = env.w_true().clone();
        let eps = estimation_error(&env, &s).unwrap();
        assert!(linalg::norm2(&eps) < 1e-12);

        let mut s2 = random_state(&env, &mut rng);
        s2.delta_q = vec![0.0; env.joint_count()];
        let eps2 = estimation_error(&env, &s2).unwrap();
        assert!(linalg::norm2(&eps2) == 0.0);
    }

    #[test]
    fn estimation_error_picks_out_matrix_column() {
        // dq = e1 makes eps the first column of C - What Phi.
        let env = toy_env(19, 4);
        let mut rng = rng_from_seed(2);
        let mut s = random_state(&env, &mut rng);
        s.delta_q = vec![0.0; 19];
        s.delta_q[0] = 1.0;
        let eps = estimation_error(&env, &s).unwrap();
        let diff = env.c().sub(&s.w_hat.mul(env.phi()));
        for i in 0..2 {
            assert_relative_eq!(eps[i], diff[(i, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn estimation_error_equals_weight_error_form() {
        // With C = W Phi exactly: eps = -(What - W) Phi dq.
        let env = toy_env(7, 4);
        let mut rng = rng_from_seed(3);
        let s = random_state(&env, &mut rng);
        let eps = estimation_error(&env, &s).unwrap();
        let w_tilde = s.w_hat.sub(env.w_true());
        let expect = w_tilde.mul(env.phi()).matvec(&s.delta_q);
        for i in 0..eps.len() {
            assert_relative_eq!(eps[i], -expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_step_frozen_cases() {
        let env = toy_env(6, 3);
        let mut rng = rng_from_seed(4);
        let s = random_state(&env, &mut rng);

        let mut p = ModelParams::default();
        p.gamma = 0.0;
        assert_eq!(forward_step(&s, &env, &p), s.w_hat);

        let mut s2 = random_state(&env, &mut rng);
        s2.w_hat = env.w_true().clone(); // eps = 0
        let p2 = ModelParams::default();
        let w2 = forward_step(&s2, &env, &p2);
        assert!(w2.sub(&s2.w_hat).frobenius_norm() < 1e-12);
    }

    #[test]
    fn forward_step_is_the_outer_product_update() {
        let env = toy_env(5, 3);
        let mut rng = rng_from_seed(5);
        let mut s = random_state(&env, &mut rng);
        s.w_hat = Mat::zeros(2, 3);
        let p = ModelParams::default();
        let w = forward_step(&s, &env, &p);

        // Hand oracle: entry (i, k) = dt * gamma * eps_i * (Phi dq)_k.
        let eps = estimation_error(&env, &s).unwrap();
        let phi_dq = env.phi().matvec(&s.delta_q);
        for i in 0..2 {
            for k in 0..3 {
                assert_relative_eq!(w[(i, k)], p.dt * p.gamma * eps[i] * phi_dq[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn inverse_cost_examples() {
        let env = toy_env(6, 3);
        let mut rng = rng_from_seed(6);
        let s = random_state(&env, &mut rng);
        let p = ModelParams::default();

        let zero_u = vec![0.0; 6];
        let zero_e = vec![0.0; 2];
        assert_eq!(inverse_cost(&zero_e, &zero_u, &s.w_hat, env.phi(), &p), 0.0);

        let e = vec![0.7, -0.3];
        let expect = 0.5 * p.k_p * p.k_p * (0.7f64 * 0.7 + 0.3 * 0.3);
        assert_relative_eq!(inverse_cost(&e, &zero_u, &s.w_hat, env.phi(), &p), expect, epsilon = 1e-12);

        // Termwise oracle at a random point.
        let chat = s.w_hat.mul(env.phi());
        let chat_u = chat.matvec(&s.u);
        let mut term1 = 0.0;
        for i in 0..2 {
            let d = chat_u[i] - p.k_p * s.e_x[i];
            term1 += d * d;
        }
        let term2: f64 = s.u.iter().map(|v| v * v).sum();
        let want = 0.5 * term1 + 0.5 * p.mu * term2;
        assert_relative_eq!(inverse_cost(&s.e_x, &s.u, &s.w_hat, env.phi(), &p), want, epsilon = 1e-12);
    }

    #[test]
    fn inverse_step_equilibrium_and_decoupled_decay() {
        let env = toy_env(5, 3);
        let mut rng = rng_from_seed(7);
        let mut p = ModelParams::default();
        p.sigma_u = 0.0;
        let zeros = vec![0.0; 5];

        let mut s = random_state(&env, &mut rng);
        s.u = zeros.clone();
        s.e_x = vec![0.0, 0.0];
        let u = inverse_step(&s, env.phi(), &p, &zeros);
        assert!(linalg::norm2(&u) == 0.0);

        // What = 0 decouples: u <- u (1 - dt eta mu).
        let mut s2 = random_state(&env, &mut rng);
        s2.w_hat = Mat::zeros(2, 3);
        let u2 = inverse_step(&s2, env.phi(), &p, &zeros);
        let factor = 1.0 - p.dt * p.eta * p.mu;
        for (got, orig) in u2.iter().zip(&s2.u) {
            assert_relative_eq!(got, &(orig * factor), epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_drift_matches_cost_gradient_by_finite_differences() {
        let env = toy_env(7, 4);
        let mut rng = rng_from_seed(8);
        let mut p = ModelParams::default();
        p.sigma_u = 0.0;
        let zeros = vec![0.0; 7];
        let h_fd = 1e-6;

        for _ in 0..100 {
            let s = random_state(&env, &mut rng);
            let u_next = inverse_step(&s, env.phi(), &p, &zeros);
            for i in 0..7 {
                let drift = (u_next[i] - s.u[i]) / p.dt;
                let mut up = s.u.clone();
                let mut dn = s.u.clone();
                up[i] += h_fd;
                dn[i] -= h_fd;
                let grad = (inverse_cost(&s.e_x, &up, &s.w_hat, env.phi(), &p)
                    - inverse_cost(&s.e_x, &dn, &s.w_hat, env.phi(), &p))
                    / (2.0 * h_fd);
                let want = -p.eta * grad;
                let scale = want.abs().max(1.0);
                assert!(
                    (drift - want).abs() / scale < 1e-6,
                    "drift {drift} vs -eta grad {want}"
                );
            }
        }
    }

    #[test]
    fn forward_drift_matches_half_eps_squared_gradient() {
        // Drift of What equals -gamma * d/dWhat (1/2 ||eps||^2) by central
        // finite differences.
        let env = toy_env(6, 3);
        let mut rng = rng_from_seed(9);
        let p = ModelParams::default();
        let h_fd = 1e-6;

        let half_eps_sq = |w: &Mat, s: &ModelState| -> f64 {
            let dx = env.c().matvec(&s.delta_q);
            let pred = w.matvec(&env.phi().matvec(&s.delta_q));
            0.5 * linalg::dot(&linalg::sub_vec(&dx, &pred), &linalg::sub_vec(&dx, &pred))
        };

        for _ in 0..100 {
            let s = random_state(&env, &mut rng);
            let w_next = forward_step(&s, &env, &p);
            for i in 0..2 {
                for k in 0..3 {
                    let drift = (w_next[(i, k)] - s.w_hat[(i, k)]) / p.dt;
                    let mut up = s.w_hat.clone();
                    let mut dn = s.w_hat.clone();
                    up[(i, k)] += h_fd;
                    dn[(i, k)] -= h_fd;
                    let grad = (half_eps_sq(&up, &s) - half_eps_sq(&dn, &s)) / (2.0 * h_fd);
                    let want = -p.gamma * grad;
                    let scale = want.abs().max(1e-3);
                    assert!(
                        (drift - want).abs() / scale < 1e-6,
                        "drift {drift} vs -gamma grad {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn perception_decay_and_fixed_point() {
        let env = toy_env(4, 2);
        let mut rng = rng_from_seed(10);
        let mut p = ModelParams::default();
        p.sigma_q = 0.0;
        let zeros = vec![0.0; 4];

        // Zero input: geometric decay with factor (1 - a dt).
        let mut s = random_state(&env, &mut rng);
        s.u = zeros.clone();
        let init = s.delta_q.clone();
        let factor = 1.0 - p.a * p.dt;
        for step in 1..=5 {
            s.delta_q = perception_step(&s, &p, &zeros);
            for (got, v0) in s.delta_q.iter().zip(&init) {
                assert_relative_eq!(got, &(v0 * factor.powi(step)), epsilon = 1e-12);
            }
        }

        // Constant input: fixed point u / a.
        let mut s2 = random_state(&env, &mut rng);
        s2.u = vec![0.3, -0.8, 1.1, 0.0];
        for _ in 0..2000 {
            s2.delta_q = perception_step(&s2, &p, &zeros);
        }
        for (dq, u) in s2.delta_q.iter().zip(&s2.u) {
            assert!((dq - u / p.a).abs() < 1e-6);
        }
    }

    #[test]
    fn perception_noise_reaches_stationary_variance() {
        // Discretized OU: sample variance approaches sigma_q^2 / (2a).
        let env = toy_env(3, 2);
        let mut rng = rng_from_seed(12);
        let mut p = ModelParams::default();
        p.sigma_q = 0.5;
        let mut s = ModelState::initial(&env, &p, &[0.0, 0.0], &mut rng);
        s.u = vec![0.0; 3];

        let steps = 1_000_000usize;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut noise = vec![0.0; 3];
        for _ in 0..steps {
            for v in noise.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            s.delta_q = perception_step(&s, &p, &noise);
            for j in 0..3 {
                sums[j] += s.delta_q[j];
                sq[j] += s.delta_q[j] * s.delta_q[j];
            }
        }
        let want = p.sigma_q * p.sigma_q / (2.0 * p.a);
        for j in 0..3 {
            let mean = sums[j] / steps as f64;
            let var = sq[j] / steps as f64 - mean * mean;
            assert!(
                (var - want).abs() / want < 0.1,
                "component {j}: var {var} vs {want}"
            );
        }
    }

    #[test]
    fn full_step_fixed_point_and_determinism() {
        let env = toy_env(19, 4);
        let mut p = ModelParams::default();
        p.sigma_u = 0.0;
        p.sigma_q = 0.0;

        // Equilibrium: true weights, zero error, zero motion.
        let mut s = ModelState {
            delta_q: vec![0.0; 19],
            w_hat: env.w_true().clone(),
            e_x: vec![0.0, 0.0],
            u: vec![0.0; 19],
            x: vec![2.5, 2.5],
        };
        let before = s.clone();
        let mut rng = rng_from_seed(0);
        hml_step(&mut s, &env, &p, &mut rng).unwrap();
        assert_eq!(s.delta_q, before.delta_q);
        assert_eq!(s.u, before.u);
        assert_eq!(s.e_x, before.e_x);
        assert!(s.w_hat.sub(&before.w_hat).frobenius_norm() == 0.0);

        // Fixed seed gives bitwise identical trajectories.
        let p2 = ModelParams::default();
        let mut rng_a = rng_from_seed(99);
        let mut rng_b = rng_from_seed(99);
        let mut sa = random_state(&env, &mut rng_from_seed(55));
        let mut sb = sa.clone();
        for _ in 0..50 {
            hml_step(&mut sa, &env, &p2, &mut rng_a).unwrap();
            hml_step(&mut sb, &env, &p2, &mut rng_b).unwrap();
        }
        assert_eq!(sa.u, sb.u);
        assert_eq!(sa.x, sb.x);
        assert_eq!(sa.w_hat.data(), sb.w_hat.data());
    }

    #[test]
    fn subject_one_runs_eight_sessions_without_blowup() {
        // 8 sessions x 60 trials at <= 2 s each, single stream.
        let env = toy_env(19, 4);
        let p = ModelParams::subject(1);
        let mut rng = rng_from_seed(2024);
        let mut s = ModelState::initial(&env, &p, &[2.5, 2.5], &mut rng);
        s.e_x = vec![2.0, -2.0];
        let steps = 8 * 60 * 200;
        for step in 0..steps {
            if step % 200 == 0 {
                // New nominal target direction, as at a trial boundary.
                s.e_x = vec![if step % 400 == 0 { 2.0 } else { -2.0 }, 1.5];
            }
            hml_step(&mut s, &env, &p, &mut rng).unwrap();
        }
    }

    #[test]
    fn weight_error_contracts_under_sinusoidal_probe() {
        // sigma = 0, u forced to a sinusoidal probe: ||What - W|| never
        // increases while the discrete stability condition holds.
        let env = toy_env(6, 3);
        let mut p = ModelParams::default();
        p.sigma_q = 0.0;
        p.gamma = 50.0;
        let mut rng = rng_from_seed(77);
        let mut s = random_state(&env, &mut rng);
        let mut prev = s.w_hat.sub(env.w_true()).frobenius_norm();
        for k in 0..5000 {
            let t = k as f64 * p.dt;
            // Distinct frequency per joint so the filtered increments
            // excite the whole synergy space.
            for j in 0..6 {
                s.u[j] = 2.0 * ((1.0 + 0.7 * j as f64) * t).sin();
            }
            let phi_dq = env.phi().matvec(&s.delta_q);
            let excitation = linalg::dot(&phi_dq, &phi_dq);
            assert!(p.dt * p.gamma * excitation < 1.0, "probe too hot for the test");
            s.w_hat = forward_step(&s, &env, &p);
            s.delta_q = perception_step(&s, &p, &vec![0.0; 6]);
            let now = s.w_hat.sub(env.w_true()).frobenius_norm();
            assert!(now <= prev + 1e-12, "step {k}: {now} > {prev}");
            prev = now;
        }
        assert!(prev < 1e-3, "probe failed to excite learning: {prev}");
    }

    #[test]
    fn cursor_and_error_updates_stay_consistent() {
        let env = toy_env(19, 4);
        let p = ModelParams::default();
        let mut rng = rng_from_seed(31);
        let mut s = random_state(&env, &mut rng);
        let x0 = s.x.clone();
        let e0 = s.e_x.clone();
        for _ in 0..400 {
            hml_step(&mut s, &env, &p, &mut rng).unwrap();
        }
        for i in 0..2 {
            let moved = s.x[i] - x0[i];
            let err_drop = e0[i] - s.e_x[i];
            assert!((moved - err_drop).abs() < 1e-10);
        }
    }
}
