//! Target-capture game protocol: target sequencing, trial and session
//! structure, capture detection, and trajectory recording.
//!
//! A trial is one reach from the current position to a freshly drawn
//! target. The learning state (weights, velocities, filtered increments)
//! carries across trials and sessions; only the reaching error is reset at
//! each trial start. A target counts as captured once the cursor has moved
//! at most 0.0025 units per sample for 15 consecutive samples while inside
//! the target radius.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::metrics::{self, TrialMetrics};
use crate::model::{
    hml_step, Environment, ModelError, ModelParams, ModelState,
};
use crate::rng::rng_from_seed;

/// Maximum per-sample cursor displacement that still counts as stationary.
pub const CAPTURE_DISPLACEMENT: f64 = 0.0025;
/// Number of consecutive stationary displacements required for capture.
pub const CAPTURE_WINDOW: usize = 15;
/// Default cap on a capture-terminated trial (seconds).
pub const DEFAULT_TRIAL_CAP: f64 = 2.0;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("non-finite state in session {session}, trial {trial}: {source}")]
    NonFinite {
        session: usize,
        trial: usize,
        #[source]
        source: ModelError,
    },
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
}

/// Trial termination mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TrialMode {
    /// Terminate on capture, capped at `t_max` seconds.
    Capture { t_max: f64 },
    /// Run for exactly `duration` seconds; capture never terminates.
    Fixed { duration: f64 },
}

/// Task protocol configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub targets: Vec<[f64; 2]>,
    pub sessions: usize,
    pub trials_per_session: usize,
    pub trial_mode: TrialMode,
    /// Target radius used for capture detection.
    pub rho_x: f64,
    /// Cursor position at experiment start (the center target).
    pub start: [f64; 2],
    pub seed: u64,
}

impl TaskConfig {
    /// The four on-screen target points of the game.
    pub fn default_targets() -> Vec<[f64; 2]> {
        vec![[0.5, 4.5], [2.5, 0.5], [2.5, 2.5], [4.5, 4.5]]
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let mut distinct = self.targets.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(TaskError::InvalidConfig("need at least 2 distinct targets".into()));
        }
        if self.sessions == 0 || self.trials_per_session == 0 {
            return Err(TaskError::InvalidConfig("session and trial counts must be >= 1".into()));
        }
        let t = match self.trial_mode {
            TrialMode::Capture { t_max } => t_max,
            TrialMode::Fixed { duration } => duration,
        };
        if !(t > 0.0) {
            return Err(TaskError::InvalidConfig(format!("trial time must be > 0, got {t}")));
        }
        if !(self.rho_x > 0.0) {
            return Err(TaskError::InvalidConfig(format!("rho_x must be > 0, got {}", self.rho_x)));
        }
        Ok(())
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            targets: Self::default_targets(),
            sessions: 8,
            trials_per_session: 60,
            trial_mode: TrialMode::Capture { t_max: DEFAULT_TRIAL_CAP },
            rho_x: ModelParams::DEFAULT_RHO_X,
            start: [2.5, 2.5],
            seed: 0,
        }
    }
}

/// One recorded state snapshot within a trial.
#[derive(Debug, Clone)]
pub struct TrialSample {
    /// Time since trial start.
    pub t: f64,
    pub x: [f64; 2],
    pub e_x: [f64; 2],
    pub u: Vec<f64>,
    pub delta_q: Vec<f64>,
    /// Forward model error at this sample; NaN unless trajectory
    /// recording was requested.
    pub fme: f64,
}

/// One trial: trajectory, termination info, and end-of-trial snapshots.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub target: [f64; 2],
    pub start: [f64; 2],
    /// Uniform samples at dt spacing, sample 0 at trial start. Cleared
    /// after metric extraction unless trajectories are kept.
    pub samples: Vec<TrialSample>,
    /// Number of samples recorded (survives clearing).
    pub sample_count: usize,
    /// End-of-trial sample for reaching error: first stationary window or
    /// two seconds past movement onset, whichever is earlier.
    pub end_index: usize,
    pub captured: bool,
    /// Sample index at which the capture criterion first held.
    pub capture_index: Option<usize>,
    /// Sample of maximum joint-velocity norm (earliest on ties).
    pub ballistic_index: usize,
    pub u_ballistic: Vec<f64>,
    pub w_ballistic: Mat,
    pub w_end: Mat,
    pub fme_at_end: f64,
    /// Wall time of the trial in seconds (steps * dt).
    pub duration: f64,
}

/// Per-trial metric rows, in session-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetricsRow {
    pub session: usize,
    pub trial: usize,
    #[serde(flatten)]
    pub metrics: TrialMetrics,
}

/// SHA-256 digests of the environment matrices, for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub c_sha256: String,
    pub phi_sha256: String,
}

pub fn env_fingerprint(env: &Environment) -> EnvFingerprint {
    EnvFingerprint { c_sha256: mat_sha256(env.c()), phi_sha256: mat_sha256(env.phi()) }
}

fn mat_sha256(m: &Mat) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A full experiment: config, environment provenance, trials, metrics.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub config: TaskConfig,
    pub params: ModelParams,
    pub env_fingerprint: EnvFingerprint,
    pub sessions: Vec<Vec<TrialRecord>>,
    pub metrics: Vec<TrialMetricsRow>,
}

/// Run-time options for an experiment.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Keep full trajectories in the returned record.
    pub keep_trajectories: bool,
    /// Also evaluate the forward model error at every sample (for
    /// trajectory dumps; costs an extra mapping product per step).
    pub sample_fme: bool,
    /// Per-trial durations overriding the configured trial mode; length
    /// must equal sessions * trials_per_session.
    pub schedule: Option<Vec<f64>>,
    /// Freeze forward learning (gamma = 0) permanently once the
    /// end-of-trial forward model error falls to or below this threshold.
    pub freeze_below_fme: Option<f64>,
}

/// Uniform draw over targets excluding the current one, so every trial
/// demands movement.
pub fn next_target(rng: &mut ChaCha8Rng, current: [f64; 2], targets: &[[f64; 2]]) -> [f64; 2] {
    let candidates: Vec<usize> =
        (0..targets.len()).filter(|&i| targets[i] != current).collect();
    if candidates.is_empty() {
        return targets[rng.gen_range(0..targets.len())];
    }
    targets[candidates[rng.gen_range(0..candidates.len())]]
}

/// Capture criterion on a window of recent cursor positions: every
/// consecutive displacement at most 0.0025 units and the latest position
/// within `rho_x` of the target. Windows shorter than 15 samples never
/// capture.
pub fn capture_check(window: &[[f64; 2]], target: [f64; 2], rho_x: f64) -> bool {
    if window.len() < CAPTURE_WINDOW {
        return false;
    }
    let last = window[window.len() - 1];
    let dist = ((last[0] - target[0]).powi(2) + (last[1] - target[1]).powi(2)).sqrt();
    if dist > rho_x {
        return false;
    }
    window.windows(2).all(|pair| {
        let dx = pair[1][0] - pair[0][0];
        let dy = pair[1][1] - pair[0][1];
        (dx * dx + dy * dy).sqrt() <= CAPTURE_DISPLACEMENT
    })
}

/// First sample index at which the trailing stationarity window holds
/// (radius ignored), if any.
fn first_stationary_index(xs: &[[f64; 2]]) -> Option<usize> {
    if xs.len() <= CAPTURE_WINDOW {
        return None;
    }
    let mut run = 0usize; // consecutive stationary displacements ending here
    for k in 1..xs.len() {
        let dx = xs[k][0] - xs[k - 1][0];
        let dy = xs[k][1] - xs[k - 1][1];
        if (dx * dx + dy * dy).sqrt() <= CAPTURE_DISPLACEMENT {
            run += 1;
            if run >= CAPTURE_WINDOW {
                return Some(k);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Movement onset: first sample whose joint-velocity norm exceeds 1% of
/// the trial maximum; sample 0 when the trial never moves.
fn movement_onset(u_norms: &[f64]) -> usize {
    let max = u_norms.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    u_norms.iter().position(|&n| n > 0.01 * max).unwrap_or(0)
}

/// Run one trial from the current state. The reaching error is reset to
/// the new target at trial start; all learning state carries over.
pub fn run_trial(
    state: &mut ModelState,
    env: &Environment,
    params: &ModelParams,
    mode: &TrialMode,
    target: [f64; 2],
    rho_x: f64,
    rng: &mut ChaCha8Rng,
    with_sample_fme: bool,
) -> Result<TrialRecord, ModelError> {
    let start = [state.x[0], state.x[1]];
    state.e_x = vec![target[0] - state.x[0], target[1] - state.x[1]];

    let dt = params.dt;
    let max_steps = match mode {
        TrialMode::Capture { t_max } => (t_max / dt).ceil() as usize,
        TrialMode::Fixed { duration } => (duration / dt).ceil() as usize,
    };
    let capture_terminates = matches!(mode, TrialMode::Capture { .. });

    let mut samples: Vec<TrialSample> = Vec::with_capacity(max_steps + 1);
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(max_steps + 1);
    let mut u_norms: Vec<f64> = Vec::with_capacity(max_steps + 1);
    let mut capture_index: Option<usize> = None;

    fn record(state: &ModelState, k: usize, dt: f64, fme: f64) -> TrialSample {
        TrialSample {
            t: k as f64 * dt,
            x: [state.x[0], state.x[1]],
            e_x: [state.e_x[0], state.e_x[1]],
            u: state.u.clone(),
            delta_q: state.delta_q.clone(),
            fme,
        }
    }
    let sample_fme = |state: &ModelState| {
        if with_sample_fme {
            metrics::fme_against(env.c(), &state.w_hat, env.phi()).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        }
    };

    samples.push(record(state, 0, dt, sample_fme(state)));
    positions.push([state.x[0], state.x[1]]);
    u_norms.push(linalg::norm2(&state.u));

    // Ballistic snapshot tracked online: earliest maximum of ||u||.
    let mut best_u = u_norms[0];
    let mut ballistic_index = 0usize;
    let mut u_ballistic = state.u.clone();
    let mut w_ballistic = state.w_hat.clone();

    let mut steps_taken = 0usize;
    for k in 1..=max_steps {
        hml_step(state, env, params, rng)?;
        samples.push(record(state, k, dt, sample_fme(state)));
        positions.push([state.x[0], state.x[1]]);
        let un = linalg::norm2(&state.u);
        u_norms.push(un);
        steps_taken = k;

        if un > best_u {
            best_u = un;
            ballistic_index = k;
            u_ballistic.clone_from(&state.u);
            w_ballistic.clone_from(&state.w_hat);
        }

        if capture_index.is_none() && k >= CAPTURE_WINDOW {
            let window = &positions[k - CAPTURE_WINDOW..=k];
            if capture_check(window, target, rho_x) {
                capture_index = Some(k);
                if capture_terminates {
                    break;
                }
            }
        }
    }

    let end_by_stationarity = first_stationary_index(&positions);
    let onset = movement_onset(&u_norms);
    let end_by_time = (onset + (2.0 / dt).ceil() as usize).min(positions.len() - 1);
    let end_index = match end_by_stationarity {
        Some(s) => s.min(end_by_time),
        None => end_by_time,
    };

    let fme_at_end = metrics::fme_against(env.c(), &state.w_hat, env.phi()).unwrap_or(f64::NAN);

    Ok(TrialRecord {
        target,
        start,
        sample_count: samples.len(),
        samples,
        end_index,
        captured: capture_index.is_some(),
        capture_index,
        ballistic_index,
        u_ballistic,
        w_ballistic,
        w_end: state.w_hat.clone(),
        fme_at_end,
        duration: steps_taken as f64 * dt,
    })
}

/// Run the full session/trial protocol with persistent learning state.
pub fn run_experiment(
    env: &Environment,
    params: &ModelParams,
    config: &TaskConfig,
    options: &ExperimentOptions,
) -> Result<ExperimentRecord, TaskError> {
    config.validate()?;
    params
        .validate()
        .map_err(|e| TaskError::InvalidConfig(e.to_string()))?;
    let total_trials = config.sessions * config.trials_per_session;
    if let Some(schedule) = &options.schedule {
        if schedule.len() != total_trials {
            return Err(TaskError::InvalidConfig(format!(
                "schedule has {} durations for {} trials",
                schedule.len(),
                total_trials
            )));
        }
    }

    let mut rng = rng_from_seed(config.seed);
    let mut state = ModelState::initial(env, params, &config.start, &mut rng);
    let mut live_params = params.clone();
    let mut current = config.start;
    let fingerprint = env_fingerprint(env);

    let mut sessions: Vec<Vec<TrialRecord>> = Vec::with_capacity(config.sessions);
    let mut rows: Vec<TrialMetricsRow> = Vec::with_capacity(total_trials);

    for session in 0..config.sessions {
        let mut trials: Vec<TrialRecord> = Vec::with_capacity(config.trials_per_session);
        for trial in 0..config.trials_per_session {
            let flat = session * config.trials_per_session + trial;
            let target = next_target(&mut rng, current, &config.targets);
            let mode = match &options.schedule {
                Some(s) => TrialMode::Fixed { duration: s[flat] },
                None => config.trial_mode.clone(),
            };
            let mut rec = run_trial(
                &mut state,
                env,
                &live_params,
                &mode,
                target,
                config.rho_x,
                &mut rng,
                options.sample_fme,
            )
            .map_err(|source| TaskError::NonFinite { session, trial, source })?;

            let metrics = metrics::trial_metrics(&rec, env);
            rows.push(TrialMetricsRow { session, trial, metrics });

            if let Some(threshold) = options.freeze_below_fme {
                if live_params.gamma != 0.0 && rec.fme_at_end <= threshold {
                    live_params.gamma = 0.0;
                }
            }

            if !options.keep_trajectories {
                rec.samples.clear();
            }
            current = target;
            trials.push(rec);
        }
        sessions.push(trials);
    }

    Ok(ExperimentRecord {
        config: config.clone(),
        params: params.clone(),
        env_fingerprint: fingerprint,
        sessions,
        metrics: rows,
    })
}
