//! Performance measures extracted from trials and model snapshots:
//! reaching error, trajectory straightness, forward model error, capture
//! speed, chord accuracy, and the driving/exploratory effort split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::model::Environment;
use crate::stats;
use crate::task::{TrialRecord, CAPTURE_WINDOW};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("degenerate chord: start and end coincide")]
    DegenerateChord,
    #[error("true mapping has zero norm")]
    ZeroTrueMapping,
    #[error("no replicates supplied")]
    EmptyReplicates,
    #[error("trial has no recorded trajectory")]
    MissingTrajectory,
}

/// All per-trial measures. Degenerate-chord values are stored as NaN and
/// excluded from averages downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// Distance from cursor to target at the end-of-trial sample.
    pub re: f64,
    /// Max perpendicular deviation over chord length (start to end point).
    pub sot: f64,
    /// Forward model error at trial end.
    pub fme: f64,
    /// Capture time in seconds; the trial duration when uncaptured
    /// (right-censored, see `captured`).
    pub speed: f64,
    /// RMS perpendicular deviation from the start-to-target chord.
    pub accuracy: f64,
    /// Norm of the joint-velocity projection onto the row space of the
    /// learned mapping, at the ballistic-phase end.
    pub driving: f64,
    /// Norm of the null-space component at the ballistic-phase end.
    pub exploratory: f64,
    pub captured: bool,
}

fn point_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Perpendicular distance from `p` to the line through `a` and `b`
/// (callers guarantee a non-degenerate chord).
fn perp_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let chord = [b[0] - a[0], b[1] - a[1]];
    let rel = [p[0] - a[0], p[1] - a[1]];
    (chord[0] * rel[1] - chord[1] * rel[0]).abs() / (chord[0].powi(2) + chord[1].powi(2)).sqrt()
}

/// Euclidean distance between the end-of-trial cursor position and the
/// target.
pub fn reaching_error(trial: &TrialRecord) -> f64 {
    let end = trial.samples[trial.end_index].x;
    point_dist(end, trial.target)
}

/// Straightness of trajectory: maximum perpendicular distance to the
/// start-to-end chord, divided by the chord length.
pub fn straightness(trial: &TrialRecord) -> Result<f64, MetricsError> {
    if trial.samples.is_empty() {
        return Err(MetricsError::MissingTrajectory);
    }
    let a = trial.start;
    let b = trial.samples[trial.end_index].x;
    let chord = point_dist(a, b);
    if chord < 1e-9 {
        return Err(MetricsError::DegenerateChord);
    }
    let max_dev = trial.samples[..=trial.end_index]
        .iter()
        .map(|s| perp_distance(s.x, a, b))
        .fold(0.0f64, f64::max);
    Ok(max_dev / chord)
}

/// Forward model error against an explicit true mapping:
/// ||C - What Phi||_2 / ||C||_2.
pub fn fme_against(c_true: &Mat, w_hat: &Mat, phi: &Mat) -> Result<f64, MetricsError> {
    let denom = linalg::spectral_norm(c_true);
    if denom <= 0.0 {
        return Err(MetricsError::ZeroTrueMapping);
    }
    let c_hat = w_hat.mul(phi);
    Ok(linalg::spectral_norm(&c_true.sub(&c_hat)) / denom)
}

/// Forward model error with the true mapping factored as W Phi.
pub fn fme(w_hat: &Mat, w_true: &Mat, phi: &Mat) -> Result<f64, MetricsError> {
    fme_against(&w_true.mul(phi), w_hat, phi)
}

/// Split a joint-velocity vector into its components in the row space and
/// null space of the learned mapping What Phi. Returns (driving,
/// exploratory); singular directions below 1e-10 are treated as null.
pub fn effort_split(u: &[f64], w_hat: &Mat, phi: &Mat) -> (f64, f64) {
    let c_hat = w_hat.mul(phi);
    let basis = linalg::row_space_basis(&c_hat, 1e-10);
    let mut proj = vec![0.0; u.len()];
    for i in 0..basis.rows() {
        let coef = linalg::dot(basis.row(i), u);
        linalg::axpy(&mut proj, coef, basis.row(i));
    }
    let driving = linalg::norm2(&proj);
    let exploratory = linalg::norm2(&linalg::sub_vec(u, &proj));
    (driving, exploratory)
}

/// Sample index of maximum joint-velocity norm; earliest index on ties.
pub fn ballistic_end(trial: &TrialRecord) -> Result<usize, MetricsError> {
    if trial.samples.is_empty() {
        return Err(MetricsError::MissingTrajectory);
    }
    let mut best = 0usize;
    let mut best_norm = linalg::norm2(&trial.samples[0].u);
    for (k, s) in trial.samples.iter().enumerate().skip(1) {
        let n = linalg::norm2(&s.u);
        if n > best_norm {
            best_norm = n;
            best = k;
        }
    }
    Ok(best)
}

/// Capture time (right-censored at the trial duration) and RMS deviation
/// from the start-to-target chord.
pub fn speed_accuracy(trial: &TrialRecord, dt: f64) -> (f64, Result<f64, MetricsError>) {
    let speed = match trial.capture_index {
        Some(k) => k as f64 * dt,
        None => trial.duration,
    };
    (speed, chord_rms(trial))
}

fn chord_rms(trial: &TrialRecord) -> Result<f64, MetricsError> {
    if trial.samples.is_empty() {
        return Err(MetricsError::MissingTrajectory);
    }
    let a = trial.start;
    let b = trial.target;
    if point_dist(a, b) < 1e-9 {
        return Err(MetricsError::DegenerateChord);
    }
    let n = trial.end_index + 1;
    let sum_sq: f64 = trial.samples[..n].iter().map(|s| perp_distance(s.x, a, b).powi(2)).sum();
    Ok((sum_sq / n as f64).sqrt())
}

/// Trailing moving average with a truncated window at the head. Non-finite
/// entries are skipped inside each window; a window with no finite entries
/// yields NaN.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be >= 1");
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(window);
        let mut sum = 0.0;
        let mut count = 0usize;
        for &v in &series[lo..=i] {
            if v.is_finite() {
                sum += v;
                count += 1;
            }
        }
        out.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    out
}

/// Success probability estimate with its Wilson 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessEstimate {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
    pub successes: usize,
    pub n: usize,
}

/// Fraction of replicate trials whose cursor lies within `rho_x` of its
/// target at time `t_eval` (clamped to the recorded trajectory).
pub fn success_probability(
    trials: &[&TrialRecord],
    rho_x: f64,
    t_eval: f64,
    dt: f64,
) -> Result<SuccessEstimate, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::EmptyReplicates);
    }
    let mut successes = 0usize;
    for trial in trials {
        if trial.samples.is_empty() {
            return Err(MetricsError::MissingTrajectory);
        }
        let idx = ((t_eval / dt).round() as usize).min(trial.samples.len() - 1);
        if point_dist(trial.samples[idx].x, trial.target) <= rho_x {
            successes += 1;
        }
    }
    let n = trials.len();
    let p = successes as f64 / n as f64;
    let (lo, hi) = stats::wilson_interval(successes, n);
    Ok(SuccessEstimate { p, lo, hi, successes, n })
}

/// Assemble the full per-trial metric row. Efforts are evaluated at the
/// ballistic-phase end; degenerate chords become NaN.
pub fn trial_metrics(trial: &TrialRecord, env: &Environment) -> TrialMetrics {
    let re = reaching_error(trial);
    let sot = straightness(trial).unwrap_or(f64::NAN);
    let fme = fme_against(env.c(), &trial.w_end, env.phi()).unwrap_or(f64::NAN);
    let (speed, accuracy) = speed_accuracy(trial, trial_dt(trial));
    let accuracy = accuracy.unwrap_or(f64::NAN);
    let (driving, exploratory) = effort_split(&trial.u_ballistic, &trial.w_ballistic, env.phi());
    TrialMetrics {
        re,
        sot,
        fme,
        speed,
        accuracy,
        driving,
        exploratory,
        captured: trial.captured,
    }
}

fn trial_dt(trial: &TrialRecord) -> f64 {
    if trial.samples.len() >= 2 {
        trial.samples[1].t - trial.samples[0].t
    } else {
        trial.duration.max(f64::MIN_POSITIVE) / (trial.sample_count.max(2) - 1) as f64
    }
}

/// Minimum capture time: the stationarity window must fill before capture
/// can fire, so an instantly stationary cursor captures at 15 dt.
pub fn min_capture_time(dt: f64) -> f64 {
    CAPTURE_WINDOW as f64 * dt
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Moving average with window 1 is the identity; a constant series
        /// stays constant for any window.
        #[test]
        fn moving_average_properties(
            series in proptest::collection::vec(-100.0f64..100.0, 1..60),
            window in 1usize..20,
            constant in -10.0f64..10.0,
        ) {
            prop_assert_eq!(moving_average(&series, 1), series.clone());
            let flat = vec![constant; series.len()];
            for v in moving_average(&flat, window) {
                prop_assert!((v - constant).abs() < 1e-12);
            }
            // Output stays within the input range.
            let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in moving_average(&series, window) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
