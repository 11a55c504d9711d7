//! Monte Carlo trade-off studies: parameter sweeps with per-trial
//! replicate statistics, the satisficing (learning-freeze) study, the
//! synergy-count flexibility study, and one-tailed paired t-tests.
//!
//! All studies derive replicate seeds from (master seed, grid index,
//! replicate index) and reduce results by index, so outputs are bitwise
//! reproducible under any parallel schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{success_probability, SuccessEstimate, TrialMetrics};
use crate::model::{Environment, ModelParams};
use crate::rng::derive_seed2;
use crate::stats::{mean_ci95, t_sf};
use crate::synthetic::out_of_span_env;
use crate::task::{run_experiment, ExperimentOptions, TaskConfig, TaskError, TrialMode, TrialRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown sweep parameter: {0}")]
    UnknownParameter(String),
    #[error("paired t-test needs equal-length samples of at least 2, got {a} and {b}")]
    BadSampleLengths { a: usize, b: usize },
    #[error("invalid study spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// The six model parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Eta,
    Mu,
    KP,
    SigmaU,
    SigmaQ,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Eta => "eta",
            SweepParam::Mu => "mu",
            SweepParam::KP => "k_p",
            SweepParam::SigmaU => "sigma_u",
            SweepParam::SigmaQ => "sigma_q",
        }
    }

    pub fn apply(&self, params: &mut ModelParams, value: f64) {
        match self {
            SweepParam::Gamma => params.gamma = value,
            SweepParam::Eta => params.eta = value,
            SweepParam::Mu => params.mu = value,
            SweepParam::KP => params.k_p = value,
            SweepParam::SigmaU => params.sigma_u = value,
            SweepParam::SigmaQ => params.sigma_q = value,
        }
    }

    /// Default grid bracketing the fitted value by factors of 4, log
    /// spaced, 7 points.
    pub fn default_grid(&self, fitted: f64) -> Vec<f64> {
        let lo = fitted / 4.0;
        let hi = fitted * 4.0;
        let n = 7;
        (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    }
}

impl std::str::FromStr for SweepParam {
    type Err = AnalysisError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "eta" => Ok(SweepParam::Eta),
            "mu" => Ok(SweepParam::Mu),
            "k_p" | "kp" => Ok(SweepParam::KP),
            "sigma_u" => Ok(SweepParam::SigmaU),
            "sigma_q" => Ok(SweepParam::SigmaQ),
            other => Err(AnalysisError::UnknownParameter(other.to_string())),
        }
    }
}

/// Sweep request: one varied parameter over a grid, the rest at their
/// fitted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.grid.is_empty() {
            return Err(AnalysisError::InvalidSpec("empty sweep grid".into()));
        }
        if self.replicates < 2 {
            return Err(AnalysisError::InvalidSpec("need at least 2 replicates".into()));
        }
        Ok(())
    }
}

/// Raw sweep output: per grid value, per replicate, the per-trial metric
/// table of one full experiment.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub spec: SweepSpec,
    /// cells[g][r] lists trial metrics in session-major order.
    pub cells: Vec<Vec<Vec<TrialMetrics>>>,
}

/// One long-format aggregate row: replicate mean and normal 95% CI of one
/// metric at one (grid value, trial) coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub trial: usize,
    pub metric: String,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

pub const SWEEP_METRICS: [&str; 7] =
    ["re", "sot", "fme", "speed", "accuracy", "driving", "exploratory"];

fn metric_value(m: &TrialMetrics, name: &str) -> f64 {
    match name {
        "re" => m.re,
        "sot" => m.sot,
        "fme" => m.fme,
        "speed" => m.speed,
        "accuracy" => m.accuracy,
        "driving" => m.driving,
        "exploratory" => m.exploratory,
        _ => f64::NAN,
    }
}

/// Run the sweep: `replicates` independent experiments per grid value.
pub fn sweep(
    spec: &SweepSpec,
    env: &Environment,
    base_params: &ModelParams,
    config: &TaskConfig,
) -> Result<SweepOutput, AnalysisError> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.grid.len());
    for (g, &value) in spec.grid.iter().enumerate() {
        let mut params = base_params.clone();
        spec.param.apply(&mut params, value);
        let replicate_tables: Result<Vec<Vec<TrialMetrics>>, TaskError> = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let mut cfg = config.clone();
                cfg.seed = derive_seed2(spec.seed, g as u64, r as u64);
                let record = run_experiment(env, &params, &cfg, &ExperimentOptions::default())?;
                Ok(record.metrics.into_iter().map(|row| row.metrics).collect())
            })
            .collect();
        cells.push(replicate_tables?);
    }
    Ok(SweepOutput { spec: spec.clone(), cells })
}

impl SweepOutput {
    /// Across-replicate mean of one metric at every trial of one grid
    /// value (NaN entries skipped).
    pub fn per_trial_means(&self, grid_index: usize, metric: &str) -> Vec<f64> {
        let reps = &self.cells[grid_index];
        let trials = reps[0].len();
        (0..trials)
            .map(|t| {
                let vals: Vec<f64> = reps
                    .iter()
                    .map(|table| metric_value(&table[t], metric))
                    .filter(|v| v.is_finite())
                    .collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect()
    }

    /// Per-trial metric sequence of a single replicate.
    pub fn replicate_series(&self, grid_index: usize, replicate: usize, metric: &str) -> Vec<f64> {
        self.cells[grid_index][replicate]
            .iter()
            .map(|m| metric_value(m, metric))
            .collect()
    }

    /// Long-format aggregate rows for persistence.
    pub fn aggregate(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for (g, &value) in self.spec.grid.iter().enumerate() {
            let reps = &self.cells[g];
            let trials = reps[0].len();
            for t in 0..trials {
                for metric in SWEEP_METRICS {
                    let vals: Vec<f64> = reps
                        .iter()
                        .map(|table| metric_value(&table[t], metric))
                        .filter(|v| v.is_finite())
                        .collect();
                    if vals.is_empty() {
                        continue;
                    }
                    let (mean, lo, hi) = mean_ci95(&vals);
                    rows.push(SweepRow {
                        param: self.spec.param.name().to_string(),
                        value,
                        trial: t,
                        metric: metric.to_string(),
                        mean,
                        ci_lo: lo,
                        ci_hi: hi,
                        n: vals.len(),
                    });
                }
            }
        }
        rows
    }
}

/// Tail direction of a one-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    /// Alternative: mean(a - b) > 0.
    Upper,
    /// Alternative: mean(a - b) < 0.
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    /// Zero difference variance with a nonzero mean.
    pub degenerate: bool,
}

/// One-tailed paired t-test on differences a - b.
pub fn paired_t_test(a: &[f64], b: &[f64], tail: Tail) -> Result<TTest, AnalysisError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(AnalysisError::BadSampleLengths { a: a.len(), b: b.len() });
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);

    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 0.5, n, degenerate: false });
        }
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        let p = match (tail, mean > 0.0) {
            (Tail::Upper, true) | (Tail::Lower, false) => 0.0,
            _ => 1.0,
        };
        return Ok(TTest { t, p, n, degenerate: true });
    }

    let t = mean / (var / n as f64).sqrt();
    let dof = (n - 1) as f64;
    let p = match tail {
        Tail::Upper => t_sf(t, dof),
        Tail::Lower => t_sf(-t, dof),
    };
    Ok(TTest { t, p, n, degenerate: false })
}

/// Satisficing study request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisficingSpec {
    /// Forward-learning freeze thresholds on the end-of-trial FME.
    pub fme_thresholds: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub trial_times: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SatisficingSpec {
    fn default() -> Self {
        Self {
            fme_thresholds: vec![0.2, 0.35, 0.5, 0.65, 0.8, 0.9, 1.0],
            rho_grid: vec![0.5, 1.0, 2.0, 3.0],
            trial_times: vec![0.8, 1.2, 2.0],
            replicates: 1280,
            seed: 0,
        }
    }
}

impl SatisficingSpec {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.fme_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(AnalysisError::InvalidSpec("thresholds must lie in (0, 1]".into()));
        }
        if self.trial_times.iter().any(|&t| !(t > 0.0)) {
            return Err(AnalysisError::InvalidSpec("trial times must be positive".into()));
        }
        if self.fme_thresholds.is_empty() || self.rho_grid.is_empty() || self.trial_times.is_empty()
        {
            return Err(AnalysisError::InvalidSpec("empty satisficing grid".into()));
        }
        if self.replicates < 2 {
            return Err(AnalysisError::InvalidSpec("need at least 2 replicates".into()));
        }
        Ok(())
    }
}

/// One point of the success-probability surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisficingCell {
    pub fme_threshold: f64,
    pub trial_time: f64,
    pub rho_x: f64,
    #[serde(flatten)]
    pub estimate: SuccessEstimate,
}

/// For each (trial time, threshold): fixed-duration experiments whose
/// forward learning freezes once the end-of-trial FME reaches the
/// threshold; success is evaluated on the final trial at every radius of
/// the grid. Replicate seeds are shared across thresholds and radii
/// (common random numbers).
pub fn satisficing_study(
    spec: &SatisficingSpec,
    env: &Environment,
    params: &ModelParams,
    config: &TaskConfig,
) -> Result<Vec<SatisficingCell>, AnalysisError> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (ti, &trial_time) in spec.trial_times.iter().enumerate() {
        for &threshold in &spec.fme_thresholds {
            let finals: Result<Vec<TrialRecord>, TaskError> = (0..spec.replicates)
                .into_par_iter()
                .map(|r| {
                    let mut cfg = config.clone();
                    cfg.trial_mode = TrialMode::Fixed { duration: trial_time };
                    cfg.seed = derive_seed2(spec.seed, ti as u64, r as u64);
                    let options = ExperimentOptions {
                        keep_trajectories: true,
                        freeze_below_fme: Some(threshold),
                        ..ExperimentOptions::default()
                    };
                    let mut record = run_experiment(env, params, &cfg, &options)?;
                    Ok(record.sessions.pop().unwrap().pop().unwrap())
                })
                .collect();
            let finals = finals?;
            let refs: Vec<&TrialRecord> = finals.iter().collect();
            for &rho in &spec.rho_grid {
                let estimate = success_probability(&refs, rho, trial_time, params.dt)
                    .expect("non-empty replicate set");
                cells.push(SatisficingCell { fme_threshold: threshold, trial_time, rho_x: rho, estimate });
            }
        }
    }
    Ok(cells)
}

/// Flexibility study request: synergy counts against exploration noise,
/// with a mapping that does not lie in the synergy span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilitySpec {
    pub h_grid: Vec<usize>,
    pub sigma_u_grid: Vec<f64>,
    pub joints: usize,
    pub replicates: usize,
    /// Forward model error is read at the end of this session.
    pub eval_sessions: usize,
    /// Seed of the random out-of-span mapping and synergy basis.
    pub env_seed: u64,
    pub seed: u64,
}

impl Default for FlexibilitySpec {
    fn default() -> Self {
        Self {
            h_grid: vec![1, 2, 4, 7, 10, 14, 19],
            sigma_u_grid: vec![0.02, 0.05, 0.1, 0.8764, 2.0],
            joints: 19,
            replicates: 128,
            eval_sessions: 4,
            env_seed: 42,
            seed: 0,
        }
    }
}

/// One cell of the flexibility grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityCell {
    pub h: usize,
    pub sigma_u: f64,
    pub mean_fme: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Projection lower bound ||C - C Phi^T Phi||_2 / ||C||_2.
    pub residual_bound: f64,
    pub n: usize,
}

/// Mean end-of-session FME per (h, sigma_u) cell. The random mapping and
/// the nested synergy basis are shared across the whole grid.
pub fn flexibility_study(
    spec: &FlexibilitySpec,
    params: &ModelParams,
    config: &TaskConfig,
) -> Result<Vec<FlexibilityCell>, AnalysisError> {
    if spec.h_grid.is_empty() || spec.sigma_u_grid.is_empty() {
        return Err(AnalysisError::InvalidSpec("empty flexibility grid".into()));
    }
    if spec.h_grid.iter().any(|&h| h == 0 || h > spec.joints) {
        return Err(AnalysisError::InvalidSpec("synergy counts must lie in 1..=joints".into()));
    }
    let mut cells = Vec::new();
    for (hi, &h) in spec.h_grid.iter().enumerate() {
        let env = out_of_span_env(spec.env_seed, spec.joints, h);
        for (si, &sigma_u) in spec.sigma_u_grid.iter().enumerate() {
            let mut params_cell = params.clone();
            params_cell.sigma_u = sigma_u;
            let fmes: Result<Vec<f64>, TaskError> = (0..spec.replicates)
                .into_par_iter()
                .map(|r| {
                    let mut cfg = config.clone();
                    cfg.sessions = spec.eval_sessions;
                    cfg.seed = derive_seed2(spec.seed, (hi * 100 + si) as u64, r as u64);
                    let record =
                        run_experiment(&env, &params_cell, &cfg, &ExperimentOptions::default())?;
                    Ok(record.metrics.last().unwrap().metrics.fme)
                })
                .collect();
            let fmes = fmes?;
            let (mean, lo, hi_ci) = mean_ci95(&fmes);
            cells.push(FlexibilityCell {
                h,
                sigma_u,
                mean_fme: mean,
                ci_lo: lo,
                ci_hi: hi_ci,
                residual_bound: env.representation_residual(),
                n: fmes.len(),
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::default_env;
    use approx::assert_relative_eq;

    #[test]
    fn paired_t_reference_cases() {
        let a = [1.0, 2.0, 3.0];
        let t = paired_t_test(&a, &a, Tail::Upper).unwrap();
        assert_eq!(t.t, 0.0);
        assert_eq!(t.p, 0.5);
        assert!(!t.degenerate);

        // Constant nonzero differences: degenerate flag.
        let b = [0.0, 1.0, 2.0];
        let t = paired_t_test(&a, &b, Tail::Upper).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p, 0.0);
        let t = paired_t_test(&a, &b, Tail::Lower).unwrap();
        assert_eq!(t.p, 1.0);

        // Textbook evaluation: d = (1.2, 0.8, 1.1, 0.9, 1.0).
        let x = [1.2, 0.8, 1.1, 0.9, 1.0];
        let zeros = [0.0; 5];
        let t = paired_t_test(&x, &zeros, Tail::Upper).unwrap();
        assert_relative_eq!(t.t, 14.142135623730951, max_relative = 1e-10);
        assert!(t.p < 0.001, "p = {}", t.p);

        assert!(paired_t_test(&a, &zeros[..2], Tail::Upper).is_err());
        assert!(paired_t_test(&[1.0], &[1.0], Tail::Upper).is_err());
    }

    #[test]
    fn paired_t_is_antisymmetric() {
        let a = [0.3, 1.7, -0.4, 2.2, 0.9, 1.1];
        let b = [0.1, 1.9, 0.3, 1.8, 0.2, 0.8];
        let up = paired_t_test(&a, &b, Tail::Upper).unwrap();
        let down = paired_t_test(&b, &a, Tail::Lower).unwrap();
        assert_eq!(up.p.to_bits(), down.p.to_bits());
        assert_eq!(up.t.to_bits(), (-down.t).to_bits());
    }

    #[test]
    fn unknown_sweep_parameter_is_rejected() {
        assert!(matches!(
            "rho_x".parse::<SweepParam>(),
            Err(AnalysisError::UnknownParameter(_))
        ));
        assert_eq!("k_p".parse::<SweepParam>().unwrap(), SweepParam::KP);
    }

    #[test]
    fn sweep_is_reproducible_and_shaped() {
        let env = default_env(1);
        let params = ModelParams::subject(1);
        let mut config = TaskConfig::default();
        config.sessions = 1;
        config.trials_per_session = 6;
        let spec = SweepSpec {
            param: SweepParam::Eta,
            grid: vec![1.0, 4.0],
            replicates: 3,
            seed: 5,
        };
        let out1 = sweep(&spec, &env, &params, &config).unwrap();
        let out2 = sweep(&spec, &env, &params, &config).unwrap();
        assert_eq!(out1.cells.len(), 2);
        assert_eq!(out1.cells[0].len(), 3);
        assert_eq!(out1.cells[0][0].len(), 6);
        for (a, b) in out1.cells.iter().flatten().flatten().zip(out2.cells.iter().flatten().flatten()) {
            assert_eq!(a, b);
        }
        let rows = out1.aggregate();
        assert!(rows.iter().any(|r| r.metric == "driving"));
        // CI brackets the mean.
        for r in &rows {
            assert!(r.ci_lo <= r.mean && r.mean <= r.ci_hi);
        }
    }

    #[test]
    fn satisficing_smoke_and_monotone_radius() {
        let env = default_env(1);
        let params = ModelParams::subject(1);
        let config = TaskConfig::default();
        let spec = SatisficingSpec {
            fme_thresholds: vec![0.5, 1.0],
            rho_grid: vec![0.5, 2.0, 8.0],
            trial_times: vec![0.6],
            replicates: 8,
            seed: 3,
        };
        let mut small = config.clone();
        small.sessions = 2;
        small.trials_per_session = 10;
        let cells = satisficing_study(&spec, &env, &params, &small).unwrap();
        assert_eq!(cells.len(), 2 * 3);
        // Success is monotone in the radius at fixed threshold.
        for thr in [0.5, 1.0] {
            let ps: Vec<f64> = cells
                .iter()
                .filter(|c| c.fme_threshold == thr)
                .map(|c| c.estimate.p)
                .collect();
            assert!(ps.windows(2).all(|w| w[1] >= w[0]), "{ps:?}");
        }
    }

    #[test]
    fn flexibility_complete_basis_has_zero_residual() {
        let params = ModelParams::subject(1);
        let config = TaskConfig::default();
        let spec = FlexibilitySpec {
            h_grid: vec![2, 19],
            sigma_u_grid: vec![0.8764],
            replicates: 4,
            eval_sessions: 1,
            ..FlexibilitySpec::default()
        };
        let cells = flexibility_study(&spec, &params, &config).unwrap();
        let full = cells.iter().find(|c| c.h == 19).unwrap();
        assert!(full.residual_bound < 1e-10);
        let partial = cells.iter().find(|c| c.h == 2).unwrap();
        assert!(partial.residual_bound > 0.1);
        // Projection lower bound holds for every cell.
        for c in &cells {
            assert!(c.mean_fme >= c.residual_bound - 1e-9);
        }
    }

    #[test]
    fn ci_width_shrinks_with_more_replicates() {
        // One sweep cell at 128 and 512 replicates: the mean confidence
        // interval width must shrink roughly like 1/sqrt(n).
        let env = default_env(1);
        let params = ModelParams::subject(1);
        let mut config = TaskConfig::default();
        config.sessions = 1;
        config.trials_per_session = 10;
        let width = |replicates: usize| {
            let spec = SweepSpec {
                param: SweepParam::Eta,
                grid: vec![3.1742],
                replicates,
                seed: 99,
            };
            let rows = sweep(&spec, &env, &params, &config).unwrap().aggregate();
            let widths: Vec<f64> = rows
                .iter()
                .filter(|r| r.metric == "re")
                .map(|r| r.ci_hi - r.ci_lo)
                .collect();
            widths.iter().sum::<f64>() / widths.len() as f64
        };
        let w128 = width(128);
        let w512 = width(512);
        assert!(
            w512 < w128,
            "CI width did not shrink: {w128} at 128 reps vs {w512} at 512"
        );
        // Close to the 1/sqrt(4) = 0.5 theoretical factor.
        assert!(w512 / w128 < 0.7, "shrink factor {}", w512 / w128);
    }
}
