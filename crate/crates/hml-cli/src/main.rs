//! `hml` — reproducible pipelines around the motor learning toolkit:
//! calibration, simulation, NSGA-II fitting, Monte Carlo trade-off
//! studies, theory verification, and plot-data export.
//!
//! Every command accepts `--seed` and `--threads`, writes its primary
//! outputs plus a `manifest.json` with input/output digests, and is
//! byte-deterministic for a fixed seed under any thread count. Exit codes:
//! 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use hml_core::analysis::{
    flexibility_study, satisficing_study, sweep, FlexibilitySpec, SatisficingSpec, SweepParam,
    SweepSpec,
};
use hml_core::fitting::{fit, FitConfig, ParamBounds, ReferenceData};
use hml_core::io;
use hml_core::model::{Environment, ModelParams};
use hml_core::synergy::{build_mapping, extract_synergies, fit_pca, DEFAULT_SYNERGY_COUNT};
use hml_core::synthetic::{gen_postures, DEFAULT_JOINT_COUNT};
use hml_core::task::{run_experiment, ExperimentOptions, TaskConfig, TrialMode};

mod verify;

#[derive(Parser)]
#[command(name = "hml", version, about = "Motor learning simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed for all randomness in this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic free-movement posture recording.
    GenPostures {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_JOINT_COUNT)]
        joints: usize,
    },
    /// PCA-calibrate a posture recording into a mapping + synergy bundle.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Posture CSV (time column followed by joint angles).
        #[arg(long)]
        postures: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of synergies kept in the basis.
        #[arg(long, default_value_t = DEFAULT_SYNERGY_COUNT)]
        synergies: usize,
    },
    /// Run the target-capture experiment and persist metrics (and
    /// optionally trajectories).
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Calibration bundle directory.
        #[arg(long)]
        calib: PathBuf,
        /// Model parameter JSON.
        #[arg(long)]
        params: PathBuf,
        /// Output experiment directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sessions: usize,
        #[arg(long, default_value_t = 60)]
        trials: usize,
        /// Write per-trial trajectory CSVs.
        #[arg(long)]
        trajectories: bool,
        /// Sample stride for trajectory CSVs.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Fixed trial duration in seconds instead of capture-terminated
        /// trials.
        #[arg(long)]
        fixed_duration: Option<f64>,
        /// Target radius override.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Fit model parameters to a per-trial metrics table with NSGA-II.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Reference metrics.csv (as written by simulate).
        #[arg(long)]
        data: PathBuf,
        /// Calibration posture CSV of the same subject.
        #[arg(long)]
        calib: PathBuf,
        /// Output fit JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 100)]
        pop: usize,
        #[arg(long, default_value_t = 500)]
        generations: usize,
        #[arg(long, default_value_t = DEFAULT_SYNERGY_COUNT)]
        synergies: usize,
    },
    /// Monte Carlo sweep of one model parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter name: gamma, eta, mu, k_p, sigma_u, sigma_q.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values; defaults to a log grid bracketing
        /// the base value by x/÷ 4.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 128)]
        replicates: usize,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sessions: usize,
        #[arg(long, default_value_t = 60)]
        trials: usize,
    },
    /// Success-probability surface with learning frozen below an FME
    /// threshold.
    Satisficing {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated FME thresholds in (0, 1].
        #[arg(long)]
        thresholds: Option<String>,
        /// Comma-separated target radii.
        #[arg(long)]
        rho: Option<String>,
        /// Comma-separated trial times in seconds.
        #[arg(long)]
        times: Option<String>,
        #[arg(long, default_value_t = 1280)]
        replicates: usize,
    },
    /// End-of-session forward model error across synergy counts and
    /// exploration noise, with an out-of-span mapping.
    Flexibility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated synergy counts.
        #[arg(long)]
        h_grid: Option<String>,
        /// Comma-separated exploration noise intensities.
        #[arg(long)]
        sigma_u: Option<String>,
        #[arg(long, default_value_t = DEFAULT_JOINT_COUNT)]
        joints: usize,
        #[arg(long, default_value_t = 128)]
        replicates: usize,
        /// Seed of the random out-of-span mapping.
        #[arg(long, default_value_t = 42)]
        env_seed: u64,
    },
    /// Numerically verify the convergence theory.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite: all, theta_c, pe, convergence, timescale.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Optional calibration bundle; a synthetic subject is used
        /// otherwise.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Melt any toolkit CSV into long row,column,value format.
    EmitPlotdata {
        #[command(flatten)]
        common: Common,
        /// Input CSV.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Domain failures exit 1; bad invocations exit 2.
enum CliError {
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn init_threads(common: &Common) {
    if common.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global();
    }
}

fn parse_grid(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|v| v.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("cannot parse {what} grid from {text:?}"))),
    }
}

fn parse_usize_grid(text: &str, what: &str) -> Result<Vec<usize>, CliError> {
    let values: Result<Vec<usize>, _> = text.split(',').map(|v| v.trim().parse::<usize>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("cannot parse {what} grid from {text:?}"))),
    }
}

/// Load a calibration bundle into an environment.
fn env_from_bundle(dir: &Path) -> Result<(Environment, Vec<PathBuf>), CliError> {
    let (_, mapping, synergies) = io::load_calibration(dir)?;
    let inputs = vec![dir.join(io::PCA_FILE), dir.join(io::MAPPING_FILE), dir.join(io::SYNERGY_FILE)];
    let env = Environment::new(mapping, synergies).map_err(anyhow::Error::from)?;
    Ok((env, inputs))
}

struct ManifestBuilder {
    started: Instant,
    command_line: Vec<String>,
    seed: u64,
    config_snapshot: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    fn new(seed: u64, config_snapshot: serde_json::Value) -> Self {
        Self {
            started: Instant::now(),
            command_line: std::env::args().collect(),
            seed,
            config_snapshot,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    fn inputs(&mut self, paths: &[PathBuf]) -> &mut Self {
        self.inputs.extend_from_slice(paths);
        self
    }

    fn outputs(&mut self, paths: &[PathBuf]) -> &mut Self {
        self.outputs.extend_from_slice(paths);
        self
    }

    /// Write manifest.json next to the outputs: into `anchor` when it is a
    /// directory, alongside it otherwise.
    fn finish(self, anchor: &Path) -> Result<(), CliError> {
        let manifest = io::RunManifest {
            command_line: self.command_line,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: self.seed,
            config_snapshot: self.config_snapshot,
            inputs: io::RunManifest::digest_files(&self.inputs)?,
            outputs: io::RunManifest::digest_files(&self.outputs)?,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            let name = anchor
                .file_name()
                .map(|n| format!("{}.manifest.json", n.to_string_lossy()))
                .unwrap_or_else(|| "manifest.json".into());
            anchor.with_file_name(name)
        };
        manifest.save(&path)?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenPostures { common, out, samples, joints } => {
            init_threads(&common);
            if joints == 0 || samples <= joints {
                return Err(CliError::Usage("need samples > joints >= 1".into()));
            }
            let mut manifest = ManifestBuilder::new(
                common.seed,
                serde_json::json!({"samples": samples, "joints": joints}),
            );
            let postures = gen_postures(common.seed, samples, joints);
            io::write_postures_csv(&out, &postures)?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!("wrote {} samples x {} joints to {}", samples, joints, out.display());
            Ok(())
        }

        Command::Calibrate { common, postures, out, synergies } => {
            init_threads(&common);
            let mut manifest = ManifestBuilder::new(
                common.seed,
                serde_json::json!({"synergies": synergies, "postures": postures.display().to_string()}),
            );
            manifest.input(&postures);
            let series = io::read_postures_csv(&postures)?;
            let pca = fit_pca(&series).map_err(anyhow::Error::from)?;
            let mapping = build_mapping(&pca).map_err(anyhow::Error::from)?;
            let basis = extract_synergies(&pca, synergies).map_err(anyhow::Error::from)?;
            let written = io::save_calibration(&out, &pca, &mapping, &basis)?;
            manifest.outputs(&written);
            manifest.finish(&out)?;
            println!(
                "calibrated m={} joints: mapping n={}, synergies h={} -> {}",
                series.joint_count(),
                mapping.cursor_dim(),
                basis.count(),
                out.display()
            );
            Ok(())
        }

        Command::Simulate {
            common,
            calib,
            params,
            out,
            sessions,
            trials,
            trajectories,
            stride,
            fixed_duration,
            rho,
        } => {
            init_threads(&common);
            let (env, calib_inputs) = env_from_bundle(&calib)?;
            let model_params = io::load_params(&params)?;
            let mut config = TaskConfig::default();
            config.sessions = sessions;
            config.trials_per_session = trials;
            config.seed = common.seed;
            config.rho_x = rho.unwrap_or(model_params.rho_x);
            if let Some(duration) = fixed_duration {
                config.trial_mode = TrialMode::Fixed { duration };
            }
            let mut manifest =
                ManifestBuilder::new(common.seed, serde_json::to_value(&config)?);
            manifest.inputs(&calib_inputs);
            manifest.input(&params);

            let options = ExperimentOptions {
                keep_trajectories: trajectories,
                sample_fme: trajectories,
                ..ExperimentOptions::default()
            };
            let record =
                run_experiment(&env, &model_params, &config, &options).map_err(anyhow::Error::from)?;
            let written = io::save_experiment(&out, &record, trajectories, stride)?;
            manifest.outputs(&written);
            manifest.finish(&out)?;
            let captured = record.metrics.iter().filter(|r| r.metrics.captured).count();
            println!(
                "simulated {} trials ({} captured) -> {}",
                record.metrics.len(),
                captured,
                out.display()
            );
            Ok(())
        }

        Command::Fit { common, data, calib, out, runs, pop, generations, synergies } => {
            init_threads(&common);
            if pop < 4 || pop % 2 != 0 {
                return Err(CliError::Usage("population must be even and at least 4".into()));
            }
            if runs == 0 || generations == 0 {
                return Err(CliError::Usage("runs and generations must be at least 1".into()));
            }
            let mut manifest = ManifestBuilder::new(
                common.seed,
                serde_json::json!({"runs": runs, "pop": pop, "generations": generations}),
            );
            manifest.input(&data);
            manifest.input(&calib);

            let series = io::read_postures_csv(&calib)?;
            let pca = fit_pca(&series).map_err(anyhow::Error::from)?;
            let mapping = build_mapping(&pca).map_err(anyhow::Error::from)?;
            let basis = extract_synergies(&pca, synergies).map_err(anyhow::Error::from)?;
            let env = Environment::new(mapping, basis).map_err(anyhow::Error::from)?;

            let rows = io::read_metrics_csv(&data)?;
            if rows.is_empty() {
                return Err(CliError::Usage(format!("no metric rows in {}", data.display())));
            }
            let sessions = rows.iter().map(|r| r.session).max().unwrap() + 1;
            let trials_per_session = rows.iter().map(|r| r.trial).max().unwrap() + 1;
            if rows.len() != sessions * trials_per_session {
                return Err(CliError::Usage(format!(
                    "metrics table is not a full {}x{} session/trial grid",
                    sessions, trials_per_session
                )));
            }
            let reference = ReferenceData {
                sessions,
                trials_per_session,
                re: rows.iter().map(|r| r.metrics.re).collect(),
                sot: rows.iter().map(|r| r.metrics.sot).collect(),
                durations: rows.iter().map(|r| r.metrics.speed).collect(),
            };

            let base_params = ModelParams::default();
            let config = TaskConfig::default();
            let fit_cfg = FitConfig {
                population: pop,
                generations,
                runs,
                ..FitConfig::default()
            };
            let result = fit(
                &reference,
                &env,
                &base_params,
                &config,
                &ParamBounds::default(),
                &fit_cfg,
                common.seed,
            )
            .map_err(anyhow::Error::from)?;
            io::write_atomic(&out, serde_json::to_vec_pretty(&result)?.as_slice())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!(
                "fit complete: {} evaluations, chosen gamma={:.4} eta={:.4} mu={:.4} k_p={:.4} sigma_u={:.4} sigma_q={:.4}{}",
                result.provenance.evaluations,
                result.chosen.gamma,
                result.chosen.eta,
                result.chosen.mu,
                result.chosen.k_p,
                result.chosen.sigma_u,
                result.chosen.sigma_q,
                if result.provenance.fallback { " (fallback selection)" } else { "" }
            );
            Ok(())
        }

        Command::Sweep {
            common,
            param,
            grid,
            replicates,
            calib,
            params,
            out,
            sessions,
            trials,
        } => {
            init_threads(&common);
            let sweep_param: SweepParam = param
                .parse()
                .map_err(|e: hml_core::analysis::AnalysisError| CliError::Usage(e.to_string()))?;
            let (env, calib_inputs) = env_from_bundle(&calib)?;
            let base_params = io::load_params(&params)?;
            let base_value = match sweep_param {
                SweepParam::Gamma => base_params.gamma,
                SweepParam::Eta => base_params.eta,
                SweepParam::Mu => base_params.mu,
                SweepParam::KP => base_params.k_p,
                SweepParam::SigmaU => base_params.sigma_u,
                SweepParam::SigmaQ => base_params.sigma_q,
            };
            let grid = match grid {
                Some(text) => parse_grid(&text, "sweep")?,
                None => sweep_param.default_grid(base_value),
            };
            let spec = SweepSpec { param: sweep_param, grid, replicates, seed: common.seed };
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;

            let mut config = TaskConfig::default();
            config.sessions = sessions;
            config.trials_per_session = trials;
            config.rho_x = base_params.rho_x;
            let mut manifest = ManifestBuilder::new(common.seed, serde_json::to_value(&spec)?);
            manifest.inputs(&calib_inputs);
            manifest.input(&params);

            let output = sweep(&spec, &env, &base_params, &config).map_err(anyhow::Error::from)?;
            io::write_atomic(&out, io::sweep_csv_string(&output.aggregate()).as_bytes())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!(
                "swept {} over {} values x {} replicates -> {}",
                spec.param.name(),
                spec.grid.len(),
                replicates,
                out.display()
            );
            Ok(())
        }

        Command::Satisficing { common, calib, params, out, thresholds, rho, times, replicates } => {
            init_threads(&common);
            let (env, calib_inputs) = env_from_bundle(&calib)?;
            let base_params = io::load_params(&params)?;
            let mut spec = SatisficingSpec { replicates, seed: common.seed, ..SatisficingSpec::default() };
            if let Some(text) = thresholds {
                spec.fme_thresholds = parse_grid(&text, "threshold")?;
            }
            if let Some(text) = rho {
                spec.rho_grid = parse_grid(&text, "rho")?;
            }
            if let Some(text) = times {
                spec.trial_times = parse_grid(&text, "trial-time")?;
            }
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;

            let config = TaskConfig { rho_x: base_params.rho_x, ..TaskConfig::default() };
            let mut manifest = ManifestBuilder::new(common.seed, serde_json::to_value(&spec)?);
            manifest.inputs(&calib_inputs);
            manifest.input(&params);
            let cells =
                satisficing_study(&spec, &env, &base_params, &config).map_err(anyhow::Error::from)?;
            io::write_atomic(&out, io::satisficing_csv_string(&cells).as_bytes())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!("satisficing surface: {} cells -> {}", cells.len(), out.display());
            Ok(())
        }

        Command::Flexibility {
            common,
            params,
            out,
            h_grid,
            sigma_u,
            joints,
            replicates,
            env_seed,
        } => {
            init_threads(&common);
            let base_params = io::load_params(&params)?;
            let mut spec = FlexibilitySpec {
                joints,
                replicates,
                env_seed,
                seed: common.seed,
                ..FlexibilitySpec::default()
            };
            if let Some(text) = h_grid {
                spec.h_grid = parse_usize_grid(&text, "synergy-count")?;
            }
            if let Some(text) = sigma_u {
                spec.sigma_u_grid = parse_grid(&text, "sigma_u")?;
            }
            if spec.h_grid.iter().any(|&h| h == 0 || h > joints) {
                return Err(CliError::Usage(format!(
                    "synergy counts must lie in 1..={joints}"
                )));
            }
            let config = TaskConfig { rho_x: base_params.rho_x, ..TaskConfig::default() };
            let mut manifest = ManifestBuilder::new(common.seed, serde_json::to_value(&spec)?);
            manifest.input(&params);
            let cells =
                flexibility_study(&spec, &base_params, &config).map_err(anyhow::Error::from)?;
            io::write_atomic(&out, io::flexibility_csv_string(&cells).as_bytes())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!("flexibility grid: {} cells -> {}", cells.len(), out.display());
            Ok(())
        }

        Command::Verify { common, suite, out, calib } => {
            init_threads(&common);
            let env = match &calib {
                Some(dir) => env_from_bundle(dir)?.0,
                None => hml_core::synthetic::default_env(common.seed ^ 0x5EED),
            };
            let report = verify::run_suites(&suite, &env, common.seed)
                .map_err(CliError::Usage)?;
            let mut manifest = ManifestBuilder::new(
                common.seed,
                serde_json::json!({"suite": suite}),
            );
            io::write_atomic(&out, serde_json::to_vec_pretty(&report)?.as_slice())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            for check in &report.checks {
                println!("{} {}", if check.pass { "PASS" } else { "FAIL" }, check.name);
            }
            if report.checks.iter().all(|c| c.pass) {
                Ok(())
            } else {
                Err(CliError::Domain(anyhow::anyhow!("verification checks failed")))
            }
        }

        Command::EmitPlotdata { common, input, out } => {
            init_threads(&common);
            let mut manifest = ManifestBuilder::new(common.seed, serde_json::Value::Null);
            manifest.input(&input);
            let text = std::fs::read_to_string(&input).map_err(anyhow::Error::from)?;
            let melted = io::melt_csv(&text)?;
            io::write_atomic(&out, melted.as_bytes())?;
            manifest.outputs(&[out.clone()]);
            manifest.finish(&out)?;
            println!("melted {} -> {}", input.display(), out.display());
            Ok(())
        }
    }
}

