//! NSGA-II parameter recovery from per-trial metric sequences.
//!
//! The genome is the six searched scalars (gamma, eta, mu, k_p, sigma_u,
//! sigma_q); the perceptual recency parameter stays fixed at 10. The two
//! objectives are Euclidean norms of the differences between 10-trial
//! moving averages of the model's and the reference's per-trial reaching
//! error and straightness, with the model simulated at the reference's own
//! per-trial durations.
//!
//! Determinism: every evaluation seed derives from (run seed, generation,
//! slot index), evaluations are merged by slot index, and each individual
//! is evaluated exactly once when created. Parallel evaluation cannot
//! change any result.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::moving_average;
use crate::model::{Environment, ModelParams};
use crate::rng::{derive_seed2, rng_from_seed};
use crate::task::{run_experiment, ExperimentOptions, TaskConfig, TrialMode};

/// Searched parameters, in genome order.
pub const GENE_NAMES: [&str; 6] = ["gamma", "eta", "mu", "k_p", "sigma_u", "sigma_q"];
pub const GENOME_LEN: usize = 6;

/// Window of the moving average applied to both metric sequences before
/// the objective norms.
pub const OBJECTIVE_SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no runs supplied to select_fit")]
    EmptyRuns,
    #[error("reference data is empty")]
    EmptyReference,
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

/// Per-parameter search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lo: [f64; GENOME_LEN],
    pub hi: [f64; GENOME_LEN],
}

impl Default for ParamBounds {
    /// Brackets all fitted parameter sets with margin.
    fn default() -> Self {
        Self {
            lo: [1e-4, 0.1, 0.1, 0.1, 0.01, 1e-3],
            hi: [1.0, 10.0, 10.0, 10.0, 5.0, 2.0],
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<(), FitError> {
        for i in 0..GENOME_LEN {
            if !(self.lo[i] < self.hi[i]) {
                return Err(FitError::InvalidBounds(format!(
                    "{}: low {} must be below high {}",
                    GENE_NAMES[i], self.lo[i], self.hi[i]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, genome: &[f64; GENOME_LEN]) -> bool {
        genome
            .iter()
            .enumerate()
            .all(|(i, &g)| g >= self.lo[i] && g <= self.hi[i])
    }
}

/// One candidate parameter set with its evaluated objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: [f64; GENOME_LEN],
    /// (f_RE, f_SoT).
    pub objectives: [f64; 2],
    pub rank: usize,
    pub crowding: f64,
}

/// Reference per-trial sequences the model is fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceData {
    pub sessions: usize,
    pub trials_per_session: usize,
    pub re: Vec<f64>,
    pub sot: Vec<f64>,
    /// Duration of each reference trial in seconds; the simulated trials
    /// are forced to these durations.
    pub durations: Vec<f64>,
}

impl ReferenceData {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let n = self.sessions * self.trials_per_session;
        if n == 0 || self.re.len() != n || self.sot.len() != n || self.durations.len() != n {
            return Err(FitError::EmptyReference);
        }
        Ok(())
    }
}

/// Algorithm settings (population size must be even).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub eta_c: f64,
    pub eta_m: f64,
    pub runs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            population: 100,
            generations: 500,
            crossover_rate: 0.7,
            mutation_rate: 0.2,
            eta_c: 15.0,
            eta_m: 20.0,
            runs: 10,
        }
    }
}

/// Provenance of a finished fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub master_seed: u64,
    pub run_seeds: Vec<u64>,
    pub config: FitConfig,
    pub evaluations: u64,
    /// Set when no pooled candidate satisfied the straightness constraint
    /// and the global minimum-f_RE candidate was chosen instead.
    pub fallback: bool,
}

/// Outcome of `fit`: pooled Pareto front, the selected parameters, and
/// provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pareto_front: Vec<Individual>,
    pub chosen_genome: [f64; GENOME_LEN],
    pub chosen: ModelParams,
    pub provenance: FitProvenance,
}

/// Expand a genome into full model parameters, taking the simulation
/// constants from `base`.
pub fn params_from_genome(genome: &[f64; GENOME_LEN], base: &ModelParams) -> ModelParams {
    ModelParams {
        gamma: genome[0],
        eta: genome[1],
        mu: genome[2],
        k_p: genome[3],
        sigma_u: genome[4],
        sigma_q: genome[5],
        a: base.a,
        dt: base.dt,
        rho_x: base.rho_x,
        w0_scale: base.w0_scale,
    }
}

/// Norm of the difference between smoothed sequences; non-finite entries
/// (degenerate-chord straightness) contribute zero.
fn smoothed_l2(model: &[f64], data: &[f64]) -> f64 {
    let ma_model = moving_average(model, OBJECTIVE_SMOOTHING_WINDOW);
    let ma_data = moving_average(data, OBJECTIVE_SMOOTHING_WINDOW);
    let mut sum = 0.0;
    for (m, d) in ma_model.iter().zip(&ma_data) {
        let diff = m - d;
        if diff.is_finite() {
            sum += diff * diff;
        }
    }
    sum.sqrt()
}

/// Evaluate the fitting objectives (f_RE, f_SoT) for one parameter set.
/// A diverged simulation returns infinite objectives, dominated by every
/// finite candidate.
pub fn objectives(
    params: &ModelParams,
    reference: &ReferenceData,
    env: &Environment,
    base_config: &TaskConfig,
    eval_seed: u64,
) -> [f64; 2] {
    let mut config = base_config.clone();
    config.sessions = reference.sessions;
    config.trials_per_session = reference.trials_per_session;
    config.seed = eval_seed;
    config.trial_mode = TrialMode::Fixed { duration: 1.0 }; // superseded by the schedule
    let options = ExperimentOptions {
        schedule: Some(reference.durations.clone()),
        ..ExperimentOptions::default()
    };
    match run_experiment(env, params, &config, &options) {
        Ok(record) => {
            let re: Vec<f64> = record.metrics.iter().map(|r| r.metrics.re).collect();
            let sot: Vec<f64> = record.metrics.iter().map(|r| r.metrics.sot).collect();
            [smoothed_l2(&re, &reference.re), smoothed_l2(&sot, &reference.sot)]
        }
        Err(_) => [f64::INFINITY, f64::INFINITY],
    }
}

/// `a` dominates `b`: no worse in both objectives, strictly better in one.
fn dominates(a: &[f64; 2], b: &[f64; 2]) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Fast non-dominated sort; returns fronts of indices, best first.
pub fn nondominated_sort(objectives: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    let mut first = Vec::new();

    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            if dominates(&objectives[p], &objectives[q]) {
                dominated_by[p].push(q);
            } else if dominates(&objectives[q], &objectives[p]) {
                domination_count[p] += 1;
            }
        }
        if domination_count[p] == 0 {
            first.push(p);
        }
    }

    fronts.push(first);
    let mut i = 0;
    while !fronts[i].is_empty() {
        let mut next = Vec::new();
        for &p in &fronts[i] {
            for &q in &dominated_by[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        i += 1;
        fronts.push(next);
    }
    fronts.pop();
    fronts
}

/// Crowding distance per front member: boundary individuals per objective
/// get infinity, interior ones sum normalized neighbor gaps. A degenerate
/// objective (zero range) contributes nothing.
pub fn crowding_distance(front: &[[f64; 2]]) -> Vec<f64> {
    let n = front.len();
    if n == 0 {
        return Vec::new();
    }
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut distance = vec![0.0f64; n];
    for obj in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][obj].partial_cmp(&front[b][obj]).unwrap());
        let lo = front[order[0]][obj];
        let hi = front[order[n - 1]][obj];
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 || !range.is_finite() {
            continue;
        }
        for k in 1..n - 1 {
            let gap = front[order[k + 1]][obj] - front[order[k - 1]][obj];
            distance[order[k]] += gap / range;
        }
    }
    distance
}

/// Simulated binary crossover (bounded). With the crossover not triggered
/// or coincident parents, children equal parents.
pub fn sbx_crossover(
    p1: &[f64; GENOME_LEN],
    p2: &[f64; GENOME_LEN],
    bounds: &ParamBounds,
    rate: f64,
    eta_c: f64,
    rng: &mut ChaCha8Rng,
) -> ([f64; GENOME_LEN], [f64; GENOME_LEN]) {
    let mut c1 = *p1;
    let mut c2 = *p2;
    if rng.gen::<f64>() > rate {
        return (c1, c2);
    }
    for i in 0..GENOME_LEN {
        if rng.gen::<f64>() > 0.5 {
            continue;
        }
        let (y1, y2) = if p1[i] <= p2[i] { (p1[i], p2[i]) } else { (p2[i], p1[i]) };
        if y2 - y1 < 1e-14 {
            continue;
        }
        let (lo, hi) = (bounds.lo[i], bounds.hi[i]);
        let r: f64 = rng.gen();
        let exp = 1.0 / (eta_c + 1.0);

        let beta = 1.0 + 2.0 * (y1 - lo) / (y2 - y1);
        let alpha = 2.0 - beta.powf(-(eta_c + 1.0));
        let betaq = if r <= 1.0 / alpha {
            (r * alpha).powf(exp)
        } else {
            (1.0 / (2.0 - r * alpha)).powf(exp)
        };
        let mut child1 = 0.5 * ((y1 + y2) - betaq * (y2 - y1));

        let beta = 1.0 + 2.0 * (hi - y2) / (y2 - y1);
        let alpha = 2.0 - beta.powf(-(eta_c + 1.0));
        let betaq = if r <= 1.0 / alpha {
            (r * alpha).powf(exp)
        } else {
            (1.0 / (2.0 - r * alpha)).powf(exp)
        };
        let mut child2 = 0.5 * ((y1 + y2) + betaq * (y2 - y1));

        child1 = child1.clamp(lo, hi);
        child2 = child2.clamp(lo, hi);
        if rng.gen::<f64>() <= 0.5 {
            std::mem::swap(&mut child1, &mut child2);
        }
        c1[i] = child1;
        c2[i] = child2;
    }
    (c1, c2)
}

/// Polynomial mutation (bounded), applied per gene with probability
/// `rate`.
pub fn polynomial_mutation(
    genome: &[f64; GENOME_LEN],
    bounds: &ParamBounds,
    rate: f64,
    eta_m: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; GENOME_LEN] {
    let mut out = *genome;
    for i in 0..GENOME_LEN {
        if rng.gen::<f64>() >= rate {
            continue;
        }
        let (lo, hi) = (bounds.lo[i], bounds.hi[i]);
        let range = hi - lo;
        let y = out[i];
        let delta1 = (y - lo) / range;
        let delta2 = (hi - y) / range;
        let r: f64 = rng.gen();
        let mut_pow = 1.0 / (eta_m + 1.0);
        let deltaq = if r < 0.5 {
            let xy = 1.0 - delta1;
            let val = 2.0 * r + (1.0 - 2.0 * r) * xy.powf(eta_m + 1.0);
            val.powf(mut_pow) - 1.0
        } else {
            let xy = 1.0 - delta2;
            let val = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * xy.powf(eta_m + 1.0);
            1.0 - val.powf(mut_pow)
        };
        out[i] = (y + deltaq * range).clamp(lo, hi);
    }
    out
}

/// Crowded-comparison winner between two population slots.
fn tournament_pick(a: usize, b: usize, pop: &[Individual]) -> usize {
    if pop[a].rank != pop[b].rank {
        if pop[a].rank < pop[b].rank {
            a
        } else {
            b
        }
    } else if pop[a].crowding != pop[b].crowding {
        if pop[a].crowding > pop[b].crowding {
            a
        } else {
            b
        }
    } else {
        a
    }
}

fn assign_ranks(pop: &mut [Individual]) {
    let objs: Vec<[f64; 2]> = pop.iter().map(|ind| ind.objectives).collect();
    let fronts = nondominated_sort(&objs);
    for (rank, front) in fronts.iter().enumerate() {
        let front_objs: Vec<[f64; 2]> = front.iter().map(|&i| objs[i]).collect();
        let crowd = crowding_distance(&front_objs);
        for (k, &i) in front.iter().enumerate() {
            pop[i].rank = rank;
            pop[i].crowding = crowd[k];
        }
    }
}

/// Result of one NSGA-II run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub front: Vec<Individual>,
    pub evaluations: u64,
}

/// The generational loop. `evaluate(genome, eval_seed)` must be pure;
/// evaluation seeds derive from (run seed, generation, slot). The observer
/// sees the survivor population after every generation.
pub fn nsga2<F>(
    evaluate: &F,
    bounds: &ParamBounds,
    cfg: &FitConfig,
    run_seed: u64,
    mut observer: impl FnMut(usize, &[Individual]),
) -> RunResult
where
    F: Fn(&[f64; GENOME_LEN], u64) -> [f64; 2] + Sync,
{
    bounds.validate().expect("bounds validated by caller");
    assert!(cfg.population >= 4 && cfg.population % 2 == 0, "population must be even and >= 4");
    let mut rng = rng_from_seed(run_seed);
    let mut evaluations = 0u64;

    let eval_batch = |genomes: &[[f64; GENOME_LEN]], generation: usize| -> Vec<[f64; 2]> {
        let out: Vec<[f64; 2]> = genomes
            .par_iter()
            .enumerate()
            .map(|(i, g)| evaluate(g, derive_seed2(run_seed, generation as u64, i as u64)))
            .collect();
        out
    };

    // Generation 0: uniform random population inside the box.
    let genomes: Vec<[f64; GENOME_LEN]> = (0..cfg.population)
        .map(|_| {
            let mut g = [0.0; GENOME_LEN];
            for i in 0..GENOME_LEN {
                g[i] = rng.gen_range(bounds.lo[i]..=bounds.hi[i]);
            }
            g
        })
        .collect();
    let objs = eval_batch(&genomes, 0);
    evaluations += genomes.len() as u64;
    let mut pop: Vec<Individual> = genomes
        .into_iter()
        .zip(objs)
        .map(|(genome, objectives)| Individual { genome, objectives, rank: 0, crowding: 0.0 })
        .collect();
    assign_ranks(&mut pop);
    observer(0, &pop);

    for generation in 1..=cfg.generations {
        // Variation: binary tournaments, SBX, polynomial mutation.
        let mut offspring_genomes: Vec<[f64; GENOME_LEN]> = Vec::with_capacity(cfg.population);
        while offspring_genomes.len() < cfg.population {
            let a = tournament_pick(
                rng.gen_range(0..cfg.population),
                rng.gen_range(0..cfg.population),
                &pop,
            );
            let b = tournament_pick(
                rng.gen_range(0..cfg.population),
                rng.gen_range(0..cfg.population),
                &pop,
            );
            let (c1, c2) =
                sbx_crossover(&pop[a].genome, &pop[b].genome, bounds, cfg.crossover_rate, cfg.eta_c, &mut rng);
            let c1 = polynomial_mutation(&c1, bounds, cfg.mutation_rate, cfg.eta_m, &mut rng);
            let c2 = polynomial_mutation(&c2, bounds, cfg.mutation_rate, cfg.eta_m, &mut rng);
            offspring_genomes.push(c1);
            if offspring_genomes.len() < cfg.population {
                offspring_genomes.push(c2);
            }
        }
        let objs = eval_batch(&offspring_genomes, generation);
        evaluations += offspring_genomes.len() as u64;

        // Elitist merge and truncation.
        let mut merged = pop;
        merged.extend(
            offspring_genomes
                .into_iter()
                .zip(objs)
                .map(|(genome, objectives)| Individual { genome, objectives, rank: 0, crowding: 0.0 }),
        );
        assign_ranks(&mut merged);
        let mut order: Vec<usize> = (0..merged.len()).collect();
        order.sort_by(|&x, &y| {
            merged[x]
                .rank
                .cmp(&merged[y].rank)
                .then_with(|| merged[y].crowding.partial_cmp(&merged[x].crowding).unwrap())
                .then_with(|| x.cmp(&y))
        });
        let keep: std::collections::HashSet<usize> =
            order[..cfg.population].iter().copied().collect();
        pop = merged
            .into_iter()
            .enumerate()
            .filter_map(|(i, ind)| keep.contains(&i).then_some(ind))
            .collect();
        assign_ranks(&mut pop);
        observer(generation, &pop);
    }

    let front: Vec<Individual> = pop.iter().filter(|ind| ind.rank == 0).cloned().collect();
    RunResult { seed: run_seed, front, evaluations }
}

/// Selection outcome over several independent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: Individual,
    pub fallback: bool,
}

/// Pool each run's minimum-f_RE candidate; among the pool pick the
/// minimum-f_RE individual whose f_SoT is below the pool average, falling
/// back (flagged) to the global minimum f_RE when none qualifies.
pub fn select_fit(runs: &[RunResult]) -> Result<Selection, FitError> {
    let mut pool: Vec<Individual> = Vec::new();
    for run in runs {
        let best = run
            .front
            .iter()
            .min_by(|a, b| {
                a.objectives[0]
                    .partial_cmp(&b.objectives[0])
                    .unwrap()
                    .then(a.objectives[1].partial_cmp(&b.objectives[1]).unwrap())
            })
            .cloned();
        if let Some(best) = best {
            pool.push(best);
        }
    }
    if pool.is_empty() {
        return Err(FitError::EmptyRuns);
    }
    if pool.len() == 1 {
        return Ok(Selection { chosen: pool.pop().unwrap(), fallback: false });
    }
    let avg_sot: f64 = pool.iter().map(|c| c.objectives[1]).sum::<f64>() / pool.len() as f64;
    let qualified = pool
        .iter()
        .filter(|c| c.objectives[1] < avg_sot)
        .min_by(|a, b| a.objectives[0].partial_cmp(&b.objectives[0]).unwrap())
        .cloned();
    match qualified {
        Some(chosen) => Ok(Selection { chosen, fallback: false }),
        None => {
            let chosen = pool
                .iter()
                .min_by(|a, b| a.objectives[0].partial_cmp(&b.objectives[0]).unwrap())
                .cloned()
                .unwrap();
            Ok(Selection { chosen, fallback: true })
        }
    }
}

/// Full fitting pipeline: `cfg.runs` independent NSGA-II runs, pooled
/// selection, pooled nondominated front for reporting.
pub fn fit(
    reference: &ReferenceData,
    env: &Environment,
    base_params: &ModelParams,
    base_config: &TaskConfig,
    bounds: &ParamBounds,
    cfg: &FitConfig,
    master_seed: u64,
) -> Result<FitResult, FitError> {
    reference.validate()?;
    bounds.validate()?;
    let evaluate = |genome: &[f64; GENOME_LEN], eval_seed: u64| -> [f64; 2] {
        let params = params_from_genome(genome, base_params);
        objectives(&params, reference, env, base_config, eval_seed)
    };

    let mut runs: Vec<RunResult> = Vec::with_capacity(cfg.runs);
    let mut run_seeds = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let run_seed = derive_seed2(master_seed, 0xF17, r as u64);
        run_seeds.push(run_seed);
        runs.push(nsga2(&evaluate, bounds, cfg, run_seed, |_, _| {}));
    }
    let selection = select_fit(&runs)?;
    let evaluations = runs.iter().map(|r| r.evaluations).sum();

    // Pooled front across runs for reporting.
    let mut all: Vec<Individual> = runs.into_iter().flat_map(|r| r.front).collect();
    let objs: Vec<[f64; 2]> = all.iter().map(|i| i.objectives).collect();
    let fronts = nondominated_sort(&objs);
    let keep: std::collections::HashSet<usize> = fronts[0].iter().copied().collect();
    let mut pareto_front: Vec<Individual> = all
        .drain(..)
        .enumerate()
        .filter_map(|(i, ind)| keep.contains(&i).then_some(ind))
        .collect();
    pareto_front.sort_by(|a, b| a.objectives[0].partial_cmp(&b.objectives[0]).unwrap());

    Ok(FitResult {
        pareto_front,
        chosen_genome: selection.chosen.genome,
        chosen: params_from_genome(&selection.chosen.genome, base_params),
        provenance: FitProvenance {
            master_seed,
            run_seeds,
            config: cfg.clone(),
            evaluations,
            fallback: selection.fallback,
        },
    })
}
