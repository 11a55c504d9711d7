//! Synthetic calibration data and environments for simulation studies,
//! verification suites, and tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, Mat};
use crate::model::Environment;
use crate::rng::rng_from_seed;
use crate::synergy::{
    build_mapping, extract_synergies, fit_pca, MappingMatrix, PostureSeries, SynergyBasis,
    DEFAULT_SYNERGY_COUNT,
};

/// Default joint count of the data glove.
pub const DEFAULT_JOINT_COUNT: usize = 19;
/// Calibration recordings run at 50 Hz in the glove setup.
pub const POSTURE_SAMPLE_PERIOD: f64 = 0.02;

/// Eigenvalue profile for synthetic posture data: four strong synergy
/// directions followed by a geometric tail, so that the first four
/// components span well over 80% of total variance.
fn planted_spectrum(m: usize) -> Vec<f64> {
    let mut spectrum = vec![4.0, 1.0, 0.45, 0.3];
    let mut tail = 0.1;
    while spectrum.len() < m {
        spectrum.push(tail);
        tail *= 0.75;
    }
    spectrum.truncate(m);
    spectrum
}

/// Random orthonormal rows via Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal_rows(h: usize, m: usize, rng: &mut ChaCha8Rng) -> Mat {
    assert!(h <= m);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < h {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for r in &rows {
            let c = linalg::dot(&v, r);
            linalg::axpy(&mut v, -c, r);
        }
        let n = linalg::norm2(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    Mat::from_rows(&rows)
}

/// Generate a free-movement posture recording: Gaussian mixture over a
/// random orthonormal basis with the planted eigenvalue profile.
pub fn gen_postures(seed: u64, samples: usize, m: usize) -> PostureSeries {
    let mut rng = rng_from_seed(seed);
    let basis = random_orthonormal_rows(m, m, &mut rng);
    let spectrum = planted_spectrum(m);
    let mean: Vec<f64> = (0..m).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut q = mean.clone();
        for (k, &lam) in spectrum.iter().enumerate() {
            let coef: f64 = lam.sqrt() * rng.sample::<f64, _>(StandardNormal);
            linalg::axpy(&mut q, coef, basis.row(k));
        }
        rows.push(q);
    }
    let times: Vec<f64> = (0..samples).map(|i| i as f64 * POSTURE_SAMPLE_PERIOD).collect();
    PostureSeries::new(times, rows).expect("synthetic postures are well formed")
}

/// Calibrated environment from synthetic posture data: mapping from the
/// first two components, synergies from the first `h`. The mapping lies in
/// the synergy span whenever `h >= 2`.
pub fn calibrated_env(seed: u64, m: usize, h: usize) -> Environment {
    let postures = gen_postures(seed, 4 * m * m + 200, m);
    let pca = fit_pca(&postures).expect("synthetic PCA");
    let c = build_mapping(&pca).expect("synthetic mapping");
    let phi = extract_synergies(&pca, h).expect("synthetic synergies");
    Environment::new(c, phi).expect("synthetic environment")
}

/// Standard test environment: 19 joints, 4 synergies.
pub fn default_env(seed: u64) -> Environment {
    calibrated_env(seed, DEFAULT_JOINT_COUNT, DEFAULT_SYNERGY_COUNT)
}

/// Environment whose mapping does NOT lie in the span of the `h`
/// synergies: a random full-rank C (spectral norm normalized to 2, the
/// calibrated scale) against an independent random orthonormal basis.
pub fn out_of_span_env(seed: u64, m: usize, h: usize) -> Environment {
    let mut rng = rng_from_seed(seed);
    let raw = Mat::from_fn(2, m, |_, _| rng.sample(StandardNormal));
    let scale = 2.0 / linalg::spectral_norm(&raw);
    let c = MappingMatrix::new(raw.scale(scale)).expect("random mapping is full rank");
    let basis = random_orthonormal_rows(m, m, &mut rng);
    let rows: Vec<Vec<f64>> = (0..h).map(|i| basis.row(i).to_vec()).collect();
    let phi = SynergyBasis::new(Mat::from_rows(&rows)).expect("orthonormal rows");
    Environment::new(c, phi).expect("environment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_env_is_self_consistent() {
        let env = default_env(7);
        assert_eq!(env.joint_count(), 19);
        assert_eq!(env.synergy_count(), 4);
        assert_eq!(env.cursor_dim(), 2);
        // C built from the first two components of the same PCA that
        // produced Phi, so it lies in the synergy span.
        assert!(env.representation_residual() < 1e-10);
        // Row norms of C are sqrt-eigenvalue scaled, near the planted 2, 1.
        assert!((linalg::norm2(env.c().row(0)) - 2.0).abs() < 0.2);
        assert!((linalg::norm2(env.c().row(1)) - 1.0).abs() < 0.2);
    }

    #[test]
    fn out_of_span_env_has_residual_except_complete_basis() {
        let env = out_of_span_env(3, 19, 4);
        assert!(env.representation_residual() > 0.1);
        let env_full = out_of_span_env(3, 19, 19);
        assert!(env_full.representation_residual() < 1e-10);
    }
}
