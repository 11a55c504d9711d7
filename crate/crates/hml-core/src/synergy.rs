//! Posture calibration: PCA of joint-angle recordings, construction of the
//! cursor mapping matrix, and extraction of a motor synergy basis.
//!
//! Calibration data is a free-movement recording of the m joint angles.
//! The cursor mapping C takes its two rows from the first two principal
//! components, scaled by the square roots of their eigenvalues so motion is
//! comparably easy along both screen axes. The synergy basis keeps the
//! first h (default 4) components unscaled, and the weight factorization
//! C = W * Phi recovers W by projection onto the orthonormal synergy rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};

pub const DEFAULT_SYNERGY_COUNT: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SynergyError {
    #[error("need at least {need} samples for {m} joints, got {got}")]
    TooFewSamples { need: usize, got: usize, m: usize },
    #[error("non-finite value in posture data at sample {sample}, joint {joint}")]
    NonFiniteData { sample: usize, joint: usize },
    #[error("degenerate PCA: second eigenvalue {0} is not positive")]
    DegeneratePca(f64),
    #[error("synergy count {h} out of range 1..={max}")]
    HOutOfRange { h: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Timestamped joint-angle recording from the calibration phase.
#[derive(Debug, Clone)]
pub struct PostureSeries {
    times: Vec<f64>,
    /// One row per sample, m columns.
    samples: Mat,
}

impl PostureSeries {
    /// Build from parallel time/sample arrays. Times must strictly
    /// increase and all samples must share the same dimension.
    pub fn new(times: Vec<f64>, samples: Vec<Vec<f64>>) -> Result<Self, SynergyError> {
        assert_eq!(times.len(), samples.len(), "times and samples must align");
        assert!(!samples.is_empty(), "empty posture series");
        let m = samples[0].len();
        for (i, row) in samples.iter().enumerate() {
            if row.len() != m {
                return Err(SynergyError::DimensionMismatch(format!(
                    "sample {i} has {} joints, expected {m}",
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SynergyError::NonFiniteData { sample: i, joint: j });
                }
            }
        }
        for w in times.windows(2) {
            assert!(w[1] > w[0], "times must be strictly increasing");
        }
        Ok(Self { times, samples: Mat::from_rows(&samples) })
    }

    pub fn joint_count(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }
}

/// Principal components of centered posture data.
///
/// Components are unit rows, pairwise orthonormal; eigenvalues are
/// non-negative and sorted non-increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// One component per row.
    pub components: Mat,
    pub eigenvalues: Vec<f64>,
}

impl PcaResult {
    pub fn joint_count(&self) -> usize {
        self.mean.len()
    }
}

/// Orthonormal synergy basis Phi (h x m).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynergyBasis {
    phi: Mat,
}

impl SynergyBasis {
    /// Validates row orthonormality to 1e-10.
    pub fn new(phi: Mat) -> Result<Self, SynergyError> {
        let h = phi.rows();
        let m = phi.cols();
        if h == 0 || h > m {
            return Err(SynergyError::HOutOfRange { h, max: m });
        }
        let gram = phi.mul_transpose(&phi);
        for i in 0..h {
            for j in 0..h {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - want).abs() > 1e-10 {
                    return Err(SynergyError::DimensionMismatch(format!(
                        "synergy rows not orthonormal: gram[{i}][{j}] = {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(Self { phi })
    }

    pub fn matrix(&self) -> &Mat {
        &self.phi
    }

    pub fn count(&self) -> usize {
        self.phi.rows()
    }

    pub fn joint_count(&self) -> usize {
        self.phi.cols()
    }
}

/// Cursor mapping C (n x m), full row rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingMatrix {
    c: Mat,
}

impl MappingMatrix {
    pub fn new(c: Mat) -> Result<Self, SynergyError> {
        if c.rows() > c.cols() {
            return Err(SynergyError::DimensionMismatch(format!(
                "mapping must have n <= m, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        let sigma_min = linalg::smallest_singular_value(&c);
        if sigma_min <= 1e-12 {
            return Err(SynergyError::DegeneratePca(sigma_min * sigma_min));
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &Mat {
        &self.c
    }

    pub fn cursor_dim(&self) -> usize {
        self.c.rows()
    }

    pub fn joint_count(&self) -> usize {
        self.c.cols()
    }
}

/// PCA of the sample covariance of centered posture data.
///
/// Covariance uses the (N-1) divisor; component signs are fixed by making
/// each component's largest-magnitude entry positive.
pub fn fit_pca(data: &PostureSeries) -> Result<PcaResult, SynergyError> {
    let m = data.joint_count();
    let n = data.len();
    if n < m + 1 {
        return Err(SynergyError::TooFewSamples { need: m + 1, got: n, m });
    }

    let mut mean = vec![0.0; m];
    for i in 0..n {
        linalg::axpy(&mut mean, 1.0, data.sample(i));
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let mut cov = Mat::zeros(m, m);
    let mut centered = vec![0.0; m];
    for i in 0..n {
        let row = data.sample(i);
        for j in 0..m {
            centered[j] = row[j] - mean[j];
        }
        cov.add_outer(1.0, &centered, &centered);
    }
    let cov = cov.scale(1.0 / (n as f64 - 1.0));

    let eig = linalg::sym_eigen(&cov);
    let mut components = eig.vectors;
    let eigenvalues: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l < 0.0 && l >= -1e-12 { 0.0 } else { l })
        .collect();

    // Deterministic sign: largest-magnitude entry positive.
    for i in 0..components.rows() {
        let row = components.row_mut(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j].abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }

    Ok(PcaResult { mean, components, eigenvalues })
}

/// First two components scaled by the square roots of their eigenvalues.
pub fn build_mapping(pca: &PcaResult) -> Result<MappingMatrix, SynergyError> {
    if pca.components.rows() < 2 {
        return Err(SynergyError::DegeneratePca(0.0));
    }
    if pca.eigenvalues[1] <= 1e-12 {
        return Err(SynergyError::DegeneratePca(pca.eigenvalues[1]));
    }
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            let s = pca.eigenvalues[i].sqrt();
            pca.components.row(i).iter().map(|v| v * s).collect()
        })
        .collect();
    MappingMatrix::new(Mat::from_rows(&rows))
}

/// First h components as unit-norm synergy rows.
pub fn extract_synergies(pca: &PcaResult, h: usize) -> Result<SynergyBasis, SynergyError> {
    let max = pca.components.rows();
    if h == 0 || h > max {
        return Err(SynergyError::HOutOfRange { h, max });
    }
    let rows: Vec<Vec<f64>> = (0..h).map(|i| pca.components.row(i).to_vec()).collect();
    SynergyBasis::new(Mat::from_rows(&rows))
}

/// Least-squares weights W = C Phi^T and the relative factorization
/// residual ||C - W Phi||_2 / ||C||_2.
pub fn decompose_weights(c: &MappingMatrix, phi: &SynergyBasis) -> Result<(Mat, f64), SynergyError> {
    if c.joint_count() != phi.joint_count() {
        return Err(SynergyError::DimensionMismatch(format!(
            "mapping has {} joints, synergies have {}",
            c.joint_count(),
            phi.joint_count()
        )));
    }
    let w = c.matrix().mul_transpose(phi.matrix());
    let recon = w.mul(phi.matrix());
    let resid = linalg::spectral_norm(&c.matrix().sub(&recon)) / linalg::spectral_norm(c.matrix());
    Ok((w, resid))
}
