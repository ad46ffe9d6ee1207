//! Least-squares projection classification over an observed library and
//! state reconstruction from the winning regime.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::library::{ObservedEntry, ObservedLibrary, RegimeLibrary};
use crate::linalg::{CMatrix, CVector};

/// Least-squares fit of one regime.
#[derive(Debug, Clone)]
pub struct LsqFit {
    /// Minimum-norm `β = Θ̂† y`.
    pub coefficients: CVector,
    /// `‖y − Θ̂β‖₂`.
    pub residual: f64,
    /// `‖Θ̂β‖₂ = ‖P̂ y‖₂`.
    pub projection_norm: f64,
}

pub fn lsq_fit(entry: &ObservedEntry, y: &DVector<f64>) -> Result<LsqFit> {
    if y.len() != entry.theta.nrows() {
        return Err(Error::Argument(format!(
            "measurement has length {}, regime {:?} expects {}",
            y.len(),
            entry.label,
            entry.theta.nrows()
        )));
    }
    let yc: CVector = y.map(|v| Complex64::new(v, 0.0));
    let coefficients = &entry.pinv * &yc;
    let fitted = &entry.theta * &coefficients;
    let residual = (&yc - &fitted).norm();
    Ok(LsqFit {
        projection_norm: fitted.norm(),
        coefficients,
        residual,
    })
}

#[derive(Debug, Clone)]
pub struct ClassificationReport {
    pub winner: usize,
    pub labels: Vec<String>,
    pub projection_norms: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `β` of the winning regime.
    pub coefficients: CVector,
    pub flags: Vec<String>,
}

impl ClassificationReport {
    pub fn winner_label(&self) -> &str {
        &self.labels[self.winner]
    }

    /// Structured text (TOML) rendering for reports.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            label: &'a str,
            projection_norm: f64,
            residual: f64,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            winner: usize,
            winner_label: &'a str,
            coefficients: Vec<[f64; 2]>,
            flags: &'a [String],
            regimes: Vec<Row<'a>>,
        }
        let doc = Doc {
            winner: self.winner,
            winner_label: self.winner_label(),
            coefficients: self.coefficients.iter().map(|z| [z.re, z.im]).collect(),
            flags: &self.flags,
            regimes: self
                .labels
                .iter()
                .zip(&self.projection_norms)
                .zip(&self.residuals)
                .map(|((label, &projection_norm), &residual)| Row {
                    label,
                    projection_norm,
                    residual,
                })
                .collect(),
        };
        toml::to_string(&doc).expect("report serializes")
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Picks the regime whose observed subspace captures the most of `y`.
pub fn classify(obs: &ObservedLibrary, y: &DVector<f64>) -> Result<ClassificationReport> {
    if obs.is_empty() {
        return Err(Error::Argument("cannot classify against an empty library".into()));
    }
    let fits = obs
        .entries()
        .iter()
        .map(|e| lsq_fit(e, y))
        .collect::<Result<Vec<_>>>()?;
    let projection_norms: Vec<f64> = fits.iter().map(|f| f.projection_norm).collect();
    let residuals = fits.iter().map(|f| f.residual).collect();
    let winner = argmax(&projection_norms);
    let coefficients = fits.into_iter().nth(winner).expect("winner in range").coefficients;
    Ok(ClassificationReport {
        winner,
        labels: obs.labels(),
        projection_norms,
        residuals,
        coefficients,
        flags: obs.flags(),
    })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `n × (j+1)` real part of `Φ̂β`, one column per time step.
    pub states: DMatrix<f64>,
    /// `‖Im x̂‖₂ / ‖x̂‖₂` (zero when `x̂ = 0`).
    pub imag_residual: f64,
    pub coefficients: CVector,
    pub flag: Option<String>,
}

/// Full-state estimate `x̂ = Φ̂_k Θ̂_k† y` over the measurement window.
pub fn reconstruct(lib: &RegimeLibrary, obs: &ObservedLibrary, k: usize, y: &DVector<f64>) -> Result<Reconstruction> {
    let observed = obs
        .entries()
        .get(k)
        .ok_or_else(|| Error::Argument(format!("regime index {k} out of range (d = {})", obs.len())))?;
    let entry = lib
        .entry(k)
        .ok_or_else(|| Error::Argument(format!("regime index {k} out of range (d = {})", lib.len())))?;
    if entry.label != observed.label || entry.model.rank() != observed.columns() {
        return Err(Error::Argument(format!(
            "observed library entry {:?} does not belong to library entry {:?}",
            observed.label, entry.label
        )));
    }
    let fit = lsq_fit(observed, y)?;
    let phi = entry.model.modes();
    let lambda = entry.model.eigenvalues();
    let steps = obs.depth() + 1;
    let mut full = CMatrix::zeros(phi.nrows(), steps);
    let mut weights = fit.coefficients.clone();
    for b in 0..steps {
        full.set_column(b, &(phi * &weights));
        for (w, l) in weights.iter_mut().zip(lambda) {
            *w *= l;
        }
    }
    let total = full.norm();
    let imag = full.map(|z| z.im).norm();
    Ok(Reconstruction {
        states: full.map(|z| z.re),
        imag_residual: if total > 0.0 { imag / total } else { 0.0 },
        coefficients: fit.coefficients,
        flag: observed.flag(),
    })
}

/// `‖x̂ − x‖_F / ‖x‖_F`.
pub fn relative_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateSignal("relative error against a zero state".into()));
    }
    Ok((estimate - truth).norm() / norm)
}
