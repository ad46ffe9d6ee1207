//! Library diagnostics: subspace alignment (η, γ), data energy (κ),
//! block-coherence and sub-coherence, the alignment certificate for
//! guaranteed classification, and Monte-Carlo confusion matrices.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::classify;
use crate::error::{Error, Result};
use crate::library::{observe_library, ObservedLibrary, RegimeLibrary};
use crate::linalg::{frobenius, orthonormal_basis, spectral_norm, CMatrix, OrthonormalBasis};
use crate::parallel::Execution;
use crate::sensing::{make_sensing, measure, SensingConfig, SensingOperator};
use crate::snapshots::SnapshotMatrix;

/// Slack allowed above 1 for metric entries.
pub const METRIC_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Eta,
    Gamma,
    Kappa,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Eta => "eta",
            MetricKind::Gamma => "gamma",
            MetricKind::Kappa => "kappa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisSpace {
    Full,
    Observed,
}

/// Labelled `d × d` matrix of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub values: DMatrix<f64>,
    pub kind: MetricKind,
    pub space: BasisSpace,
    pub labels: Vec<String>,
    pub flags: Vec<String>,
}

impl MetricMatrix {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labeled_csv(out, &self.labels, &self.labels, &self.values)
    }
}

/// CSV with a header of column labels and a leading row-label column.
pub fn write_labeled_csv<W: Write>(
    out: W,
    row_labels: &[String],
    col_labels: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    if values.shape() != (row_labels.len(), col_labels.len()) {
        return Err(Error::Dimension(format!(
            "{}x{} values with {} row and {} column labels",
            values.nrows(),
            values.ncols(),
            row_labels.len(),
            col_labels.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut header = vec!["label".to_string()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Orthonormalized bases of a set of labelled subspaces.
#[derive(Debug, Clone)]
pub struct Subspaces {
    pub labels: Vec<String>,
    pub bases: Vec<OrthonormalBasis>,
    pub space: BasisSpace,
    /// One entry per basis that lost rank during orthonormalization.
    pub flags: Vec<String>,
}

impl Subspaces {
    pub fn new(labels: Vec<String>, raw: &[CMatrix], space: BasisSpace) -> Result<Self> {
        if labels.len() != raw.len() {
            return Err(Error::Argument(format!("{} labels for {} bases", labels.len(), raw.len())));
        }
        if raw.is_empty() {
            return Err(Error::Argument("no bases given".into()));
        }
        let rows = raw[0].nrows();
        if let Some(m) = raw.iter().find(|m| m.nrows() != rows) {
            return Err(Error::Dimension(format!(
                "bases live in different spaces ({rows} vs {} rows)",
                m.nrows()
            )));
        }
        let bases = raw.iter().map(orthonormal_basis).collect::<Result<Vec<_>>>()?;
        let flags = bases
            .iter()
            .zip(raw)
            .zip(&labels)
            .filter(|((b, m), _)| !b.is_full_rank(m.ncols()))
            .map(|((b, m), l)| format!("basis {l:?} has numerical rank {} < {} columns", b.rank, m.ncols()))
            .collect();
        Ok(Self {
            labels,
            bases,
            space,
            flags,
        })
    }

    /// Spans of the DMD modes of every regime.
    pub fn from_library(lib: &RegimeLibrary) -> Result<Self> {
        let raw: Vec<CMatrix> = lib.entries().iter().map(|e| e.model.modes().clone()).collect();
        Self::new(lib.labels(), &raw, BasisSpace::Full)
    }

    /// Spans of the sensed (augmented) bases.
    pub fn from_observed(obs: &ObservedLibrary) -> Result<Self> {
        let raw: Vec<CMatrix> = obs.entries().iter().map(|e| e.theta.clone()).collect();
        Self::new(obs.labels(), &raw, BasisSpace::Observed)
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.bases[0].q.nrows()
    }

    fn pair_flags(&self) -> Vec<String> {
        self.flags.clone()
    }

    fn symmetric<F>(&self, kind: MetricKind, diag: f64, f: F) -> Result<MetricMatrix>
    where
        F: Fn(&CMatrix, &CMatrix) -> Result<f64>,
    {
        let d = self.len();
        let mut values = DMatrix::from_element(d, d, diag);
        for i in 0..d {
            for j in (i + 1)..d {
                let v = f(&self.bases[i].q, &self.bases[j].q)?;
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        Ok(MetricMatrix {
            values,
            kind,
            space: self.space,
            labels: self.labels.clone(),
            flags: self.pair_flags(),
        })
    }
}

/// `η_jk = ‖P_j P_k‖₂ = σ_max(Q_jᴴ Q_k)`; returns the matrix and the largest
/// off-diagonal entry (0 for a single subspace).
pub fn eta_alignment(subspaces: &Subspaces) -> Result<(MetricMatrix, f64)> {
    let m = subspaces.symmetric(MetricKind::Eta, 1.0, |a, b| {
        if a.ncols() == 0 || b.ncols() == 0 {
            return Ok(0.0);
        }
        spectral_norm(&(a.adjoint() * b))
    })?;
    let eta = off_diagonal_max(&m.values);
    Ok((m, eta))
}

/// `γ_ij = ‖P_i P_j‖_F / (‖P_i‖_F ‖P_j‖_F) = ‖Q_iᴴ Q_j‖_F / √(r_i r_j)`.
pub fn gamma_matrix(subspaces: &Subspaces) -> Result<MetricMatrix> {
    subspaces.symmetric(MetricKind::Gamma, 1.0, |a, b| {
        if a.ncols() == 0 || b.ncols() == 0 {
            return Ok(0.0);
        }
        Ok(frobenius(&(a.adjoint() * b)) / ((a.ncols() * b.ncols()) as f64).sqrt())
    })
}

/// `κ_ij = ‖P_i X_j‖_F / ‖X_j‖_F`; rows are subspaces, columns datasets.
pub fn kappa_matrix(subspaces: &Subspaces, data: &[DMatrix<f64>]) -> Result<MetricMatrix> {
    let d = subspaces.len();
    if data.len() != d {
        return Err(Error::Argument(format!("{} datasets for {d} subspaces", data.len())));
    }
    let n = subspaces.ambient_dim();
    let mut values = DMatrix::zeros(d, d);
    for (j, x) in data.iter().enumerate() {
        if x.nrows() != n {
            return Err(Error::Dimension(format!(
                "dataset {j} has dimension {}, subspaces live in {n}",
                x.nrows()
            )));
        }
        let norm = x.norm();
        if norm == 0.0 {
            return Err(Error::Argument(format!("dataset {:?} is identically zero", subspaces.labels[j])));
        }
        for i in 0..d {
            let q = &subspaces.bases[i].q;
            let re = q.map(|z| z.re).transpose() * x;
            let im = q.map(|z| z.im).transpose() * x;
            let projected = (re.norm_squared() + im.norm_squared()).sqrt();
            values[(i, j)] = projected / norm;
        }
    }
    Ok(MetricMatrix {
        values,
        kind: MetricKind::Kappa,
        space: subspaces.space,
        labels: subspaces.labels.clone(),
        flags: subspaces.pair_flags(),
    })
}

fn off_diagonal_max(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                best = best.max(m[(i, j)]);
            }
        }
    }
    best
}

/// Block-coherence summary of an observed library.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceReport {
    pub mu_b: f64,
    pub nu: f64,
    /// Common block size `r₁`.
    pub r_block: usize,
    pub blocks: usize,
    /// `(1 + ν)/(μ_B + ν)`, infinite when both vanish.
    pub bound: f64,
    /// `d·r₁ < bound`.
    pub bound_satisfied: bool,
}

/// Coherence of a dictionary of equally sized blocks. Columns are scaled to
/// unit norm first; the blocks are not orthonormalized.
pub fn coherence_of_blocks(blocks: &[CMatrix]) -> Result<CoherenceReport> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Argument("coherence of an empty dictionary".into()))?;
    let r1 = first.ncols();
    if let Some(b) = blocks.iter().find(|b| b.ncols() != r1) {
        return Err(Error::Argument(format!(
            "block-coherence needs equal block sizes, got {r1} and {}",
            b.ncols()
        )));
    }
    if r1 == 0 {
        return Err(Error::Argument("blocks have no columns".into()));
    }
    let normalized = blocks
        .iter()
        .map(|b| {
            let mut b = b.clone();
            for mut col in b.column_iter_mut() {
                let norm = col.norm();
                if !(norm > 0.0) {
                    return Err(Error::Rank("dictionary column with zero norm".into()));
                }
                col.unscale_mut(norm);
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mu_b = 0.0_f64;
    for i in 0..normalized.len() {
        for j in (i + 1)..normalized.len() {
            let cross = normalized[i].adjoint() * &normalized[j];
            mu_b = mu_b.max(spectral_norm(&cross)? / r1 as f64);
        }
    }
    let mut nu = 0.0_f64;
    for b in &normalized {
        let gram = b.adjoint() * b;
        for i in 0..r1 {
            for j in 0..r1 {
                if i != j {
                    nu = nu.max(gram[(i, j)].norm());
                }
            }
        }
    }
    let denominator = mu_b + nu;
    let bound = if denominator > 0.0 {
        (1.0 + nu) / denominator
    } else {
        f64::INFINITY
    };
    let r = blocks.len() * r1;
    Ok(CoherenceReport {
        mu_b,
        nu,
        r_block: r1,
        blocks: blocks.len(),
        bound,
        bound_satisfied: (r as f64) < bound,
    })
}

pub fn coherence_report(obs: &ObservedLibrary) -> Result<CoherenceReport> {
    let blocks: Vec<CMatrix> = obs.entries().iter().map(|e| e.theta.clone()).collect();
    coherence_of_blocks(&blocks)
}

/// `μ_B` (and the rest of the report) of `observe_library(lib, op, j)` for
/// each requested `j`.
pub fn mu_b_vs_augmentation(
    lib: &RegimeLibrary,
    op: &SensingOperator,
    depths: &[usize],
    exec: Execution,
) -> Result<Vec<(usize, CoherenceReport)>> {
    depths
        .iter()
        .map(|&j| {
            let obs = observe_library(lib, op, j, exec)?;
            Ok((j, coherence_report(&obs)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub certified: bool,
    pub eta: f64,
    pub epsilon: f64,
}

/// Classification is guaranteed when `η < 1 − ε`.
pub fn prop1_certificate(subspaces: &Subspaces, epsilon: f64) -> Result<Certificate> {
    let (_, eta) = eta_alignment(subspaces)?;
    certificate_from_eta(eta, epsilon)
}

pub fn certificate_from_eta(eta: f64, epsilon: f64) -> Result<Certificate> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    Ok(Certificate {
        certified: eta < 1.0 - epsilon,
        eta,
        epsilon,
    })
}

/// `max ‖(I − P_k) y‖ / ‖P_k y‖` over the columns `y` of `data[k]`, each
/// measured against its own regime's subspace.
pub fn estimate_epsilon(subspaces: &Subspaces, data: &[DMatrix<f64>]) -> Result<f64> {
    if data.len() != subspaces.len() {
        return Err(Error::Argument(format!(
            "{} datasets for {} subspaces",
            data.len(),
            subspaces.len()
        )));
    }
    let mut eps = 0.0_f64;
    for (k, x) in data.iter().enumerate() {
        let q = &subspaces.bases[k].q;
        if x.nrows() != q.nrows() {
            return Err(Error::Dimension(format!(
                "dataset {k} has dimension {}, subspaces live in {}",
                x.nrows(),
                q.nrows()
            )));
        }
        let qre = q.map(|z| z.re);
        let qim = q.map(|z| z.im);
        for col in x.column_iter() {
            let total = col.norm_squared();
            if total == 0.0 {
                continue;
            }
            let inside = (qre.transpose() * col).norm_squared() + (qim.transpose() * col).norm_squared();
            let outside = (total - inside).max(0.0);
            eps = eps.max(if inside > 0.0 {
                (outside / inside).sqrt()
            } else {
                f64::INFINITY
            });
        }
    }
    Ok(eps)
}

/// Per-trial random draw shared by every Monte-Carlo protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialDraw {
    pub regime: usize,
    pub trial: usize,
    pub start: usize,
    pub noise_seed: u64,
}

/// Draws a uniformly random window start (leaving `j+1` snapshots) and a
/// noise seed from the trial's own generator, seeded with
/// `seed ^ (regime·10⁶ + trial)`.
pub fn trial_draw(seed: u64, regime: usize, trial: usize, snapshots: usize, j: usize) -> Result<TrialDraw> {
    if snapshots < j + 1 {
        return Err(Error::Argument(format!(
            "regime {regime} has {snapshots} test snapshots, need at least {}",
            j + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (regime as u64 * 1_000_000 + trial as u64));
    let start = rng.random_range(0..=snapshots - (j + 1));
    let noise_seed = rng.random();
    Ok(TrialDraw {
        regime,
        trial,
        start,
        noise_seed,
    })
}

/// Runs `trials` draws per test set through `f`; results are indexed
/// `[regime][trial]` and do not depend on the execution mode.
pub fn run_trials<T, F>(
    test: &[SnapshotMatrix],
    trials: usize,
    j: usize,
    seed: u64,
    exec: Execution,
    f: F,
) -> Result<Vec<Vec<T>>>
where
    T: Send,
    F: Fn(&TrialDraw, &DMatrix<f64>) -> Result<T> + Sync,
{
    if trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    for (k, t) in test.iter().enumerate() {
        if t.len() < j + 1 {
            return Err(Error::Argument(format!(
                "test set {k} ({:?}) has {} snapshots, need at least {}",
                t.label(),
                t.len(),
                j + 1
            )));
        }
    }
    let flat = exec.try_map(test.len() * trials, |idx| {
        let (regime, trial) = (idx / trials, idx % trials);
        let draw = trial_draw(seed, regime, trial, test[regime].len(), j)?;
        let window = test[regime].window(draw.start, j + 1)?;
        f(&draw, &window)
    })?;
    let mut out: Vec<Vec<T>> = Vec::with_capacity(test.len());
    let mut it = flat.into_iter();
    for _ in 0..test.len() {
        out.push(it.by_ref().take(trials).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionConfig {
    pub sensing: SensingConfig,
    pub trials: usize,
    pub snr_db: Option<f64>,
    pub j: usize,
    pub seed: u64,
}

/// Rows are test sets, columns library regimes, entries percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub percentages: DMatrix<f64>,
    pub counts: DMatrix<usize>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub trials: usize,
}

impl ConfusionMatrix {
    pub fn from_winners(winners: &[Vec<usize>], row_labels: Vec<String>, col_labels: Vec<String>) -> Result<Self> {
        let d = col_labels.len();
        let trials = winners.first().map_or(0, Vec::len);
        if winners.len() != row_labels.len() || winners.iter().any(|w| w.len() != trials) || trials == 0 {
            return Err(Error::Argument("ragged or empty trial outcomes".into()));
        }
        let mut counts = DMatrix::zeros(winners.len(), d);
        for (i, row) in winners.iter().enumerate() {
            for &w in row {
                if w >= d {
                    return Err(Error::Argument(format!("winner {w} outside {d} regimes")));
                }
                counts[(i, w)] += 1;
            }
        }
        let percentages = counts.map(|c| 100.0 * c as f64 / trials as f64);
        Ok(Self {
            percentages,
            counts,
            row_labels,
            col_labels,
            trials,
        })
    }

    /// Share of trials of test set `i` assigned to library regime `k`.
    pub fn rate(&self, i: usize, k: usize) -> f64 {
        self.counts[(i, k)] as f64 / self.trials as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labeled_csv(out, &self.row_labels, &self.col_labels, &self.percentages)
    }
}

/// Monte-Carlo confusion matrix: per trial pick a random window of
/// `j + 1` test snapshots, sense it (fixed operator built once from the
/// config), add noise and classify.
pub fn confusion_matrix(
    lib: &RegimeLibrary,
    test: &[SnapshotMatrix],
    config: &ConfusionConfig,
    exec: Execution,
) -> Result<ConfusionMatrix> {
    let first = test
        .first()
        .ok_or_else(|| Error::Argument("no test data".into()))?;
    for t in test {
        if t.state_dim() != lib.state_dim() {
            return Err(Error::Dimension(format!(
                "test set {:?} has dimension {}, library has {}",
                t.label(),
                t.state_dim(),
                lib.state_dim()
            )));
        }
        lib.check_dt(t.dt())?;
    }
    let op = make_sensing(&config.sensing, lib.state_dim(), first.grid())?;
    let obs = observe_library(lib, &op, config.j, exec)?;
    confusion_with(&obs, &op, test, config, exec)
}

/// As [`confusion_matrix`] with a prebuilt operator and observed library.
pub fn confusion_with(
    obs: &ObservedLibrary,
    op: &SensingOperator,
    test: &[SnapshotMatrix],
    config: &ConfusionConfig,
    exec: Execution,
) -> Result<ConfusionMatrix> {
    if obs.depth() != config.j || obs.sensors() != op.sensors() {
        return Err(Error::Argument("observed library does not match the sensing setup".into()));
    }
    let winners = run_trials(test, config.trials, config.j, config.seed, exec, |draw, window| {
        let y = measure(op, window, config.snr_db, draw.noise_seed)?;
        Ok(classify(obs, &y.values)?.winner)
    })?;
    let row_labels = test.iter().map(|t| t.label().to_string()).collect();
    ConfusionMatrix::from_winners(&winners, row_labels, obs.labels())
}

/// Column-wise stacked data `Y_j` of a test set under `op` (every window of
/// `j + 1` consecutive snapshots), for observed-space κ and ε estimates.
pub fn stacked_observations(op: &SensingOperator, snap: &SnapshotMatrix, j: usize) -> Result<DMatrix<f64>> {
    let s = snap.len();
    if s < j + 1 {
        return Err(Error::Argument(format!("{s} snapshots cannot fill a window of {}", j + 1)));
    }
    let sensed = op.apply_matrix(snap.data())?;
    let p = sensed.nrows();
    let windows = s - j;
    Ok(DMatrix::from_fn(p * (j + 1), windows, |row, col| {
        sensed[(row % p, col + row / p)]
    }))
}

/// Stacked measurement of one window as a vector (helper for callers that
/// already hold the window).
pub fn stack_window(window: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(window.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmd::DmdModel;
    use crate::library::RegimeEntry;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn real(m: DMatrix<f64>) -> CMatrix {
        crate::linalg::complexify(&m)
    }

    fn line(angle: f64) -> CMatrix {
        real(DMatrix::from_vec(2, 1, vec![angle.cos(), angle.sin()]))
    }

    fn subspaces(raw: Vec<CMatrix>) -> Subspaces {
        let labels = (0..raw.len()).map(|k| format!("R{k}")).collect();
        Subspaces::new(labels, &raw, BasisSpace::Full).unwrap()
    }

    fn random_complex(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(rows, cols, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)))
    }

    #[test]
    fn eta_identical_orthogonal_and_45_degrees() {
        let (m, eta) = eta_alignment(&subspaces(vec![line(0.3), line(0.3)])).unwrap();
        assert!((eta - 1.0).abs() < 1e-12);
        assert_eq!(m.values[(0, 0)], 1.0);

        let (_, eta) = eta_alignment(&subspaces(vec![line(0.0), line(std::f64::consts::FRAC_PI_2)])).unwrap();
        assert!(eta < 1e-15);

        let (_, eta) = eta_alignment(&subspaces(vec![line(0.0), line(std::f64::consts::FRAC_PI_4)])).unwrap();
        // oracle: SVD of the explicit projector product
        let p1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let oracle: f64 = (p1 * p2).singular_values()[0];
        assert!((eta - oracle).abs() < 1e-12);
        assert!((eta - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gamma_of_lines_is_cosine() {
        for theta in [0.0, 0.4, 1.0, 2.5] {
            let g = gamma_matrix(&subspaces(vec![line(0.0), line(theta)])).unwrap();
            // oracle: explicit rank-1 projectors, ‖P_i‖_F = 1
            let u = DVector::from_vec(vec![1.0, 0.0]);
            let v = DVector::from_vec(vec![theta.cos(), theta.sin()]);
            let oracle = (&u * u.transpose() * &v * v.transpose()).norm();
            assert!((g.values[(0, 1)] - oracle).abs() < 1e-12);
            assert!((g.values[(0, 1)] - theta.cos().abs()).abs() < 1e-12);
            assert_eq!(g.values[(0, 0)], 1.0);
        }
        let orth = gamma_matrix(&subspaces(vec![line(0.0), line(std::f64::consts::FRAC_PI_2)])).unwrap();
        assert!(orth.values[(0, 1)] < 1e-15);
    }

    #[test]
    fn kappa_in_space_and_orthogonal() {
        let s = subspaces(vec![
            real(DMatrix::from_fn(4, 2, |i, j| (i == j) as u8 as f64)),
            real(DMatrix::from_fn(4, 2, |i, j| (i == j + 2) as u8 as f64)),
        ]);
        let x0 = DMatrix::from_fn(4, 5, |i, t| if i < 2 { (t + i) as f64 + 1.0 } else { 0.0 });
        let x1 = DMatrix::from_fn(4, 5, |i, t| if i >= 2 { (t * i) as f64 + 1.0 } else { 0.0 });
        let k = kappa_matrix(&s, &[x0.clone(), x1]).unwrap();
        assert!((k.values[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((k.values[(1, 1)] - 1.0).abs() < 1e-10);
        assert!(k.values[(1, 0)] < 1e-15);
        assert!(k.values[(0, 1)] < 1e-15);
        assert!(matches!(kappa_matrix(&s, &[x0, DMatrix::zeros(4, 5)]), Err(Error::Argument(_))));
    }

    #[test]
    fn coherence_examples() {
        let e = |cols: &[usize]| real(DMatrix::from_fn(4, cols.len(), |i, j| (i == cols[j]) as u8 as f64));
        let orth = coherence_of_blocks(&[e(&[0, 1]), e(&[2, 3])]).unwrap();
        assert_eq!(orth.mu_b, 0.0);
        assert_eq!(orth.nu, 0.0);
        assert!(orth.bound_satisfied);

        let same = coherence_of_blocks(&[e(&[0, 1]), e(&[0, 1])]).unwrap();
        assert!((same.mu_b - 0.5).abs() < 1e-15);
        assert_eq!(same.nu, 0.0);
        // r = 4 against (1 + 0)/(0.5 + 0) = 2
        assert!(!same.bound_satisfied);

        assert!(matches!(coherence_of_blocks(&[e(&[0, 1]), e(&[2])]), Err(Error::Argument(_))));
    }

    #[test]
    fn coherence_normalizes_columns_but_keeps_angles() {
        let b = real(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 1.0]));
        let rep = coherence_of_blocks(&[b]).unwrap();
        assert!((rep.nu - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rep.mu_b, 0.0);
    }

    #[test]
    fn orthonormalized_single_block_has_zero_nu() {
        let q = orthonormal_basis(&random_complex(9, 4, 2)).unwrap().q;
        let rep = coherence_of_blocks(&[q]).unwrap();
        assert!(rep.nu < 1e-14);
    }

    #[test]
    fn certificate_examples() {
        let s = subspaces(vec![line(0.0), line(0.6)]);
        let cert = prop1_certificate(&s, 0.1).unwrap();
        assert!(cert.eta < 0.9 && cert.certified);
        let same = subspaces(vec![line(0.2), line(0.2)]);
        for eps in [0.0, 0.3, 0.9] {
            assert!(!prop1_certificate(&same, eps).unwrap().certified);
        }
        assert!(prop1_certificate(&s, 1.0).is_err());
    }

    #[test]
    fn epsilon_estimate_matches_construction() {
        let s = subspaces(vec![real(DMatrix::from_fn(3, 1, |i, _| (i == 0) as u8 as f64))]);
        let x = DMatrix::from_row_slice(3, 2, &[2.0, 1.0, 0.2, 0.0, 0.0, 0.05]);
        let eps = estimate_epsilon(&s, &[x]).unwrap();
        assert!((eps - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_basis_is_flagged() {
        let b = real(DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0]));
        let s = subspaces(vec![b, line3()]);
        assert_eq!(s.flags.len(), 1);
        assert_eq!(eta_alignment(&s).unwrap().0.flags.len(), 1);
    }

    fn line3() -> CMatrix {
        real(DMatrix::from_vec(3, 1, vec![0.0, 0.0, 1.0]))
    }

    #[test]
    fn csv_has_labels() {
        let g = gamma_matrix(&subspaces(vec![line(0.0), line(0.5)])).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "label,R0,R1");
        assert!(lines.next().unwrap().starts_with("R0,1,"));
    }

    /// Three regimes living on disjoint coordinate blocks.
    fn separated_library() -> (RegimeLibrary, Vec<SnapshotMatrix>) {
        let n = 9;
        let mut entries = Vec::new();
        let mut test = Vec::new();
        for k in 0..3 {
            let th = 0.2 + 0.3 * k as f64;
            let mut phi = CMatrix::zeros(n, 2);
            phi[(3 * k, 0)] = c(1.0, 0.0);
            phi[(3 * k + 1, 0)] = c(0.0, 1.0);
            phi[(3 * k, 1)] = c(1.0, 0.0);
            phi[(3 * k + 1, 1)] = c(0.0, -1.0);
            let lam = vec![Complex64::from_polar(0.99, th), Complex64::from_polar(0.99, -th)];
            let model = DmdModel::from_parts(phi.clone(), lam.clone(), vec![], 1.0).unwrap();
            entries.push(RegimeEntry {
                label: format!("R{k}"),
                parameter: k as f64,
                model,
            });
            let data = DMatrix::from_fn(n, 30, |i, t| {
                let z = phi[(i, 0)] * lam[0].powu(t as u32) * c(0.5, 0.2);
                2.0 * z.re
            });
            test.push(SnapshotMatrix::new(data, 1.0, format!("R{k}")).unwrap());
        }
        (RegimeLibrary::new(entries).unwrap(), test)
    }

    #[test]
    fn confusion_on_separated_regimes_is_identity() {
        let (lib, test) = separated_library();
        let cfg = ConfusionConfig {
            sensing: SensingConfig::new(crate::sensing::SensingKind::Identity),
            trials: 20,
            snr_db: None,
            j: 2,
            seed: 5,
        };
        let seq = confusion_matrix(&lib, &test, &cfg, Execution::Sequential).unwrap();
        let par = confusion_matrix(&lib, &test, &cfg, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.percentages, DMatrix::identity(3, 3) * 100.0);

        let noisy = confusion_matrix(&lib, &test, &ConfusionConfig { snr_db: Some(0.0), ..cfg.clone() }, Execution::Sequential)
            .unwrap();
        for row in noisy.percentages.row_iter() {
            assert!((row.sum() - 100.0).abs() < 1e-9);
        }

        let short = vec![test[0].slice(0, 2).unwrap(), test[1].clone(), test[2].clone()];
        assert!(matches!(confusion_matrix(&lib, &short, &cfg, Execution::Sequential), Err(Error::Argument(_))));
    }

    #[test]
    fn trial_draws_are_reproducible_and_in_range() {
        for trial in 0..50 {
            let a = trial_draw(42, 3, trial, 20, 4).unwrap();
            assert_eq!(a, trial_draw(42, 3, trial, 20, 4).unwrap());
            assert!(a.start <= 15);
        }
        assert!(trial_draw(1, 0, 0, 3, 3).is_err());
        assert_eq!(trial_draw(1, 0, 0, 4, 3).unwrap().start, 0);
    }

    #[test]
    fn mu_b_base_case_and_identical_spectra() {
        let (lib, _) = separated_library();
        let op = SensingOperator::identity(9);
        let sweep = mu_b_vs_augmentation(&lib, &op, &[0, 1, 3], Execution::Sequential).unwrap();
        let base = coherence_report(&observe_library(&lib, &op, 0, Execution::Sequential).unwrap()).unwrap();
        assert_eq!(sweep[0].1, base);

        // two regimes sharing Λ whose cross-Gram is diagonal: the augmented
        // cross-Gram is diagonal with the same ratio to the Gram at every j
        let u = orthonormal_basis(&random_complex(12, 6, 1)).unwrap().q;
        let a = u.columns(0, 3).into_owned();
        let b = u.columns(0, 3) * c(0.6, 0.0) + u.columns(3, 3) * c(0.8, 0.0);
        let lam = vec![c(0.95, 0.1), c(0.8, -0.3), c(0.5, 0.0)];
        let entry = |label: &str, m: CMatrix| RegimeEntry {
            label: label.into(),
            parameter: 0.0,
            model: DmdModel::from_parts(m, lam.clone(), vec![], 1.0).unwrap(),
        };
        let twin = RegimeLibrary::new(vec![entry("A", a), entry("B", b)]).unwrap();
        let flat = mu_b_vs_augmentation(&twin, &SensingOperator::identity(12), &[0, 1, 2, 5, 10], Execution::Sequential)
            .unwrap();
        for (_, rep) in &flat {
            assert!((rep.mu_b - flat[0].1.mu_b).abs() < 1e-10, "{} vs {}", rep.mu_b, flat[0].1.mu_b);
        }
        assert!((flat[0].1.mu_b - 0.6 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stacked_observations_match_windows() {
        let snap = SnapshotMatrix::new(DMatrix::from_fn(3, 5, |i, t| (10 * i + t) as f64), 1.0, "x").unwrap();
        let op = SensingOperator::identity(3);
        let y = stacked_observations(&op, &snap, 2).unwrap();
        assert_eq!(y.shape(), (9, 3));
        for col in 0..3 {
            let w = stack_window(&snap.window(col, 3).unwrap());
            assert_eq!(y.column(col).into_owned(), w);
        }
    }

    proptest! {
        #[test]
        fn metric_ranges_and_symmetry(seed in any::<u64>(), r1 in 1usize..4, r2 in 1usize..4) {
            let s = subspaces(vec![random_complex(8, r1, seed), random_complex(8, r2, seed ^ 9), random_complex(8, 2, seed ^ 77)]);
            let (eta, _) = eta_alignment(&s).unwrap();
            let gamma = gamma_matrix(&s).unwrap();
            for m in [&eta.values, &gamma.values] {
                prop_assert!((m - m.transpose()).norm() < 1e-10);
                prop_assert!(m.iter().all(|&v| (0.0..=1.0 + METRIC_SLACK).contains(&v)));
            }
            for i in 0..3 {
                prop_assert_eq!(gamma.values[(i, i)], 1.0);
            }
        }

        #[test]
        fn rank_one_eta_equals_gamma(seed in any::<u64>()) {
            let s = subspaces(vec![random_complex(6, 1, seed), random_complex(6, 1, seed ^ 5)]);
            let (eta, _) = eta_alignment(&s).unwrap();
            let gamma = gamma_matrix(&s).unwrap();
            prop_assert!((eta.values[(0, 1)] - gamma.values[(0, 1)]).abs() < 1e-12);
        }
    }
}
