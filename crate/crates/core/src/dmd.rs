//! Dynamic mode decomposition: truncated SVD of the shifted snapshot pair,
//! the reduced operator, and the DMD modes and eigenvalues.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, complexify, CMatrix};
use crate::snapshots::SnapshotMatrix;

/// Eigenvector matrices worse conditioned than this mark the model defective.
pub const DEFECTIVE_CONDITION: f64 = 1e12;

const DEFAULT_SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankKind {
    /// Keep exactly `r` singular triplets (capped by what the data supports).
    Fixed(usize),
    /// Smallest `r` whose cumulative energy `Σσ²` reaches the threshold.
    Energy(f64),
}

/// How many POD directions to keep before forming the reduced operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPolicy {
    pub kind: RankKind,
    /// Singular values with `σ_i / σ_1` below this are always dropped.
    pub sigma_rel_floor: f64,
}

impl RankPolicy {
    pub fn fixed(r: usize) -> Self {
        Self {
            kind: RankKind::Fixed(r),
            sigma_rel_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn energy(threshold: f64) -> Self {
        Self {
            kind: RankKind::Energy(threshold),
            sigma_rel_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.sigma_rel_floor = floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RankKind::Fixed(0) => Err(Error::Argument("fixed rank must be at least 1".into())),
            RankKind::Energy(t) if !(t > 0.0 && t <= 1.0) => Err(Error::Argument(format!(
                "energy threshold must lie in (0, 1], got {t}"
            ))),
            _ if !(self.sigma_rel_floor >= 0.0 && self.sigma_rel_floor.is_finite()) => {
                Err(Error::Argument("singular-value floor must be nonnegative".into()))
            }
            _ => Ok(()),
        }
    }

    /// Rank selected for descending singular values `sigma`.
    pub fn effective_rank(&self, sigma: &[f64]) -> Result<usize> {
        self.validate()?;
        let s1 = sigma.first().copied().unwrap_or(0.0);
        if s1 <= 0.0 {
            return Err(Error::Rank("data matrix is identically zero".into()));
        }
        let admissible = sigma
            .iter()
            .take_while(|&&s| s / s1 >= self.sigma_rel_floor && s > 0.0)
            .count();
        let r = match self.kind {
            RankKind::Fixed(r) => r,
            RankKind::Energy(tau) => {
                let total: f64 = sigma.iter().map(|s| s * s).sum();
                let mut acc = 0.0;
                let mut r = sigma.len();
                for (i, s) in sigma.iter().enumerate() {
                    acc += s * s;
                    if acc / total >= tau {
                        r = i + 1;
                        break;
                    }
                }
                r
            }
        };
        Ok(r.min(admissible).max(1))
    }
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self::energy(0.99)
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RankKind::Fixed(r) => write!(f, "fixed:{r}"),
            RankKind::Energy(t) => write!(f, "energy:{t}"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    /// Parses `fixed:R` or `energy:T`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("rank policy {s:?}: expected fixed:R or energy:T")))?;
        let policy = match kind.trim() {
            "fixed" => Self::fixed(
                value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad fixed rank {value:?}")))?,
            ),
            "energy" => Self::energy(
                value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad energy threshold {value:?}")))?,
            ),
            other => return Err(Error::Argument(format!("unknown rank policy kind {other:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Splits `[x(0) … x(s-1)]` into `X0 = [x(0) … x(s-2)]` and `X1 = [x(1) … x(s-1)]`.
pub fn split_pair(snap: &SnapshotMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = snap.len();
    if s < 2 {
        return Err(Error::Dimension(format!("need at least 2 snapshots, got {s}")));
    }
    let data = snap.data();
    Ok((
        data.columns(0, s - 1).into_owned(),
        data.columns(1, s - 1).into_owned(),
    ))
}

/// Rank-`r` factors `X0 ≈ W_r Σ_r V_rᵀ`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `n × r`, orthonormal columns.
    pub left: DMatrix<f64>,
    /// Leading `r` singular values.
    pub sigma: DVector<f64>,
    /// `(s-1) × r`, orthonormal columns.
    pub right: DMatrix<f64>,
    /// Every singular value of `X0`, descending.
    pub all_singular_values: Vec<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * DMatrix::from_diagonal(&self.sigma) * self.right.transpose()
    }
}

pub fn truncated_svd(x0: &DMatrix<f64>, policy: &RankPolicy) -> Result<TruncatedSvd> {
    if x0.is_empty() {
        return Err(Error::Rank("empty data matrix".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("data matrix contains non-finite entries".into()));
    }
    let dec = linalg::svd(x0.clone(), true, true)?;
    let all: Vec<f64> = dec.singular_values.iter().copied().collect();
    let r = policy.effective_rank(&all)?;
    let u = dec.u.expect("u requested");
    let v_t = dec.v_t.expect("v_t requested");
    Ok(TruncatedSvd {
        left: u.columns(0, r).into_owned(),
        sigma: DVector::from_iterator(r, all.iter().copied().take(r)),
        right: v_t.rows(0, r).transpose(),
        all_singular_values: all,
    })
}

/// `A_r = W_rᵀ X1 V_r Σ_r⁻¹`.
pub fn reduced_operator(svd: &TruncatedSvd, x1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, r) = svd.left.shape();
    if x1.nrows() != n || x1.ncols() != svd.right.nrows() {
        return Err(Error::Dimension(format!(
            "X1 is {}x{}, expected {}x{}",
            x1.nrows(),
            x1.ncols(),
            n,
            svd.right.nrows()
        )));
    }
    let s1 = svd.sigma.get(0).copied().unwrap_or(0.0);
    if let Some(bad) = svd.sigma.iter().find(|&&s| !(s > 0.0) || s / s1 < DEFAULT_SIGMA_FLOOR) {
        return Err(Error::Singular(format!(
            "singular value {bad:e} below the floor; truncate before inverting"
        )));
    }
    let inv = DMatrix::from_diagonal(&svd.sigma.map(|s| 1.0 / s));
    let a_r = svd.left.transpose() * x1 * &svd.right * inv;
    debug_assert_eq!(a_r.shape(), (r, r));
    Ok(a_r)
}

/// DMD modes and eigenvalues of one snapshot set.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdModel {
    modes: CMatrix,
    eigenvalues: Vec<Complex64>,
    singular_values: Vec<f64>,
    dt: f64,
    energy_captured: f64,
    eigvec_condition: f64,
}

impl DmdModel {
    /// Assembles a model from explicit modes and eigenvalues. Mode columns are
    /// rescaled to unit 2-norm. `singular_values` may be empty, in which case
    /// the captured energy is reported as 1.
    pub fn from_parts(
        modes: CMatrix,
        eigenvalues: Vec<Complex64>,
        singular_values: Vec<f64>,
        dt: f64,
    ) -> Result<Self> {
        if modes.ncols() != eigenvalues.len() {
            return Err(Error::Dimension(format!(
                "{} modes but {} eigenvalues",
                modes.ncols(),
                eigenvalues.len()
            )));
        }
        if modes.ncols() == 0 || modes.nrows() == 0 {
            return Err(Error::Rank("a model needs at least one mode".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Argument(format!("sampling interval must be positive, got {dt}")));
        }
        let mut modes = modes;
        for mut col in modes.column_iter_mut() {
            let norm = col.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Rank("mode with zero or non-finite norm".into()));
            }
            col /= Complex64::new(norm, 0.0);
        }
        let r = modes.ncols();
        let energy_captured = energy_fraction(&singular_values, r);
        let eigvec_condition = {
            let sv = linalg::singular_values(&modes)?;
            let smin = *sv.last().unwrap_or(&0.0);
            if smin > 0.0 { sv[0] / smin } else { f64::INFINITY }
        };
        Ok(Self {
            modes,
            eigenvalues,
            singular_values,
            dt,
            energy_captured,
            eigvec_condition,
        })
    }

    /// Reassembles a persisted model without renormalizing anything.
    pub(crate) fn restore(
        modes: CMatrix,
        eigenvalues: Vec<Complex64>,
        singular_values: Vec<f64>,
        dt: f64,
        eigvec_condition: f64,
    ) -> Self {
        let energy_captured = energy_fraction(&singular_values, eigenvalues.len());
        Self {
            modes,
            eigenvalues,
            singular_values,
            dt,
            energy_captured,
            eigvec_condition,
        }
    }

    /// `n × r` complex modes, unit 2-norm columns.
    pub fn modes(&self) -> &CMatrix {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn state_dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn energy_captured(&self) -> f64 {
        self.energy_captured
    }

    /// Condition number of the reduced eigenvector matrix (or of the mode
    /// matrix for models assembled from parts).
    pub fn eigvec_condition(&self) -> f64 {
        self.eigvec_condition
    }

    /// Warnings attached to the decomposition (currently only defectiveness).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(self.eigvec_condition <= DEFECTIVE_CONDITION) {
            w.push(format!(
                "reduced operator is numerically defective (eigenvector condition {:e})",
                self.eigvec_condition
            ));
        }
        w
    }

    /// Continuous-time exponents `ln(λ)/dt`.
    pub fn continuous_eigenvalues(&self) -> Vec<Complex64> {
        self.eigenvalues.iter().map(|l| l.ln() / self.dt).collect()
    }
}

fn energy_fraction(sigma: &[f64], r: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    sigma.iter().take(r).map(|s| s * s).sum::<f64>() / total
}

/// Full pipeline: split, truncate, reduce, eigendecompose, lift the modes.
pub fn dmd_decompose(snap: &SnapshotMatrix, policy: &RankPolicy) -> Result<DmdModel> {
    let (x0, x1) = split_pair(snap)?;
    let svd = truncated_svd(&x0, policy)?;
    let a_r = reduced_operator(&svd, &x1)?;
    let eig = linalg::eigen_decompose(&a_r)?;

    let mut modes = complexify(&svd.left) * &eig.vectors;
    for mut col in modes.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= Complex64::new(norm, 0.0);
        }
    }
    let r = svd.rank();
    Ok(DmdModel {
        modes,
        eigenvalues: eig.values,
        energy_captured: energy_fraction(&svd.all_singular_values, r),
        singular_values: svd.all_singular_values,
        dt: snap.dt(),
        eigvec_condition: eig.condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn snap(data: DMatrix<f64>) -> SnapshotMatrix {
        SnapshotMatrix::new(data, 1.0, "t").unwrap()
    }

    /// Random orthogonal matrix from the QR of a fixed pseudo-random matrix.
    fn orthogonal(n: usize, salt: f64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 13 + j * 7) as f64 * 0.61 + salt).sin());
        g.qr().q()
    }

    fn trajectory(a: &DMatrix<f64>, x0: DVector<f64>, s: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x0.len(), s);
        let mut x = x0;
        for t in 0..s {
            out.set_column(t, &x);
            x = a * x;
        }
        out
    }

    fn contains(values: &[Complex64], target: Complex64, tol: f64) -> bool {
        values.iter().any(|v| (v - target).norm() < tol)
    }

    #[test]
    fn rank_policy_parsing() {
        assert_eq!("fixed:20".parse::<RankPolicy>().unwrap(), RankPolicy::fixed(20));
        assert_eq!("energy:0.99".parse::<RankPolicy>().unwrap(), RankPolicy::energy(0.99));
        assert!("fixed:0".parse::<RankPolicy>().is_err());
        assert!("energy:1.5".parse::<RankPolicy>().is_err());
        assert!("other:3".parse::<RankPolicy>().is_err());
        assert_eq!(RankPolicy::fixed(3).to_string(), "fixed:3");
    }

    #[test]
    fn split_pair_cases() {
        let two = snap(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let (x0, x1) = split_pair(&two).unwrap();
        assert_eq!(x0.ncols(), 1);
        assert_eq!(x1.column(0)[0], 2.0);

        let constant = snap(DMatrix::from_element(3, 5, 1.5));
        let (x0, x1) = split_pair(&constant).unwrap();
        assert_eq!(x0, x1);

        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let geometric = snap(DMatrix::from_fn(3, 6, |i, t| v[i] * 2f64.powi(t as i32)));
        let (x0, x1) = split_pair(&geometric).unwrap();
        assert_eq!(x1, x0 * 2.0);
    }

    #[test]
    fn truncated_svd_identity_and_rank_one() {
        let id = DMatrix::<f64>::identity(4, 4);
        let t = truncated_svd(&id, &RankPolicy::fixed(4)).unwrap();
        assert!(t.sigma.iter().all(|s| (s - 1.0).abs() < 1e-14));
        assert!((t.reconstruct() - &id).norm() < 1e-14);

        let u = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let v = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let rank1 = &u * v.transpose();
        assert_eq!(truncated_svd(&rank1, &RankPolicy::energy(0.99)).unwrap().rank(), 1);
    }

    #[test]
    fn truncated_svd_rejects_zero_matrix() {
        let z = DMatrix::<f64>::zeros(5, 4);
        assert!(matches!(truncated_svd(&z, &RankPolicy::fixed(2)), Err(Error::Rank(_))));
    }

    #[test]
    fn reduced_operator_rejects_unfloored_sigma() {
        let svd = TruncatedSvd {
            left: DMatrix::identity(2, 2),
            sigma: DVector::from_vec(vec![1.0, 1e-15]),
            right: DMatrix::identity(2, 2),
            all_singular_values: vec![1.0, 1e-15],
        };
        let x1 = DMatrix::identity(2, 2);
        assert!(matches!(reduced_operator(&svd, &x1), Err(Error::Singular(_))));
    }

    #[test]
    fn steady_and_doubling_data() {
        let x0 = DMatrix::from_fn(6, 5, |i, j| ((i * 5 + j * 3) as f64 * 0.77).sin());
        let svd = truncated_svd(&x0, &RankPolicy::fixed(4)).unwrap();
        let eig = linalg::eigen_decompose(&reduced_operator(&svd, &x0).unwrap()).unwrap();
        assert!(eig.values.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-10));

        let eig = linalg::eigen_decompose(&reduced_operator(&svd, &(&x0 * 2.0)).unwrap()).unwrap();
        assert!(eig.values.iter().all(|v| (v - Complex64::new(2.0, 0.0)).norm() < 1e-10));
    }

    #[test]
    fn lifted_diagonal_system() {
        let q = orthogonal(2, 0.4);
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.5])) * q.transpose();
        let data = trajectory(&a, DVector::from_vec(vec![1.0, 0.7]), 10);
        let (x0, x1) = split_pair(&snap(data)).unwrap();
        let svd = truncated_svd(&x0, &RankPolicy::fixed(2)).unwrap();
        let eig = linalg::eigen_decompose(&reduced_operator(&svd, &x1).unwrap()).unwrap();
        assert!((eig.values[0] - Complex64::new(0.9, 0.0)).norm() < 1e-10);
        assert!((eig.values[1] - Complex64::new(0.5, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn decompose_symmetric_system() {
        let n = 6;
        let q = orthogonal(n, 1.3);
        let mut d = DVector::zeros(n);
        d[0] = 1.0;
        d[1] = 0.8;
        d[2] = 0.5;
        let a = &q * DMatrix::from_diagonal(&d) * q.transpose();
        let x0 = &q * DVector::from_vec(vec![1.0, 0.6, -0.8, 0.0, 0.0, 0.0]);
        let model = dmd_decompose(&snap(trajectory(&a, x0, 10)), &RankPolicy::fixed(3)).unwrap();
        assert_eq!(model.rank(), 3);
        for (got, want) in model.eigenvalues().iter().zip([1.0, 0.8, 0.5]) {
            assert!((got - Complex64::new(want, 0.0)).norm() < 1e-8, "{got} vs {want}");
        }
        for col in model.modes().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        assert!(model.warnings().is_empty());
    }

    #[test]
    fn decompose_constant_snapshots() {
        let model = dmd_decompose(
            &snap(DMatrix::from_fn(4, 6, |i, _| i as f64 + 1.0)),
            &RankPolicy::energy(0.99),
        )
        .unwrap();
        assert_eq!(model.rank(), 1, "{:?}", model.singular_values());
        assert!((model.eigenvalues()[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12, "{}", model.eigenvalues()[0]);
    }

    #[test]
    fn decompose_damped_rotation() {
        let theta: f64 = 0.3;
        let a = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]) * 0.9;
        let model = dmd_decompose(
            &snap(trajectory(&a, DVector::from_vec(vec![1.0, 0.2]), 12)),
            &RankPolicy::fixed(2),
        )
        .unwrap();
        let expected = Complex64::from_polar(0.9, theta);
        assert!(contains(model.eigenvalues(), expected, 1e-8));
        assert!(contains(model.eigenvalues(), expected.conj(), 1e-8));
        let ev = model.eigenvalues();
        assert!((ev[0] - ev[1].conj()).norm() < 1e-10);
        // conjugate eigenvalues carry conjugate modes
        let diff = model.modes().column(0).map(|z| z.conj()) - model.modes().column(1);
        assert!(diff.norm() < 1e-12);
    }

    #[test]
    fn mode_span_matches_pod_span() {
        let n = 8;
        let q = orthogonal(n, 2.1);
        let theta: f64 = 0.7;
        let mut a = DMatrix::zeros(n, n);
        a[(0, 0)] = 0.95 * theta.cos();
        a[(0, 1)] = -0.95 * theta.sin();
        a[(1, 0)] = 0.95 * theta.sin();
        a[(1, 1)] = 0.95 * theta.cos();
        a[(2, 2)] = 0.7;
        a[(3, 3)] = -0.6;
        let a = &q * a * q.transpose();
        let x0 = &q * DVector::from_fn(n, |i, _| if i < 4 { 1.0 + i as f64 * 0.1 } else { 0.0 });
        let data = trajectory(&a, x0, 14);
        let model = dmd_decompose(&snap(data.clone()), &RankPolicy::fixed(4)).unwrap();
        let (x0m, _) = split_pair(&snap(data)).unwrap();
        let svd = truncated_svd(&x0m, &RankPolicy::fixed(4)).unwrap();
        let pinv = linalg::pseudo_inverse(model.modes()).unwrap();
        let proj_modes = model.modes() * pinv.matrix;
        let proj_pod = complexify(&(&svd.left * svd.left.transpose()));
        let dist = linalg::spectral_norm(&(proj_modes - proj_pod)).unwrap();
        assert!(dist <= 1e-8, "projector distance {dist}");
    }

    #[test]
    fn energy_is_monotone_in_rank() {
        let data = DMatrix::from_fn(12, 9, |i, j| ((i * 3 + j * j) as f64 * 0.29).cos());
        let mut last = 0.0;
        for r in 1..=8 {
            let m = dmd_decompose(&snap(data.clone()), &RankPolicy::fixed(r)).unwrap();
            assert!(m.energy_captured() >= last - 1e-15);
            last = m.energy_captured();
        }
    }

    #[test]
    fn defective_operator_is_a_warning_not_an_error() {
        // x(t+1) = J x(t) with a Jordan block
        let j = DMatrix::from_row_slice(2, 2, &[0.9, 1.0, 0.0, 0.9]);
        let model = dmd_decompose(
            &snap(trajectory(&j, DVector::from_vec(vec![0.3, 1.0]), 8)),
            &RankPolicy::fixed(2),
        )
        .unwrap();
        assert!(model.eigvec_condition() > 1e6);
    }
}
