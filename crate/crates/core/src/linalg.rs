//! Dense linear-algebra helpers shared by the decomposition, classification
//! and metrics code. Matrices are nalgebra types; SVD and the non-symmetric
//! eigenproblem are delegated to faer, QR stays in nalgebra.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Element types both backends understand (`f64` and `Complex64`).
pub trait Scalar:
    nalgebra::ComplexField<RealField = f64> + faer::traits::ComplexField<Real = f64> + Copy
{
}

impl<T> Scalar for T where
    T: nalgebra::ComplexField<RealField = f64> + faer::traits::ComplexField<Real = f64> + Copy
{
}

/// Lifts a real matrix into the complex field.
pub fn complexify(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

fn to_faer<T: Scalar>(m: &DMatrix<T>) -> faer::Mat<T> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer<T: Scalar>(m: faer::MatRef<'_, T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD `A = U diag(σ) Vᴴ` with `σ` in descending order.
#[derive(Debug, Clone)]
pub(crate) struct Svd<T: Scalar> {
    pub u: Option<DMatrix<T>>,
    pub singular_values: DVector<f64>,
    pub v_t: Option<DMatrix<T>>,
}

pub(crate) fn svd<T: Scalar>(m: DMatrix<T>, compute_u: bool, compute_v: bool) -> Result<Svd<T>> {
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return Ok(Svd {
            u: compute_u.then(|| DMatrix::zeros(rows, 0)),
            singular_values: DVector::zeros(0),
            v_t: compute_v.then(|| DMatrix::zeros(0, cols)),
        });
    }
    if m.iter().any(|z| !nalgebra::ComplexField::is_finite(z)) {
        return Err(Error::Numerical("SVD input has non-finite entries".into()));
    }
    let a = to_faer(&m);
    if !compute_u && !compute_v {
        let sv = a
            .singular_values()
            .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
        return Ok(Svd {
            u: None,
            singular_values: sorted_desc(sv),
            v_t: None,
        });
    }
    let dec = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let k = rows.min(cols);
    let s = dec.S().column_vector();
    let singular_values = DVector::from_fn(k, |i, _| nalgebra::ComplexField::real(s[i]));
    debug_assert!(singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    Ok(Svd {
        u: compute_u.then(|| from_faer(dec.U())),
        singular_values,
        v_t: compute_v.then(|| from_faer(dec.V()).adjoint()),
    })
}

fn sorted_desc(mut v: Vec<f64>) -> DVector<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(v)
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(m: &DMatrix<T>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    Ok(svd(m.clone(), false, false)?.singular_values.iter().copied().collect())
}

/// Largest singular value, zero for an empty matrix.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Moore–Penrose pseudoinverse with the rank-revealing cut-off
/// `max(rows, cols) · eps · sigma_max`.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: CMatrix,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
}

pub fn pseudo_inverse(a: &CMatrix) -> Result<PseudoInverse> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(PseudoInverse {
            matrix: CMatrix::zeros(cols, rows),
            rank: 0,
            singular_values: Vec::new(),
            tolerance: 0.0,
        });
    }
    let dec = svd(a.clone(), true, true)?;
    let sigma: Vec<f64> = dec.singular_values.iter().copied().collect();
    let tolerance = rows.max(cols) as f64 * f64::EPSILON * sigma[0];
    let u = dec.u.as_ref().expect("u requested");
    let v_t = dec.v_t.as_ref().expect("v_t requested");

    let mut matrix = CMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (k, &s) in sigma.iter().enumerate() {
        if s <= tolerance || s == 0.0 {
            break;
        }
        rank += 1;
        // V_k (1/s) U_kᴴ, where V_k = v_t.row(k)ᴴ
        let v = v_t.row(k).adjoint();
        let u_k = u.column(k).adjoint();
        matrix += (v * u_k).scale(1.0 / s);
    }
    Ok(PseudoInverse {
        matrix,
        rank,
        singular_values: sigma,
        tolerance,
    })
}

/// Orthonormal basis for the column span of `a`.
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    pub q: CMatrix,
    /// Numerical rank detected on the triangular factor.
    pub rank: usize,
}

impl OrthonormalBasis {
    pub fn is_full_rank(&self, columns: usize) -> bool {
        self.rank == columns
    }
}

/// Thin QR orthonormalization. When the triangular factor reveals a rank
/// drop the basis falls back to the leading left singular vectors so the
/// returned `q` still spans exactly the numerical range.
pub fn orthonormal_basis(a: &CMatrix) -> Result<OrthonormalBasis> {
    let (rows, cols) = a.shape();
    if cols == 0 || rows == 0 {
        return Ok(OrthonormalBasis {
            q: CMatrix::zeros(rows, 0),
            rank: 0,
        });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag_max = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].norm())
        .fold(0.0_f64, f64::max);
    let tol = rows.max(cols) as f64 * f64::EPSILON * diag_max.max(f64::MIN_POSITIVE);
    let full = cols <= rows && (0..cols).all(|i| r[(i, i)].norm() > tol * 1e3);
    if full {
        return Ok(OrthonormalBasis {
            q: qr.q(),
            rank: cols,
        });
    }
    let dec = svd(a.clone(), true, false)?;
    let sigma = &dec.singular_values;
    let cut = rows.max(cols) as f64 * f64::EPSILON * sigma[0];
    let rank = sigma.iter().filter(|&&s| s > cut).count();
    let u = dec.u.expect("u requested");
    Ok(OrthonormalBasis {
        q: u.columns(0, rank).into_owned(),
        rank,
    })
}

/// Ordering used for every eigenvalue list: descending modulus, then
/// descending real part, then ascending imaginary part.
pub fn spectral_order(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(a.im.total_cmp(&b.im))
}

/// Eigendecomposition of a small real (non-symmetric) matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<Complex64>,
    /// Unit-norm eigenvectors as columns, in the order of `values`.
    pub vectors: CMatrix,
    /// 2-norm condition number of the eigenvector matrix.
    pub condition: f64,
}

/// Eigenvalues are sorted with [`spectral_order`]; conjugate pairs are made
/// exact conjugates (values and vectors) of each other. A defective matrix
/// shows up as a huge `condition`.
pub fn eigen_decompose(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Vec::new(),
            vectors: CMatrix::zeros(0, 0),
            condition: 1.0,
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigenproblem input has non-finite entries".into()));
    }
    let dec = to_faer(a)
        .eigen()
        .map_err(|e| Error::Numerical(format!("eigenvalue iteration did not converge: {e:?}")))?;
    let s = dec.S().column_vector();
    let mut raw_values: Vec<Complex64> = (0..n).map(|i| s[i]).collect();
    let partner = pair_conjugates(&mut raw_values);
    let raw_vectors = from_faer(dec.U());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| spectral_order(&raw_values[x], &raw_values[y]));
    let values: Vec<Complex64> = order.iter().map(|&i| raw_values[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (pos, &i) in order.iter().enumerate() {
        match partner[i] {
            Some(k) if raw_values[i].im < 0.0 => {
                let v = normalize_phase(raw_vectors.column(k).into_owned());
                vectors.set_column(pos, &v.map(|z| z.conj()));
            }
            _ => {
                let v = normalize_phase(raw_vectors.column(i).into_owned());
                vectors.set_column(pos, &v);
            }
        }
    }

    let sv = singular_values(&vectors)?;
    let smin = *sv.last().unwrap_or(&0.0);
    let condition = if smin > 0.0 { sv[0] / smin } else { f64::INFINITY };
    Ok(EigenDecomposition {
        values,
        vectors,
        condition,
    })
}

/// Forces conjugate pairs in a spectrum computed from a real matrix to be
/// exact conjugates of each other; returns each member's partner.
fn pair_conjugates(values: &mut [Complex64]) -> Vec<Option<usize>> {
    let n = values.len();
    let mut partner = vec![None; n];
    let mut used = vec![false; n];
    for i in 0..n {
        if used[i] || values[i].im <= 0.0 {
            continue;
        }
        let target = values[i].conj();
        let found = (0..n)
            .filter(|&k| !used[k] && k != i && values[k].im < 0.0)
            .min_by(|&x, &y| {
                (values[x] - target)
                    .norm()
                    .total_cmp(&(values[y] - target).norm())
            });
        if let Some(k) = found {
            values[k] = target;
            used[k] = true;
            partner[i] = Some(k);
            partner[k] = Some(i);
        }
        used[i] = true;
    }
    partner
}

/// Rotates `v` so its largest-magnitude entry is real and positive, then
/// scales it to unit 2-norm.
pub fn normalize_phase(mut v: CVector) -> CVector {
    let (idx, _) = v
        .iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bm), (i, z)| {
            if z.norm() > bm {
                (i, z.norm())
            } else {
                (bi, bm)
            }
        });
    let pivot = v[idx];
    if pivot.norm() > 0.0 {
        let rot = pivot.conj() / pivot.norm();
        v *= rot;
        v[idx] = Complex64::new(v[idx].re, 0.0);
    }
    let norm = v.norm();
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    v
}

/// Frobenius norm of a complex matrix.
pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
