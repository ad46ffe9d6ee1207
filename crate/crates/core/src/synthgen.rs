//! Synthetic multi-regime data: exact linear systems with prescribed spectra
//! and an explicit advection-diffusion solver on a periodic grid.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dmd::RankPolicy;
use crate::error::{Error, Result};
use crate::library::Dataset;
use crate::linalg::{CMatrix, CVector};
use crate::parallel::Execution;
use crate::snapshots::{FieldGrid, SnapshotMatrix};

/// Field name used for generated scalar fields.
pub const SCALAR_FIELD: &str = "T";

/// Ties a regime's modes to a family: `φ = cos(a)·A + sin(a)·B + w·R`
/// where `A`, `B` come from the family seed and `R` from the regime's own
/// mode seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    pub family_seed: u64,
    pub angle: f64,
    pub own_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearRegimeSpec {
    pub label: String,
    #[serde(default)]
    pub parameter: f64,
    pub n: usize,
    /// Conjugate-closed spectrum, each entry `[re, im]`.
    pub eigenvalues: Vec<Complex64>,
    pub mode_seed: u64,
    pub s: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<MixingSpec>,
    /// Optional `[nx, ny]` layout of the state as a scalar field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

impl LinearRegimeSpec {
    pub fn r(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Generated linear regime with its exact decomposition.
#[derive(Debug, Clone)]
pub struct LinearRegime {
    pub snapshots: SnapshotMatrix,
    /// Unit-norm modes in the order of `eigenvalues`.
    pub modes: CMatrix,
    pub eigenvalues: Vec<Complex64>,
    pub amplitudes: CVector,
}

/// One group of the spectrum: a real eigenvalue or a conjugate pair
/// (`members[0]` has positive imaginary part).
enum Slot {
    Real(usize),
    Pair(usize, usize),
}

fn conjugate_slots(eigs: &[Complex64]) -> Result<Vec<Slot>> {
    let mut used = vec![false; eigs.len()];
    let mut slots = Vec::new();
    for i in 0..eigs.len() {
        if used[i] {
            continue;
        }
        let l = eigs[i];
        if !(l.re.is_finite() && l.im.is_finite()) {
            return Err(Error::Argument(format!("non-finite eigenvalue {l}")));
        }
        used[i] = true;
        if l.im == 0.0 {
            slots.push(Slot::Real(i));
            continue;
        }
        let tol = 1e-12 * l.norm().max(1.0);
        let partner = (0..eigs.len()).find(|&k| !used[k] && (eigs[k] - l.conj()).norm() <= tol);
        match partner {
            Some(k) => {
                used[k] = true;
                if l.im > 0.0 {
                    slots.push(Slot::Pair(i, k));
                } else {
                    slots.push(Slot::Pair(k, i));
                }
            }
            None => {
                return Err(Error::Argument(format!(
                    "spectrum is not closed under conjugation: {l} has no partner"
                )))
            }
        }
    }
    Ok(slots)
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, complex: bool) -> CVector {
    CVector::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = if complex { rng.sample(StandardNormal) } else { 0.0 };
        Complex64::new(re, im)
    })
}

/// Simulates `x(t) = Σ_k φ_k λ_kᵗ β_k` for `t = 0..s`; the result is real
/// because modes and amplitudes come in conjugate pairs.
pub fn gen_linear_regime(spec: &LinearRegimeSpec) -> Result<LinearRegime> {
    let n = spec.n;
    let r = spec.r();
    if n == 0 || r == 0 {
        return Err(Error::Argument("linear regime needs n >= 1 and at least one eigenvalue".into()));
    }
    if spec.s < 2 {
        return Err(Error::Argument(format!("need at least 2 snapshots, got {}", spec.s)));
    }
    if !(spec.dt.is_finite() && spec.dt > 0.0) {
        return Err(Error::Argument(format!("dt must be positive, got {}", spec.dt)));
    }
    let grid = match spec.grid {
        Some([nx, ny]) => {
            if nx * ny != n {
                return Err(Error::Argument(format!("grid {nx}x{ny} does not hold {n} components")));
            }
            Some(FieldGrid::unscaled(nx, ny, &[SCALAR_FIELD])?)
        }
        None => None,
    };
    let slots = conjugate_slots(&spec.eigenvalues)?;

    let mut own = ChaCha8Rng::seed_from_u64(spec.mode_seed);
    let mut family = spec.mixing.as_ref().map(|m| ChaCha8Rng::seed_from_u64(m.family_seed));
    let mut modes = CMatrix::zeros(n, r);
    let mut amplitudes = CVector::zeros(r);
    for slot in &slots {
        let complex = matches!(slot, Slot::Pair(..));
        let mut phi = gaussian_vector(&mut own, n, complex);
        if let (Some(mix), Some(rng)) = (&spec.mixing, family.as_mut()) {
            let a = gaussian_vector(rng, n, complex);
            let b = gaussian_vector(rng, n, complex);
            phi = a * Complex64::new(mix.angle.cos(), 0.0)
                + b * Complex64::new(mix.angle.sin(), 0.0)
                + phi * Complex64::new(mix.own_weight, 0.0);
        }
        let norm = phi.norm();
        if !(norm > 0.0) {
            return Err(Error::Numerical("generated a zero mode".into()));
        }
        phi.unscale_mut(norm);
        let beta = Complex64::new(own.sample(StandardNormal), if complex { own.sample(StandardNormal) } else { 0.0 });
        match *slot {
            Slot::Real(i) => {
                modes.set_column(i, &phi);
                amplitudes[i] = beta;
            }
            Slot::Pair(i, k) => {
                modes.set_column(k, &phi.map(|z| z.conj()));
                modes.set_column(i, &phi);
                amplitudes[i] = beta;
                amplitudes[k] = beta.conj();
            }
        }
    }

    let mut data = DMatrix::zeros(n, spec.s);
    let mut imag_max = 0.0_f64;
    let mut coeff = amplitudes.clone();
    for t in 0..spec.s {
        let x = &modes * &coeff;
        for i in 0..n {
            data[(i, t)] = x[i].re;
            imag_max = imag_max.max(x[i].im.abs());
        }
        for (c, l) in coeff.iter_mut().zip(&spec.eigenvalues) {
            *c *= l;
        }
    }
    let scale = data.amax().max(f64::MIN_POSITIVE);
    if imag_max > 1e-12 * scale.max(1.0) {
        return Err(Error::Numerical(format!("generated data is not real (imaginary part {imag_max:e})")));
    }
    let mut snapshots = SnapshotMatrix::new(data, spec.dt, spec.label.clone())?;
    if let Some(g) = grid {
        snapshots = snapshots.with_grid(g)?;
    }
    Ok(LinearRegime {
        snapshots,
        modes,
        eigenvalues: spec.eigenvalues.clone(),
        amplitudes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VelocityField {
    /// Constant velocity of magnitude `speed` pointing at `angle` radians.
    Uniform { speed: f64, angle: f64 },
    /// Divergence-free cellular flow `u = A sin(kx) cos(ky)`,
    /// `v = −A cos(kx) sin(ky)` with `k = 2π·cells`.
    Cellular { amplitude: f64, cells: usize },
}

impl VelocityField {
    /// Velocity at a point of the unit periodic square.
    pub fn at(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            VelocityField::Uniform { speed, angle } => (speed * angle.cos(), speed * angle.sin()),
            VelocityField::Cellular { amplitude, cells } => {
                let k = TAU * cells as f64;
                (
                    amplitude * (k * x).sin() * (k * y).cos(),
                    -amplitude * (k * x).cos() * (k * y).sin(),
                )
            }
        }
    }
}

fn default_substeps() -> usize {
    1
}

fn default_wavenumbers() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionRegimeSpec {
    pub label: String,
    #[serde(default)]
    pub parameter: f64,
    pub nx: usize,
    pub ny: usize,
    pub velocity: VelocityField,
    pub diffusivity: f64,
    pub s: usize,
    /// Interval between stored snapshots.
    pub dt: f64,
    /// Solver steps per stored snapshot.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub init_seed: u64,
    /// Highest wavenumber in the random initial field.
    #[serde(default = "default_wavenumbers")]
    pub init_wavenumbers: usize,
}

impl AdvectionRegimeSpec {
    /// Stability number of one solver step:
    /// `δt(max|u|/hx + max|v|/hy) + 2Dδt(1/hx² + 1/hy²)`.
    /// At most one means every update is a convex combination of old values.
    pub fn cfl_number(&self) -> f64 {
        let (hx, hy) = (1.0 / self.nx as f64, 1.0 / self.ny as f64);
        let step = self.dt / self.substeps as f64;
        let (mut umax, mut vmax) = (0.0_f64, 0.0_f64);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let (u, v) = self.velocity.at(ix as f64 * hx, iy as f64 * hy);
                umax = umax.max(u.abs());
                vmax = vmax.max(v.abs());
            }
        }
        step * (umax / hx + vmax / hy) + 2.0 * self.diffusivity * step * (1.0 / (hx * hx) + 1.0 / (hy * hy))
    }
}

/// Largest admissible stability number.
pub const CFL_LIMIT: f64 = 0.9;

/// Explicit first-order upwind advection with centred diffusion on the
/// periodic unit square, from a seeded smooth random initial field.
pub fn gen_advection_regime(spec: &AdvectionRegimeSpec) -> Result<SnapshotMatrix> {
    let (nx, ny) = (spec.nx, spec.ny);
    if nx < 3 || ny < 3 {
        return Err(Error::Argument(format!("advection grid must be at least 3x3, got {nx}x{ny}")));
    }
    if spec.s < 2 || spec.substeps == 0 {
        return Err(Error::Argument("need s >= 2 snapshots and at least one substep".into()));
    }
    if !(spec.dt.is_finite() && spec.dt > 0.0) || !(spec.diffusivity >= 0.0) {
        return Err(Error::Argument("dt must be positive and diffusivity non-negative".into()));
    }
    let cfl = spec.cfl_number();
    if !(cfl <= CFL_LIMIT) {
        return Err(Error::Argument(format!(
            "unstable step: stability number {cfl:.4} exceeds {CFL_LIMIT}"
        )));
    }
    let (hx, hy) = (1.0 / nx as f64, 1.0 / ny as f64);
    let step = spec.dt / spec.substeps as f64;
    let idx = |ix: usize, iy: usize| iy * nx + ix;
    let velocity: Vec<(f64, f64)> = (0..nx * ny)
        .map(|c| spec.velocity.at((c % nx) as f64 * hx, (c / nx) as f64 * hy))
        .collect();

    let mut field = initial_field(nx, ny, spec.init_seed, spec.init_wavenumbers);
    let mut next = vec![0.0; nx * ny];
    let mut data = DMatrix::zeros(nx * ny, spec.s);
    for t in 0..spec.s {
        data.set_column(t, &DVector::from_column_slice(&field));
        if t + 1 == spec.s {
            break;
        }
        for _ in 0..spec.substeps {
            for iy in 0..ny {
                let (ym, yp) = ((iy + ny - 1) % ny, (iy + 1) % ny);
                for ix in 0..nx {
                    let (xm, xp) = ((ix + nx - 1) % nx, (ix + 1) % nx);
                    let c = idx(ix, iy);
                    let f = field[c];
                    let (u, v) = velocity[c];
                    let dx = if u > 0.0 { f - field[idx(xm, iy)] } else { field[idx(xp, iy)] - f } / hx;
                    let dy = if v > 0.0 { f - field[idx(ix, ym)] } else { field[idx(ix, yp)] - f } / hy;
                    let lap = (field[idx(xm, iy)] - 2.0 * f + field[idx(xp, iy)]) / (hx * hx)
                        + (field[idx(ix, ym)] - 2.0 * f + field[idx(ix, yp)]) / (hy * hy);
                    next[c] = f + step * (-u * dx - v * dy + spec.diffusivity * lap);
                }
            }
            std::mem::swap(&mut field, &mut next);
        }
    }
    SnapshotMatrix::new(data, spec.dt, spec.label.clone())?.with_grid(FieldGrid::unscaled(nx, ny, &[SCALAR_FIELD])?)
}

/// Random Fourier series with amplitudes decaying like `1/(1 + |k|²)`.
fn initial_field(nx: usize, ny: usize, seed: u64, kmax: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = kmax as i64;
    let mut terms = Vec::new();
    for kx in -k..=k {
        for ky in 0..=k {
            if ky == 0 && kx <= 0 {
                continue;
            }
            let weight = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            terms.push((kx as f64, ky as f64, a * weight, b * weight));
        }
    }
    (0..nx * ny)
        .map(|c| {
            let (x, y) = ((c % nx) as f64 / nx as f64, (c / nx) as f64 / ny as f64);
            terms
                .iter()
                .map(|&(kx, ky, a, b)| {
                    let phase = TAU * (kx * x + ky * y);
                    a * phase.cos() + b * phase.sin()
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegimeSpec {
    Linear(LinearRegimeSpec),
    Advection(AdvectionRegimeSpec),
}

impl RegimeSpec {
    pub fn label(&self) -> &str {
        match self {
            RegimeSpec::Linear(s) => &s.label,
            RegimeSpec::Advection(s) => &s.label,
        }
    }

    pub fn parameter(&self) -> f64 {
        match self {
            RegimeSpec::Linear(s) => s.parameter,
            RegimeSpec::Advection(s) => s.parameter,
        }
    }

    pub fn generate(&self) -> Result<SnapshotMatrix> {
        match self {
            RegimeSpec::Linear(s) => Ok(gen_linear_regime(s)?.snapshots),
            RegimeSpec::Advection(s) => gen_advection_regime(s),
        }
    }
}

/// Train/test split of a generated suite.
#[derive(Debug, Clone)]
pub struct Suite {
    pub train: Vec<Dataset>,
    /// `None` when the whole record went to training.
    pub test: Vec<Option<SnapshotMatrix>>,
}

impl Suite {
    /// Test sets, failing if any regime has none.
    pub fn test_sets(&self) -> Result<Vec<SnapshotMatrix>> {
        self.test
            .iter()
            .zip(&self.train)
            .map(|(t, d)| {
                t.clone()
                    .ok_or_else(|| Error::Argument(format!("regime {:?} has no test data", d.label)))
            })
            .collect()
    }
}

/// Splits a record: the first `⌊s·train_fraction⌋` snapshots train, the rest
/// test. The test part must hold at least `j_max + 1` (and 2) snapshots.
pub fn split_record(
    snap: &SnapshotMatrix,
    train_fraction: f64,
    j_max: usize,
) -> Result<(SnapshotMatrix, Option<SnapshotMatrix>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Argument(format!("train fraction must lie in (0, 1], got {train_fraction}")));
    }
    let s = snap.len();
    let n_train = ((s as f64) * train_fraction).floor() as usize;
    let n_test = s - n_train;
    if n_train < 2 {
        return Err(Error::Argument(format!(
            "{:?}: {n_train} training snapshots, need at least 2",
            snap.label()
        )));
    }
    let train = snap.slice(0, n_train)?;
    if n_test == 0 {
        return Ok((train, None));
    }
    if n_test < (j_max + 1).max(2) {
        return Err(Error::Argument(format!(
            "{:?}: {n_test} test snapshots cannot hold windows of {} steps",
            snap.label(),
            j_max + 1
        )));
    }
    Ok((train, Some(snap.slice(n_train, n_test)?)))
}

/// Generates every regime (in parallel when enabled) and splits each into
/// disjoint training and test time ranges.
pub fn gen_suite(specs: &[RegimeSpec], train_fraction: f64, j_max: usize, exec: Execution) -> Result<Suite> {
    if specs.is_empty() {
        return Err(Error::Argument("empty suite".into()));
    }
    let records = exec.try_map(specs.len(), |k| specs[k].generate())?;
    let mut train = Vec::with_capacity(specs.len());
    let mut test = Vec::with_capacity(specs.len());
    for (spec, record) in specs.iter().zip(&records) {
        let (tr, te) = split_record(record, train_fraction, j_max)?;
        train.push(Dataset::new(spec.label(), spec.parameter(), tr));
        test.push(te);
    }
    Ok(Suite { train, test })
}

/// A family of linear regimes indexed by a scalar parameter `q`: pair `k`
/// has eigenvalues `ρ_k exp(±i ω_k (1 + frequency_shift·q))` and modes mixed
/// at angle `mode_rotation·q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFamilySpec {
    pub nx: usize,
    pub ny: usize,
    pub s: usize,
    pub dt: f64,
    pub moduli: Vec<f64>,
    /// Radians per sample at `q = 0`.
    pub base_frequencies: Vec<f64>,
    pub frequency_shift: f64,
    pub mode_rotation: f64,
    pub own_weight: f64,
    pub family_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyMember {
    pub label: String,
    pub parameter: f64,
    pub mode_seed: u64,
}

impl LinearFamilySpec {
    pub fn eigenvalues(&self, q: f64) -> Result<Vec<Complex64>> {
        if self.moduli.len() != self.base_frequencies.len() || self.moduli.is_empty() {
            return Err(Error::Argument("need one modulus per base frequency".into()));
        }
        let mut out = Vec::with_capacity(2 * self.moduli.len());
        for (&rho, &w) in self.moduli.iter().zip(&self.base_frequencies) {
            let l = Complex64::from_polar(rho, w * (1.0 + self.frequency_shift * q));
            out.push(l);
            out.push(l.conj());
        }
        Ok(out)
    }

    pub fn regime(&self, member: &FamilyMember) -> Result<LinearRegimeSpec> {
        Ok(LinearRegimeSpec {
            label: member.label.clone(),
            parameter: member.parameter,
            n: self.nx * self.ny,
            eigenvalues: self.eigenvalues(member.parameter)?,
            mode_seed: member.mode_seed,
            s: self.s,
            dt: self.dt,
            mixing: Some(MixingSpec {
                family_seed: self.family_seed,
                angle: self.mode_rotation * member.parameter,
                own_weight: self.own_weight,
            }),
            grid: Some([self.nx, self.ny]),
        })
    }
}

/// Structured-text description of a synthetic experiment suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub train_fraction: f64,
    pub j_max: usize,
    pub rank_policy: String,
    pub family: LinearFamilySpec,
    pub regimes: Vec<FamilyMember>,
    /// Regimes kept out of the library for out-of-sample tests.
    #[serde(default)]
    pub held_out: Vec<FamilyMember>,
    /// Extra regimes given explicitly rather than through the family.
    #[serde(default)]
    pub extra: Vec<RegimeSpec>,
}

impl SuiteConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Argument(format!("suite config: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite config serializes")
    }

    pub fn rank_policy(&self) -> Result<RankPolicy> {
        self.rank_policy.parse()
    }

    /// Library regimes followed by the extra ones.
    pub fn library_specs(&self) -> Result<Vec<RegimeSpec>> {
        let mut specs = self
            .regimes
            .iter()
            .map(|m| self.family.regime(m).map(RegimeSpec::Linear))
            .collect::<Result<Vec<_>>>()?;
        specs.extend(self.extra.iter().cloned());
        Ok(specs)
    }

    pub fn held_out_specs(&self) -> Result<Vec<RegimeSpec>> {
        self.held_out
            .iter()
            .map(|m| self.family.regime(m).map(RegimeSpec::Linear))
            .collect()
    }
}

/// The desk-scale suite shipped in `configs/suite.toml`: six regimes of a
/// 50×50 scalar field with five oscillatory pairs each (`r = 10`), 200
/// snapshots split evenly, plus one held-out regime between the second and
/// third library regimes.
pub fn committed_suite() -> SuiteConfig {
    let member = |label: &str, parameter: f64, mode_seed: u64| FamilyMember {
        label: label.into(),
        parameter,
        mode_seed,
    };
    SuiteConfig {
        train_fraction: 0.5,
        j_max: 10,
        rank_policy: "fixed:10".into(),
        family: LinearFamilySpec {
            nx: 50,
            ny: 50,
            s: 200,
            dt: 1.0,
            moduli: vec![0.999, 0.998, 0.997, 0.996, 0.995],
            base_frequencies: vec![0.06, 0.13, 0.21, 0.3, 0.4],
            frequency_shift: 0.3,
            mode_rotation: 0.15,
            own_weight: 0.1,
            family_seed: 2024,
        },
        regimes: (0..6)
            .map(|k| member(&format!("R{}", k + 1), k as f64, 101 + k as u64))
            .collect(),
        held_out: vec![member("H1", 1.25, 901)],
        extra: Vec::new(),
    }
}
