//! Measurement operators, their block-diagonal time lift, and SNR-calibrated
//! noisy measurements.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::snapshots::FieldGrid;

/// Name of the grid field sensed directly on the boundary; every other field
/// is treated as a velocity component and sensed `boundary_offset` layers in.
pub const TEMPERATURE_FIELD: &str = "T";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensingKind {
    Point,
    Boundary,
    Gaussian,
    Bernoulli,
    Identity,
    Tomographic,
}

impl SensingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SensingKind::Point => "point",
            SensingKind::Boundary => "boundary",
            SensingKind::Gaussian => "gaussian",
            SensingKind::Bernoulli => "bernoulli",
            SensingKind::Identity => "identity",
            SensingKind::Tomographic => "tomographic",
        }
    }
}

impl fmt::Display for SensingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "point" => SensingKind::Point,
            "boundary" => SensingKind::Boundary,
            "gaussian" => SensingKind::Gaussian,
            "bernoulli" => SensingKind::Bernoulli,
            "identity" => SensingKind::Identity,
            "tomographic" => SensingKind::Tomographic,
            other => return Err(Error::Argument(format!("unknown sensing kind {other:?}"))),
        })
    }
}

fn default_offset() -> usize {
    1
}

/// Declarative description of a sensing system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    pub kind: SensingKind,
    /// Sensor count for point, gaussian, bernoulli and tomographic kinds.
    #[serde(default)]
    pub p: usize,
    /// Boundary kind: sensors on the temperature field.
    #[serde(default)]
    pub p_t: usize,
    /// Boundary kind: sensors on the velocity fields.
    #[serde(default)]
    pub p_v: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_offset")]
    pub boundary_offset: usize,
    /// Explicit point-sensor components; overrides random placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

impl SensingConfig {
    pub fn new(kind: SensingKind) -> Self {
        Self {
            kind,
            p: 0,
            p_t: 0,
            p_v: 0,
            seed: 0,
            boundary_offset: 1,
            indices: None,
        }
    }

    pub fn point(p: usize, seed: u64) -> Self {
        Self {
            p,
            seed,
            ..Self::new(SensingKind::Point)
        }
    }

    pub fn boundary(p_t: usize, p_v: usize, seed: u64) -> Self {
        Self {
            p_t,
            p_v,
            seed,
            ..Self::new(SensingKind::Boundary)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Argument(format!("sensing config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sensing config serializes")
    }
}

/// A `p × n` real measurement matrix plus how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingOperator {
    matrix: DMatrix<f64>,
    kind: SensingKind,
    seed: Option<u64>,
    /// One state component per row for point and boundary kinds.
    sensor_indices: Option<Vec<usize>>,
}

impl SensingOperator {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            kind: SensingKind::Identity,
            seed: None,
            sensor_indices: Some((0..n).collect()),
        }
    }

    /// Wraps an arbitrary matrix (reported as a gaussian-kind operator unless
    /// every row is one-hot, in which case it becomes a point operator).
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Dimension("empty sensing matrix".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("sensing matrix has non-finite entries".into()));
        }
        let one_hot: Option<Vec<usize>> = matrix
            .row_iter()
            .map(|row| {
                let nz: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                (nz.len() == 1 && row[nz[0]] == 1.0).then(|| nz[0])
            })
            .collect();
        let kind = if one_hot.is_some() {
            SensingKind::Point
        } else {
            SensingKind::Gaussian
        };
        Ok(Self {
            matrix,
            kind,
            seed: None,
            sensor_indices: one_hot,
        })
    }

    fn from_indices(indices: Vec<usize>, n: usize, kind: SensingKind, seed: Option<u64>) -> Self {
        let mut matrix = DMatrix::zeros(indices.len(), n);
        for (row, &c) in indices.iter().enumerate() {
            matrix[(row, c)] = 1.0;
        }
        Self {
            matrix,
            kind,
            seed,
            sensor_indices: Some(indices),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> SensingKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn sensor_indices(&self) -> Option<&[usize]> {
        self.sensor_indices.as_deref()
    }

    /// Number of sensors `p`.
    pub fn sensors(&self) -> usize {
        self.matrix.nrows()
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// `C x` for a single state vector.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x.len())?;
        Ok(match &self.sensor_indices {
            Some(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i])),
            None => &self.matrix * x,
        })
    }

    /// `C Φ` for a complex basis.
    pub fn apply_complex(&self, phi: &CMatrix) -> Result<CMatrix> {
        self.check_dim(phi.nrows())?;
        Ok(match &self.sensor_indices {
            Some(idx) => CMatrix::from_fn(idx.len(), phi.ncols(), |r, c| phi[(idx[r], c)]),
            None => {
                let re = &self.matrix * phi.map(|z| z.re);
                let im = &self.matrix * phi.map(|z| z.im);
                CMatrix::from_fn(re.nrows(), re.ncols(), |r, c| {
                    Complex64::new(re[(r, c)], im[(r, c)])
                })
            }
        })
    }

    /// `C X` for a real data matrix.
    pub fn apply_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.nrows())?;
        Ok(match &self.sensor_indices {
            Some(idx) => DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]),
            None => &self.matrix * x,
        })
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.state_dim() {
            return Err(Error::Dimension(format!(
                "sensing operator expects state dimension {}, got {n}",
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Dense CSV export: header `row,c0,c1,…`, one line per sensor.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend((0..self.state_dim()).map(|c| format!("c{c}")));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.matrix.row_iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Builds a sensing operator for an `n`-dimensional state. Random kinds are
/// reproducible from `config.seed`.
pub fn make_sensing(config: &SensingConfig, n: usize, grid: Option<&FieldGrid>) -> Result<SensingOperator> {
    if n == 0 {
        return Err(Error::Dimension("state dimension must be positive".into()));
    }
    if let Some(g) = grid {
        if g.state_dim() != n {
            return Err(Error::Dimension(format!(
                "grid describes {} components, state has {n}",
                g.state_dim()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seed = Some(config.seed);
    match config.kind {
        SensingKind::Identity => Ok(SensingOperator::identity(n)),
        SensingKind::Point => {
            let indices = match &config.indices {
                Some(idx) => {
                    let mut seen = vec![false; n];
                    for &i in idx {
                        if i >= n {
                            return Err(Error::Argument(format!("sensor index {i} outside state of size {n}")));
                        }
                        if std::mem::replace(&mut seen[i], true) {
                            return Err(Error::Argument(format!("component {i} sensed twice")));
                        }
                    }
                    if idx.is_empty() {
                        return Err(Error::Argument("point sensing needs at least one index".into()));
                    }
                    idx.clone()
                }
                None => {
                    check_count(config.p, n, "point sensors")?;
                    let mut idx = index::sample(&mut rng, n, config.p).into_vec();
                    idx.sort_unstable();
                    idx
                }
            };
            Ok(SensingOperator::from_indices(indices, n, SensingKind::Point, seed))
        }
        SensingKind::Boundary => {
            let grid = grid.ok_or_else(|| Error::Argument("boundary sensing needs a field grid".into()))?;
            boundary_operator(config, grid, &mut rng)
        }
        SensingKind::Gaussian => {
            if config.p == 0 {
                return Err(Error::Argument("gaussian sensing needs p >= 1".into()));
            }
            let scale = 1.0 / (config.p as f64).sqrt();
            let matrix = DMatrix::from_fn(config.p, n, |_, _| {
                rng.sample::<f64, _>(StandardNormal) * scale
            });
            Ok(SensingOperator {
                matrix,
                kind: SensingKind::Gaussian,
                seed,
                sensor_indices: None,
            })
        }
        SensingKind::Bernoulli => {
            if config.p == 0 {
                return Err(Error::Argument("bernoulli sensing needs p >= 1".into()));
            }
            let scale = 1.0 / (config.p as f64).sqrt();
            let matrix = DMatrix::from_fn(config.p, n, |_, _| {
                if rng.random::<bool>() { scale } else { -scale }
            });
            Ok(SensingOperator {
                matrix,
                kind: SensingKind::Bernoulli,
                seed,
                sensor_indices: None,
            })
        }
        SensingKind::Tomographic => {
            let grid = grid.ok_or_else(|| Error::Argument("tomographic sensing needs a field grid".into()))?;
            tomographic_operator(config, grid, &mut rng)
        }
    }
}

fn check_count(p: usize, available: usize, what: &str) -> Result<()> {
    if p == 0 {
        return Err(Error::Argument(format!("{what}: count must be at least 1")));
    }
    if p > available {
        return Err(Error::Argument(format!(
            "{what}: requested {p} but only {available} eligible locations"
        )));
    }
    Ok(())
}

fn boundary_operator(config: &SensingConfig, grid: &FieldGrid, rng: &mut ChaCha8Rng) -> Result<SensingOperator> {
    let layer_nodes = |field: usize, layer: usize| -> Vec<usize> {
        let mut out = Vec::new();
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                if grid.boundary_layer(ix, iy) == layer {
                    out.push(grid.component(field, ix, iy));
                }
            }
        }
        out
    };
    if config.p_t + config.p_v == 0 {
        return Err(Error::Argument("boundary sensing needs p_t + p_v >= 1".into()));
    }
    let mut indices = Vec::with_capacity(config.p_t + config.p_v);
    if config.p_t > 0 {
        let t = grid.field_index(TEMPERATURE_FIELD).ok_or_else(|| {
            Error::Argument(format!("grid has no {TEMPERATURE_FIELD:?} field for temperature sensors"))
        })?;
        let eligible = layer_nodes(t, 0);
        check_count(config.p_t, eligible.len(), "boundary temperature sensors")?;
        let mut pick: Vec<usize> = index::sample(rng, eligible.len(), config.p_t)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        pick.sort_unstable();
        indices.extend(pick);
    }
    if config.p_v > 0 {
        let eligible: Vec<usize> = (0..grid.fields().len())
            .filter(|&f| grid.fields()[f] != TEMPERATURE_FIELD)
            .flat_map(|f| layer_nodes(f, config.boundary_offset))
            .collect();
        check_count(config.p_v, eligible.len(), "near-boundary velocity sensors")?;
        let mut pick: Vec<usize> = index::sample(rng, eligible.len(), config.p_v)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        pick.sort_unstable();
        indices.extend(pick);
    }
    Ok(SensingOperator::from_indices(
        indices,
        grid.state_dim(),
        SensingKind::Boundary,
        Some(config.seed),
    ))
}

/// Line integrals: each row sums one field along a full grid row (`iy`
/// fixed) or grid column (`ix` fixed). With `p = 0` every line is used.
fn tomographic_operator(config: &SensingConfig, grid: &FieldGrid, rng: &mut ChaCha8Rng) -> Result<SensingOperator> {
    let per_field = grid.nx() + grid.ny();
    let total = per_field * grid.fields().len();
    let lines: Vec<usize> = if config.p == 0 {
        (0..total).collect()
    } else {
        check_count(config.p, total, "tomographic lines")?;
        let mut l = index::sample(rng, total, config.p).into_vec();
        l.sort_unstable();
        l
    };
    let mut matrix = DMatrix::zeros(lines.len(), grid.state_dim());
    for (row, &line) in lines.iter().enumerate() {
        let field = line / per_field;
        let k = line % per_field;
        if k < grid.ny() {
            for ix in 0..grid.nx() {
                matrix[(row, grid.component(field, ix, k))] = 1.0;
            }
        } else {
            let ix = k - grid.ny();
            for iy in 0..grid.ny() {
                matrix[(row, grid.component(field, ix, iy))] = 1.0;
            }
        }
    }
    Ok(SensingOperator {
        matrix,
        kind: SensingKind::Tomographic,
        seed: Some(config.seed),
        sensor_indices: None,
    })
}

/// The `(j+1)p × (j+1)n` block-diagonal operator with `j + 1` copies of `C`.
pub fn block_diag_lift(op: &SensingOperator, j: usize) -> DMatrix<f64> {
    let (p, n) = op.matrix().shape();
    let mut out = DMatrix::zeros((j + 1) * p, (j + 1) * n);
    for b in 0..=j {
        out.view_mut((b * p, b * n), (p, n)).copy_from(op.matrix());
    }
    out
}

/// Stacked measurement `y(t:t+j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: DVector<f64>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    /// Number of stacked time steps minus one.
    pub depth: usize,
}

impl Measurement {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Noise fraction `‖ξ‖/‖y‖` for a signal-to-noise ratio in decibels.
pub fn noise_fraction(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Senses the columns of `window` (`n × (j+1)`, consecutive snapshots) and
/// stacks them. With `snr_db` set, adds seeded white Gaussian noise rescaled
/// so that `‖ξ‖₂ = 10^(−snr/20)·‖y_clean‖₂` exactly.
pub fn measure(
    op: &SensingOperator,
    window: &DMatrix<f64>,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Measurement> {
    if window.ncols() == 0 {
        return Err(Error::Argument("measurement window is empty".into()));
    }
    let sensed = op.apply_matrix(window)?;
    // column-major storage stacks y(t), y(t+1), …
    let clean = DVector::from_column_slice(sensed.as_slice());
    let values = match snr_db {
        None => clean,
        Some(snr) => {
            if !snr.is_finite() {
                return Err(Error::Argument(format!("SNR must be finite, got {snr}")));
            }
            let signal = clean.norm();
            if signal == 0.0 {
                return Err(Error::DegenerateSignal(
                    "zero clean signal: noise scale for a finite SNR is undefined".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noise = DVector::from_fn(clean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let raw = noise.norm();
            if raw == 0.0 {
                return Err(Error::Numerical("drew an all-zero noise vector".into()));
            }
            noise *= noise_fraction(snr) * signal / raw;
            clean + noise
        }
    };
    Ok(Measurement {
        values,
        snr_db,
        seed,
        depth: window.ncols() - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(n: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, cols, |i, j| ((i * 7 + j * 3) as f64 * 0.41).sin() + 0.1)
    }

    #[test]
    fn identity_kind_preserves_state() {
        let op = make_sensing(&SensingConfig::new(SensingKind::Identity), 5, None).unwrap();
        assert_eq!(op.matrix(), &DMatrix::<f64>::identity(5, 5));
        assert_eq!(op.sensors(), 5);
    }

    #[test]
    fn exhaustive_point_sensors_form_a_permutation() {
        let mut cfg = SensingConfig::new(SensingKind::Point);
        cfg.indices = Some(vec![3, 0, 4, 1, 2]);
        let op = make_sensing(&cfg, 5, None).unwrap();
        let m = op.matrix();
        for i in 0..5 {
            assert_eq!(m.row(i).sum(), 1.0);
            assert_eq!(m.column(i).sum(), 1.0);
        }
        let random = make_sensing(&SensingConfig::point(5, 9), 5, None).unwrap();
        assert_eq!(random.sensor_indices().unwrap(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn point_sensors_reject_duplicates_and_overflow() {
        let mut cfg = SensingConfig::new(SensingKind::Point);
        cfg.indices = Some(vec![1, 1]);
        assert!(make_sensing(&cfg, 5, None).is_err());
        assert!(make_sensing(&SensingConfig::point(6, 0), 5, None).is_err());
    }

    #[test]
    fn boundary_sensors_on_cavity_grid() {
        let grid = FieldGrid::new(
            50,
            50,
            vec!["ux".into(), "uy".into(), "T".into()],
            vec![5000.0, 5000.0, 1.0],
        )
        .unwrap();
        let op = make_sensing(&SensingConfig::boundary(50, 10, 3), grid.state_dim(), Some(&grid)).unwrap();
        assert_eq!(op.sensors(), 60);
        let idx = op.sensor_indices().unwrap();
        let nodes = grid.nodes();
        for (row, &c) in idx.iter().enumerate() {
            let field = c / nodes;
            let (ix, iy) = ((c % nodes) % 50, (c % nodes) / 50);
            if row < 50 {
                assert_eq!(grid.fields()[field], "T");
                assert_eq!(grid.boundary_layer(ix, iy), 0);
            } else {
                assert_ne!(grid.fields()[field], "T");
                assert_eq!(grid.boundary_layer(ix, iy), 1);
            }
            assert_eq!(op.matrix().row(row).sum(), 1.0);
        }
        let mut sorted = idx.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
    }

    #[test]
    fn boundary_sensing_guards() {
        let grid = FieldGrid::unscaled(4, 4, &["T"]).unwrap();
        // a 4x4 grid has 12 boundary nodes
        assert!(make_sensing(&SensingConfig::boundary(13, 0, 0), 16, Some(&grid)).is_err());
        assert!(make_sensing(&SensingConfig::boundary(12, 0, 0), 16, Some(&grid)).is_ok());
        assert!(make_sensing(&SensingConfig::boundary(2, 1, 0), 16, Some(&grid)).is_err());
        assert!(make_sensing(&SensingConfig::boundary(2, 0, 0), 16, None).is_err());
    }

    #[test]
    fn random_kinds_have_stated_scaling_and_are_seeded() {
        let mut g = SensingConfig::new(SensingKind::Gaussian);
        g.p = 40;
        g.seed = 11;
        let a = make_sensing(&g, 200, None).unwrap();
        let b = make_sensing(&g, 200, None).unwrap();
        assert_eq!(a, b);
        let var = a.matrix().iter().map(|v| v * v).sum::<f64>() / (40.0 * 200.0);
        assert!((var - 1.0 / 40.0).abs() < 0.1 / 40.0, "variance {var}");

        let mut bern = g.clone();
        bern.kind = SensingKind::Bernoulli;
        let m = make_sensing(&bern, 50, None).unwrap();
        let s = 1.0 / 40f64.sqrt();
        assert!(m.matrix().iter().all(|&v| v == s || v == -s));
    }

    #[test]
    fn tomographic_lines_sum_grid_rows_and_columns() {
        let grid = FieldGrid::unscaled(3, 2, &["T"]).unwrap();
        let op = make_sensing(&SensingConfig::new(SensingKind::Tomographic), 6, Some(&grid)).unwrap();
        assert_eq!(op.sensors(), 5);
        assert_eq!(op.matrix().row(0).sum(), 3.0);
        assert_eq!(op.matrix().row(4).sum(), 2.0);
        // every node lies on exactly one horizontal and one vertical line
        for c in 0..6 {
            assert_eq!(op.matrix().column(c).sum(), 2.0);
        }
    }

    #[test]
    fn block_lift_structure() {
        let op = SensingOperator::from_matrix(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(block_diag_lift(&op, 0), op.matrix().clone());
        let lifted = block_diag_lift(&op, 2);
        assert_eq!(lifted.shape(), (3, 6));
        for (row, col) in [(0, 0), (1, 2), (2, 4)] {
            assert_eq!(lifted[(row, col)], 1.0);
            assert_eq!(lifted.row(row).sum(), 1.0);
        }
    }

    #[test]
    fn lift_matches_per_block_application() {
        let mut g = SensingConfig::new(SensingKind::Gaussian);
        g.p = 4;
        g.seed = 5;
        let op = make_sensing(&g, 9, None).unwrap();
        let w = window(9, 4);
        let stacked = DVector::from_column_slice(w.as_slice());
        let lifted = block_diag_lift(&op, 3) * stacked;
        let m = measure(&op, &w, None, 0).unwrap();
        for b in 0..4 {
            let expected = op.matrix() * w.column(b);
            let got = lifted.rows(b * 4, 4);
            assert!((got - &expected).norm() == 0.0);
            assert!((m.values.rows(b * 4, 4) - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn noise_calibration() {
        let op = SensingOperator::identity(30);
        let w = window(30, 3);
        let clean = measure(&op, &w, None, 1).unwrap();
        assert_eq!(clean.values, DVector::from_column_slice(w.as_slice()));

        for (snr, frac) in [(20.0, 0.1), (10.0, 10f64.powf(-0.5))] {
            let noisy = measure(&op, &w, Some(snr), 17).unwrap();
            let ratio = (&noisy.values - &clean.values).norm() / clean.values.norm();
            assert!((ratio - frac).abs() < 1e-12, "{snr} dB: {ratio}");
        }
        assert!((noise_fraction(10.0) - 0.316_227_766_016_837_94).abs() < 1e-15);
    }

    #[test]
    fn zero_signal_with_snr_is_degenerate() {
        let op = SensingOperator::identity(4);
        let err = measure(&op, &DMatrix::zeros(4, 2), Some(20.0), 0);
        assert!(matches!(err, Err(Error::DegenerateSignal(_))));
        assert!(measure(&op, &DMatrix::zeros(4, 2), None, 0).is_ok());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = SensingConfig::boundary(50, 10, 42);
        let back = SensingConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let parsed = SensingConfig::from_toml("kind = \"point\"\np = 20\nseed = 7\n").unwrap();
        assert_eq!(parsed, SensingConfig::point(20, 7));
        assert!(SensingConfig::from_toml("kind = \"laser\"").is_err());
    }

    #[test]
    fn csv_export_has_one_line_per_sensor() {
        let op = make_sensing(&SensingConfig::point(3, 1), 4, None).unwrap();
        let mut buf = Vec::new();
        op.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("row,c0,c1,c2,c3"));
    }

    proptest! {
        #[test]
        fn measurement_is_deterministic_and_calibrated(seed in any::<u64>(), snr in -10.0f64..60.0) {
            let mut g = SensingConfig::new(SensingKind::Gaussian);
            g.p = 6;
            g.seed = seed;
            let op = make_sensing(&g, 12, None).unwrap();
            let w = window(12, 3);
            let a = measure(&op, &w, Some(snr), seed).unwrap();
            let b = measure(&op, &w, Some(snr), seed).unwrap();
            prop_assert_eq!(&a, &b);
            let clean = measure(&op, &w, None, seed).unwrap();
            let ratio = (&a.values - &clean.values).norm() / clean.values.norm();
            prop_assert!((ratio - noise_fraction(snr)).abs() <= 1e-12 * noise_fraction(snr).max(1.0));
        }
    }
}
