//! Regime libraries: one DMD model per regime, their time-augmented bases,
//! the sensed (observed) bases with cached pseudoinverses, and on-disk
//! persistence.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dmd::{dmd_decompose, DmdModel, RankPolicy};
use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, CMatrix};
use crate::parallel::Execution;
use crate::sensing::SensingOperator;
use crate::snapshots::{read_magic_version, Cursor, SnapshotMatrix};

pub const LIBRARY_FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"RMOD";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Relative tolerance for "same sampling interval".
const DT_TOLERANCE: f64 = 1e-12;

/// Training data for one regime.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub label: String,
    pub parameter: f64,
    pub snapshots: SnapshotMatrix,
}

impl Dataset {
    pub fn new(label: impl Into<String>, parameter: f64, snapshots: SnapshotMatrix) -> Self {
        Self {
            label: label.into(),
            parameter,
            snapshots,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeEntry {
    pub label: String,
    pub parameter: f64,
    pub model: DmdModel,
}

/// Ordered, immutable set of regimes sharing state dimension and `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeLibrary {
    entries: Vec<RegimeEntry>,
    state_dim: usize,
    dt: f64,
}

impl RegimeLibrary {
    pub fn new(entries: Vec<RegimeEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Argument("a library needs at least one regime".into()))?;
        let state_dim = first.model.state_dim();
        let dt = first.model.dt();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.label.as_str()) {
                return Err(Error::Argument(format!("duplicate regime label {:?}", e.label)));
            }
            if e.model.state_dim() != state_dim {
                return Err(Error::Dimension(format!(
                    "regime {:?} has state dimension {}, expected {state_dim}",
                    e.label,
                    e.model.state_dim()
                )));
            }
            if !same_dt(e.model.dt(), dt) {
                return Err(Error::Dimension(format!(
                    "regime {:?} sampled at dt={}, expected {dt}",
                    e.label,
                    e.model.dt()
                )));
            }
        }
        Ok(Self {
            entries,
            state_dim,
            dt,
        })
    }

    pub fn entries(&self) -> &[RegimeEntry] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> Option<&RegimeEntry> {
        self.entries.get(k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label)
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.model.rank()).collect()
    }

    /// Errors unless the sampling interval matches the library's.
    pub fn check_dt(&self, dt: f64) -> Result<()> {
        if !same_dt(dt, self.dt) {
            return Err(Error::Argument(format!(
                "data sampled at dt={dt} but the library was trained at dt={}",
                self.dt
            )));
        }
        Ok(())
    }
}

fn same_dt(a: f64, b: f64) -> bool {
    (a - b).abs() <= DT_TOLERANCE * a.abs().max(b.abs())
}

/// Runs DMD on every dataset. Entry order follows input order.
pub fn build_library(datasets: &[Dataset], policy: &RankPolicy, exec: Execution) -> Result<RegimeLibrary> {
    if datasets.is_empty() {
        return Err(Error::Argument("no training datasets".into()));
    }
    policy.validate()?;
    let mut seen = HashSet::new();
    let n = datasets[0].snapshots.state_dim();
    let dt = datasets[0].snapshots.dt();
    for d in datasets {
        if !seen.insert(d.label.as_str()) {
            return Err(Error::Argument(format!("duplicate regime label {:?}", d.label)));
        }
        if d.snapshots.state_dim() != n {
            return Err(Error::Dimension(format!(
                "dataset {:?} has state dimension {}, expected {n}",
                d.label,
                d.snapshots.state_dim()
            )));
        }
        if !same_dt(d.snapshots.dt(), dt) {
            return Err(Error::Dimension(format!(
                "dataset {:?} sampled at dt={}, expected {dt}",
                d.label,
                d.snapshots.dt()
            )));
        }
    }
    let models = exec.try_map(datasets.len(), |k| dmd_decompose(&datasets[k].snapshots, policy))?;
    let entries = datasets
        .iter()
        .zip(models)
        .map(|(d, model)| RegimeEntry {
            label: d.label.clone(),
            parameter: d.parameter,
            model,
        })
        .collect();
    RegimeLibrary::new(entries)
}

/// `[Φ; ΦΛ; …; ΦΛʲ]`, a `(j+1)n × r` complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBasis {
    pub matrix: CMatrix,
    pub depth: usize,
    pub source: String,
}

/// Stacks `b = 0..=j` copies of `base` with column `c` of block `b`
/// multiplied by `λ_c^b`.
pub fn power_blocks(base: &CMatrix, eigenvalues: &[Complex64], j: usize) -> CMatrix {
    let (n, r) = base.shape();
    assert_eq!(r, eigenvalues.len(), "one eigenvalue per column");
    let mut out = CMatrix::zeros((j + 1) * n, r);
    for c in 0..r {
        let mut power = Complex64::new(1.0, 0.0);
        for b in 0..=j {
            for i in 0..n {
                out[(b * n + i, c)] = base[(i, c)] * power;
            }
            power *= eigenvalues[c];
        }
    }
    out
}

pub fn augment_basis(entry: &RegimeEntry, j: usize) -> AugmentedBasis {
    AugmentedBasis {
        matrix: power_blocks(entry.model.modes(), entry.model.eigenvalues(), j),
        depth: j,
        source: entry.label.clone(),
    }
}

/// One sensed augmented basis `Θ̂ = 𝒞Φ̂` with its cached pseudoinverse.
#[derive(Debug, Clone)]
pub struct ObservedEntry {
    pub label: String,
    pub theta: CMatrix,
    pub pinv: CMatrix,
    /// Numerical rank found while building the pseudoinverse.
    pub rank: usize,
}

impl ObservedEntry {
    pub fn new(label: impl Into<String>, theta: CMatrix) -> Result<Self> {
        if theta.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Numerical("observed basis has non-finite entries".into()));
        }
        let p = pseudo_inverse(&theta)?;
        Ok(Self {
            label: label.into(),
            theta,
            pinv: p.matrix,
            rank: p.rank,
        })
    }

    pub fn columns(&self) -> usize {
        self.theta.ncols()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.theta.ncols()
    }

    pub fn flag(&self) -> Option<String> {
        self.is_rank_deficient().then(|| {
            format!(
                "regime {:?}: observed basis has numerical rank {} < {} columns",
                self.label,
                self.rank,
                self.theta.ncols()
            )
        })
    }
}

/// Sensed library at a fixed augmentation depth; immutable and shareable.
#[derive(Debug, Clone)]
pub struct ObservedLibrary {
    entries: Vec<ObservedEntry>,
    depth: usize,
    sensors: usize,
}

impl ObservedLibrary {
    /// Wraps pre-sensed bases. Every basis must have `(depth+1)·sensors` rows.
    pub fn from_bases(bases: Vec<(String, CMatrix)>, depth: usize, exec: Execution) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::Argument("an observed library needs at least one regime".into()))?;
        let rows = first.1.nrows();
        if rows == 0 || rows % (depth + 1) != 0 {
            return Err(Error::Dimension(format!(
                "{rows} rows cannot hold {} stacked measurements",
                depth + 1
            )));
        }
        if let Some((label, m)) = bases.iter().find(|(_, m)| m.nrows() != rows) {
            return Err(Error::Dimension(format!(
                "regime {label:?} has {} rows, expected {rows}",
                m.nrows()
            )));
        }
        let entries = exec.try_map(bases.len(), |k| ObservedEntry::new(bases[k].0.clone(), bases[k].1.clone()))?;
        Ok(Self {
            entries,
            depth,
            sensors: rows / (depth + 1),
        })
    }

    pub fn entries(&self) -> &[ObservedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    /// Length of a stacked measurement, `p(j+1)`.
    pub fn measurement_len(&self) -> usize {
        self.sensors * (self.depth + 1)
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    pub fn flags(&self) -> Vec<String> {
        self.entries.iter().filter_map(ObservedEntry::flag).collect()
    }
}

/// Builds `Θ̂_k = 𝒞Φ̂_k` for every regime. The sensing is applied to `Φ`
/// once and the blocks are formed as `(CΦ)Λᵇ`, which equals `𝒞Φ̂` exactly
/// in exact arithmetic and avoids materializing `Φ̂`.
pub fn observe_library(
    lib: &RegimeLibrary,
    op: &SensingOperator,
    j: usize,
    exec: Execution,
) -> Result<ObservedLibrary> {
    if op.state_dim() != lib.state_dim() {
        return Err(Error::Dimension(format!(
            "sensing operator acts on dimension {}, library state dimension is {}",
            op.state_dim(),
            lib.state_dim()
        )));
    }
    let entries = exec.try_map(lib.len(), |k| {
        let e = &lib.entries()[k];
        let sensed = op.apply_complex(e.model.modes())?;
        ObservedEntry::new(e.label.clone(), power_blocks(&sensed, e.model.eigenvalues(), j))
    })?;
    Ok(ObservedLibrary {
        entries,
        depth: j,
        sensors: op.sensors(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    state_dim: usize,
    dt: f64,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    label: String,
    parameter: f64,
    rank: usize,
    file: String,
}

/// Writes `dir/manifest.toml` plus one `RMOD` file per regime.
pub fn write_library(dir: impl AsRef<Path>, lib: &RegimeLibrary) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(lib.len());
    for (k, e) in lib.entries().iter().enumerate() {
        let file = format!("regime_{k:03}.rmod");
        let path = dir.join(&file);
        fs::write(&path, encode_model(&e.model)).map_err(|err| Error::io(&path, err))?;
        entries.push(ManifestEntry {
            label: e.label.clone(),
            parameter: e.parameter,
            rank: e.model.rank(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: LIBRARY_FORMAT_VERSION,
        state_dim: lib.state_dim(),
        dt: lib.dt(),
        entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_library(dir: impl AsRef<Path>) -> Result<RegimeLibrary> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // Check the version before the strict parse so newer layouts report a
    // version error rather than a schema error.
    let raw: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Format(format!("{}: missing format_version", path.display())))?;
    if version != i64::from(LIBRARY_FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: LIBRARY_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for m in &manifest.entries {
        let file = dir.join(&m.file);
        if !file.is_file() {
            return Err(Error::Format(format!(
                "manifest references missing mode file {}",
                file.display()
            )));
        }
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let model = decode_model(&bytes)?;
        if model.rank() != m.rank || model.state_dim() != manifest.state_dim {
            return Err(Error::Format(format!(
                "{} holds a {}x{} basis, manifest says {}x{}",
                file.display(),
                model.state_dim(),
                model.rank(),
                manifest.state_dim,
                m.rank
            )));
        }
        if model.dt().to_bits() != manifest.dt.to_bits() {
            return Err(Error::Format(format!(
                "{} sampled at dt={}, manifest says {}",
                file.display(),
                model.dt(),
                manifest.dt
            )));
        }
        entries.push(RegimeEntry {
            label: m.label.clone(),
            parameter: m.parameter,
            model,
        });
    }
    RegimeLibrary::new(entries).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `RMOD` layout, little endian: magic, version u32, n u64, r u64, dt f64,
/// eigenvector condition f64, singular value count u64 and values, `r`
/// eigenvalues as (re, im), then `Φ` column-major as (re, im) pairs.
pub fn encode_model(model: &DmdModel) -> Vec<u8> {
    let (n, r) = model.modes().shape();
    let sv = model.singular_values();
    let mut out = Vec::with_capacity(48 + 8 * sv.len() + 16 * r * (n + 1));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&LIBRARY_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(r as u64).to_le_bytes());
    out.extend_from_slice(&model.dt().to_le_bytes());
    out.extend_from_slice(&model.eigvec_condition().to_le_bytes());
    out.extend_from_slice(&(sv.len() as u64).to_le_bytes());
    for s in sv {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for z in model.eigenvalues().iter().chain(model.modes().as_slice()) {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<DmdModel> {
    let pos = read_magic_version(bytes, MODEL_MAGIC, LIBRARY_FORMAT_VERSION)?;
    let mut cur = Cursor::new(bytes, pos);
    let size = |v: u64, what: &str| {
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible {what} {v}")))
    };
    let n = size(cur.u64()?, "state dimension")?;
    let r = size(cur.u64()?, "rank")?;
    let dt = cur.f64()?;
    let condition = cur.f64()?;
    let count = size(cur.u64()?, "singular value count")?;
    let sv = (0..count).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    let mut complex = |count: usize| -> Result<Vec<Complex64>> {
        (0..count)
            .map(|_| Ok(Complex64::new(cur.f64()?, cur.f64()?)))
            .collect()
    };
    let eigenvalues = complex(r)?;
    let modes = n
        .checked_mul(r)
        .filter(|&len| len <= bytes.len())
        .ok_or_else(|| Error::Format("mode matrix size overflows".into()))?;
    let modes = CMatrix::from_vec(n, r, complex(modes)?);
    cur.finish()?;
    if n == 0 || r == 0 || !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Format(format!("invalid model header (n={n}, r={r}, dt={dt})")));
    }
    Ok(DmdModel::restore(modes, eigenvalues, sv, dt, condition))
}
