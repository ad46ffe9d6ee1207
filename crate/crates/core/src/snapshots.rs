//! Snapshot matrices, field stacking and scaling, bilinear regridding and
//! the `RSNP` binary format.
//!
//! A snapshot matrix is `n × s`: column `t` is the state at time step `t`.
//! When a [`FieldGrid`] is attached the state vector is a vertical stack of
//! fields, each laid out row-major over the grid (`x` index fastest), so the
//! component index of node `(ix, iy)` in field `f` is
//! `f·nx·ny + iy·nx + ix`.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RSNP";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Equidistant grid over the unit square carrying one or more stacked fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    nx: usize,
    ny: usize,
    fields: Vec<String>,
    field_scales: Vec<f64>,
}

impl FieldGrid {
    pub fn new(nx: usize, ny: usize, fields: Vec<String>, field_scales: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Argument(format!("grid size must be positive, got {nx}x{ny}")));
        }
        if fields.is_empty() {
            return Err(Error::Argument("grid needs at least one field".into()));
        }
        if fields.len() != field_scales.len() {
            return Err(Error::Argument(format!(
                "{} fields but {} scales",
                fields.len(),
                field_scales.len()
            )));
        }
        if let Some(s) = field_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Argument(format!("field scale must be positive, got {s}")));
        }
        Ok(Self {
            nx,
            ny,
            fields,
            field_scales,
        })
    }

    /// Grid with unit scale on every field.
    pub fn unscaled(nx: usize, ny: usize, fields: &[&str]) -> Result<Self> {
        Self::new(
            nx,
            ny,
            fields.iter().map(|f| f.to_string()).collect(),
            vec![1.0; fields.len()],
        )
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn field_scales(&self) -> &[f64] {
        &self.field_scales
    }

    pub fn nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn state_dim(&self) -> usize {
        self.nodes() * self.fields.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }

    /// State component of node `(ix, iy)` in field `field`.
    pub fn component(&self, field: usize, ix: usize, iy: usize) -> usize {
        field * self.nodes() + iy * self.nx + ix
    }

    /// Distance (in grid layers) of node `(ix, iy)` from the domain boundary.
    pub fn boundary_layer(&self, ix: usize, iy: usize) -> usize {
        ix.min(iy).min(self.nx - 1 - ix).min(self.ny - 1 - iy)
    }

    fn with_scales(&self, field_scales: Vec<f64>) -> Self {
        Self {
            field_scales,
            ..self.clone()
        }
    }
}

/// Node coordinate on `[0, 1]` for index `i` of an `n`-point equidistant axis.
fn node_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// `n × s` matrix of state snapshots, one column per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: DMatrix<f64>,
    dt: f64,
    grid: Option<FieldGrid>,
    label: String,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, dt: f64, label: impl Into<String>) -> Result<Self> {
        if data.ncols() < 2 {
            return Err(Error::Dimension(format!(
                "a snapshot matrix needs at least 2 columns, got {}",
                data.ncols()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::Dimension("snapshot matrix has no rows".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Argument(format!("sampling interval must be positive, got {dt}")));
        }
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite snapshot entry {v} at flat index {idx}"
            )));
        }
        Ok(Self {
            data,
            dt,
            grid: None,
            label: label.into(),
        })
    }

    pub fn with_grid(mut self, grid: FieldGrid) -> Result<Self> {
        if grid.state_dim() != self.data.nrows() {
            return Err(Error::Dimension(format!(
                "grid describes {} components but snapshots have {}",
                grid.state_dim(),
                self.data.nrows()
            )));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> Option<&FieldGrid> {
        self.grid.as_ref()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.data.nrows()
    }

    /// Number of snapshots `s`.
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// Columns `start..start + count` as an owned `n × count` block.
    pub fn window(&self, start: usize, count: usize) -> Result<DMatrix<f64>> {
        if start + count > self.len() || count == 0 {
            return Err(Error::Argument(format!(
                "window {start}..{} outside {} snapshots",
                start + count,
                self.len()
            )));
        }
        Ok(self.data.columns(start, count).into_owned())
    }

    /// Sub-range of snapshots keeping grid and sampling metadata.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        let data = self.window(start, count)?;
        Self {
            data,
            dt: self.dt,
            grid: self.grid.clone(),
            label: self.label.clone(),
        }
        .checked()
    }

    fn checked(self) -> Result<Self> {
        if self.data.ncols() < 2 {
            return Err(Error::Dimension(format!(
                "a snapshot matrix needs at least 2 columns, got {}",
                self.data.ncols()
            )));
        }
        Ok(self)
    }
}

/// Stacks per-field `nx·ny × s` matrices vertically, multiplying field `f`
/// by `scales[f]`. The scales are recorded on the grid so that
/// [`unstack_fields`] can undo them.
pub fn stack_fields(
    nx: usize,
    ny: usize,
    fields: &[(String, DMatrix<f64>)],
    scales: &[f64],
    dt: f64,
    label: &str,
) -> Result<SnapshotMatrix> {
    if fields.is_empty() {
        return Err(Error::Argument("no fields to stack".into()));
    }
    if scales.len() != fields.len() {
        return Err(Error::Argument(format!(
            "{} fields but {} scales",
            fields.len(),
            scales.len()
        )));
    }
    let grid = FieldGrid::new(
        nx,
        ny,
        fields.iter().map(|(n, _)| n.clone()).collect(),
        scales.to_vec(),
    )?;
    let s = fields[0].1.ncols();
    let nodes = nx * ny;
    for (name, m) in fields {
        if m.ncols() != s {
            return Err(Error::Dimension(format!(
                "field {name} has {} snapshots, expected {s}",
                m.ncols()
            )));
        }
        if m.nrows() != nodes {
            return Err(Error::Dimension(format!(
                "field {name} has {} rows, grid has {nodes} nodes",
                m.nrows()
            )));
        }
    }
    let mut data = DMatrix::zeros(nodes * fields.len(), s);
    for (f, ((_, m), &scale)) in fields.iter().zip(scales).enumerate() {
        data.rows_mut(f * nodes, nodes).copy_from(&(m * scale));
    }
    SnapshotMatrix::new(data, dt, label)?.with_grid(grid)
}

/// Splits a stacked snapshot matrix back into fields, dividing out the scales.
pub fn unstack_fields(snap: &SnapshotMatrix) -> Result<Vec<(String, DMatrix<f64>)>> {
    let grid = snap
        .grid()
        .ok_or_else(|| Error::Argument("snapshot matrix carries no field grid".into()))?;
    let nodes = grid.nodes();
    Ok(grid
        .fields()
        .iter()
        .zip(grid.field_scales())
        .enumerate()
        .map(|(f, (name, &scale))| {
            (name.clone(), snap.data().rows(f * nodes, nodes) / scale)
        })
        .collect())
}

/// Bilinear resampling of every field of every snapshot onto `dst`.
///
/// Both grids span the unit square with equidistant nodes including the
/// boundary. Destination nodes outside the source hull are clamped to the
/// nearest source edge. The field scales of the source are kept.
pub fn regrid_bilinear(snap: &SnapshotMatrix, dst: &FieldGrid) -> Result<SnapshotMatrix> {
    let src = snap
        .grid()
        .ok_or_else(|| Error::Argument("regridding needs a source grid".into()))?;
    if src.fields() != dst.fields() {
        return Err(Error::Argument(format!(
            "field lists differ: {:?} vs {:?}",
            src.fields(),
            dst.fields()
        )));
    }
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        (0..n_dst)
            .map(|i| {
                let x = node_coord(i, n_dst).clamp(0.0, 1.0);
                if n_src == 1 {
                    return (0, 0, 0.0);
                }
                let pos = x * (n_src - 1) as f64;
                let lo = (pos.floor() as usize).min(n_src - 2);
                (lo, lo + 1, pos - lo as f64)
            })
            .collect()
    };
    let xs = axis(src.nx(), dst.nx());
    let ys = axis(src.ny(), dst.ny());

    let out_grid = dst.with_scales(src.field_scales().to_vec());
    let mut data = DMatrix::zeros(out_grid.state_dim(), snap.len());
    for t in 0..snap.len() {
        let col = snap.data().column(t);
        for f in 0..src.fields().len() {
            for (jy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (jx, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let v00 = col[src.component(f, x0, y0)];
                    let v10 = col[src.component(f, x1, y0)];
                    let v01 = col[src.component(f, x0, y1)];
                    let v11 = col[src.component(f, x1, y1)];
                    let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10)
                        + ty * ((1.0 - tx) * v01 + tx * v11);
                    data[(out_grid.component(f, jx, jy), t)] = v;
                }
            }
        }
    }
    SnapshotMatrix::new(data, snap.dt(), snap.label())?.with_grid(out_grid)
}

/// Serializes to the `RSNP` little-endian layout.
pub fn encode_snapshot(snap: &SnapshotMatrix) -> Result<Vec<u8>> {
    let (n, s) = snap.data().shape();
    let mut out = Vec::with_capacity(64 + 8 * n * s);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(s as u64).to_le_bytes());
    out.extend_from_slice(&snap.dt().to_le_bytes());
    match snap.grid() {
        None => out.push(0),
        Some(g) => {
            out.push(1);
            out.extend_from_slice(&u32_field(g.nx(), "nx")?.to_le_bytes());
            out.extend_from_slice(&u32_field(g.ny(), "ny")?.to_le_bytes());
            out.extend_from_slice(&u32_field(g.fields().len(), "field count")?.to_le_bytes());
            for (name, scale) in g.fields().iter().zip(g.field_scales()) {
                let len = u16::try_from(name.len())
                    .map_err(|_| Error::Argument(format!("field name too long: {name}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&scale.to_le_bytes());
            }
        }
    }
    // nalgebra storage is column-major already
    for v in snap.data().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32")))
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub(crate) fn read_magic_version(
    bytes: &[u8],
    magic: &[u8; 4],
    supported: u32,
) -> Result<usize> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != magic {
        return Err(Error::Format(format!(
            "bad magic bytes, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != supported {
        return Err(Error::Version {
            found: version,
            supported,
        });
    }
    Ok(cur.pos)
}

/// Parses the `RSNP` layout. The label is supplied by the caller (the file
/// format does not store one).
pub fn decode_snapshot(bytes: &[u8], label: &str) -> Result<SnapshotMatrix> {
    let pos = read_magic_version(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let mut cur = Cursor { bytes, pos };
    let n = usize::try_from(cur.u64()?).map_err(|_| Error::Format("n overflows".into()))?;
    let s = usize::try_from(cur.u64()?).map_err(|_| Error::Format("s overflows".into()))?;
    let dt = cur.f64()?;
    let grid = match cur.u8()? {
        0 => None,
        1 => {
            let nx = cur.u32()? as usize;
            let ny = cur.u32()? as usize;
            let count = cur.u32()? as usize;
            let mut names = Vec::with_capacity(count.min(1024));
            let mut scales = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let len = cur.u16()? as usize;
                let name = std::str::from_utf8(cur.take(len)?)
                    .map_err(|_| Error::Format("field name is not UTF-8".into()))?;
                names.push(name.to_string());
                scales.push(cur.f64()?);
            }
            Some(FieldGrid::new(nx, ny, names, scales).map_err(|e| Error::Format(e.to_string()))?)
        }
        flag => return Err(Error::Format(format!("invalid grid flag {flag}"))),
    };
    let count = n
        .checked_mul(s)
        .ok_or_else(|| Error::Format("n·s overflows".into()))?;
    let payload = cur.take(
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?,
    )?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let data = DMatrix::from_vec(n, s, values);
    let snap = SnapshotMatrix::new(data, dt, label).map_err(|e| Error::Format(e.to_string()))?;
    match grid {
        Some(g) => snap.with_grid(g).map_err(|e| Error::Format(e.to_string())),
        None => Ok(snap),
    }
}

pub fn write_snapshot(path: impl AsRef<Path>, snap: &SnapshotMatrix) -> Result<()> {
    let bytes = encode_snapshot(snap)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

/// Reads an `RSNP` file; the label is the file stem.
pub fn read_snapshot(path: impl AsRef<Path>) -> Result<SnapshotMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_snapshot(&bytes, &label)
}

/// Plain CSV import: one row per state component, one column per time step,
/// no header.
pub fn read_snapshot_csv(path: impl AsRef<Path>, dt: f64, label: &str) -> Result<SnapshotMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: not a number: {v:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "row {} has {} columns, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let s = rows.first().map_or(0, Vec::len);
    let data = DMatrix::from_fn(n, s, |i, j| rows[i][j]);
    SnapshotMatrix::new(data, dt, label)
}
