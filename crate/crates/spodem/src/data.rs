//! Snapshot-matrix loading, validation, centering, spatial weights, and the
//! train/test split.
//!
//! A snapshot matrix stores one flattened field per column: row index
//! m = v*S + p addresses variable v at spatial point p, so M = S * n_vars.
//! For lat-lon grids the point index is p = ilat * n_lon + ilon.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// Memory order of a raw binary dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemOrder {
    #[serde(rename = "C")]
    C,
    #[serde(rename = "F")]
    F,
}

/// Element type of a raw binary dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawDtype {
    #[serde(rename = "f8")]
    F8,
    #[serde(rename = "f4")]
    F4,
}

/// Sidecar header for raw binary input ({"shape":[M,Nt],"order":"C","dtype":"f8"}).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    pub order: MemOrder,
    pub dtype: RawDtype,
}

/// How the bytes on disk map to the M x Nt matrix.
#[derive(Debug, Clone)]
pub enum DataLayout {
    /// .npy v1.0, shape [M, Nt], C order, <f8 or <f4.
    Npy,
    /// Raw little-endian binary with an explicit header.
    Raw(RawHeader),
    /// CSV, rows = spatial points, columns = snapshots.
    Csv,
}

/// Regular latitude/longitude grid in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatLonGrid {
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
}

/// M x Nt data matrix plus metadata. Columns are time snapshots.
#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    pub values: Array2<f64>,
    pub n_space: usize,
    pub n_vars: usize,
    /// Physical sampling interval; metadata used only for the frequency axis.
    pub dt: f64,
    pub grid: Option<LatLonGrid>,
    /// Temporal mean, present once centering has been applied.
    pub mean: Option<Array1<f64>>,
}

impl SnapshotMatrix {
    pub fn new(
        values: Array2<f64>,
        n_vars: usize,
        dt: f64,
        grid: Option<LatLonGrid>,
    ) -> Result<Self> {
        let m = values.nrows();
        if n_vars == 0 || m % n_vars != 0 {
            return Err(Error::ShapeMismatch(format!(
                "M={m} is not divisible by n_vars={n_vars}"
            )));
        }
        check_finite(&values)?;
        Ok(SnapshotMatrix {
            n_space: m / n_vars,
            n_vars,
            dt,
            grid,
            mean: None,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.values.ncols()
    }

    /// Check the centered-row invariant when a mean is attached.
    pub fn validate(&self) -> Result<()> {
        check_finite(&self.values)?;
        if self.mean.is_some() {
            let nt = self.n_snapshots() as f64;
            for (i, row) in self.values.rows().into_iter().enumerate() {
                let scale = row.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
                let sum: f64 = row.sum();
                if sum.abs() > 1e-10 * nt * scale {
                    return Err(Error::ShapeMismatch(format!(
                        "row {i} of a centered matrix sums to {sum:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_finite(values: &Array2<f64>) -> Result<()> {
    for ((i, j), &x) in values.indexed_iter() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("entry ({i}, {j}) is {x}")));
        }
    }
    Ok(())
}

/// Nonnegative spatial weight vector (the diagonal of W).
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub w: Array1<f64>,
}

impl WeightVector {
    pub fn new(w: Array1<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::DimensionMismatch(
                "weight vector must have at least one entry".into(),
            ));
        }
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::NonFinite(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::DimensionMismatch(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(WeightVector { w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Element-wise sqrt, used to form W^{1/2} q.
    pub fn sqrt(&self) -> Array1<f64> {
        self.w.mapv(f64::sqrt)
    }
}

/// Load a snapshot matrix from disk. No centering is applied.
pub fn load_snapshot_matrix(
    path: &Path,
    layout: &DataLayout,
    n_vars: usize,
    dt: f64,
    grid: Option<LatLonGrid>,
) -> Result<SnapshotMatrix> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let values = match layout {
        DataLayout::Npy => {
            let (data, shape) = npy::read_f64(path)?;
            if shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected a 2-d array, found shape {:?}",
                    path.display(),
                    shape
                )));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?
        }
        DataLayout::Raw(header) => load_raw(path, header)?,
        DataLayout::Csv => load_csv(path)?,
    };
    SnapshotMatrix::new(values, n_vars, dt, grid)
}

fn load_raw(path: &Path, header: &RawHeader) -> Result<Array2<f64>> {
    if header.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "raw header shape must be 2-d, got {:?}",
            header.shape
        )));
    }
    let (m, nt) = (header.shape[0], header.shape[1]);
    let item = match header.dtype {
        RawDtype::F8 => 8,
        RawDtype::F4 => 4,
    };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.len() != m * nt * item {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes do not match shape ({m}, {nt}) of {}-byte items",
            path.display(),
            raw.len(),
            item
        )));
    }
    let flat: Vec<f64> = match header.dtype {
        RawDtype::F8 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        RawDtype::F4 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    let mut values = Array2::zeros((m, nt));
    match header.order {
        MemOrder::C => {
            for i in 0..m {
                for j in 0..nt {
                    values[[i, j]] = flat[i * nt + j];
                }
            }
        }
        MemOrder::F => {
            for j in 0..nt {
                for i in 0..m {
                    values[[i, j]] = flat[j * m + i];
                }
            }
        }
    }
    Ok(values)
}

fn load_csv(path: &Path) -> Result<Array2<f64>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let row: Vec<f64> = t
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::ShapeMismatch(format!(
                        "{}:{}: cannot parse {cell:?} as a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{}:{}: ragged row ({} cells, expected {})",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{}: empty CSV",
            path.display()
        )));
    }
    let (m, nt) = (rows.len(), rows[0].len());
    let mut values = Array2::zeros((m, nt));
    for (i, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            values[[i, j]] = x;
        }
    }
    Ok(values)
}

/// Subtract the temporal mean of each row, storing it on the result.
///
/// If the input already carries a mean (e.g. it was centered with a train
/// mean), the newly removed component is folded into the stored mean.
pub fn subtract_temporal_mean(q: &SnapshotMatrix) -> Result<SnapshotMatrix> {
    let nt = q.n_snapshots();
    if nt < 2 {
        return Err(Error::DegenerateTimeAxis { need: 2, got: nt });
    }
    let mean = q.values.mean_axis(ndarray::Axis(1)).unwrap();
    let mut values = q.values.clone();
    for (mut row, &m) in values.rows_mut().into_iter().zip(mean.iter()) {
        row.mapv_inplace(|x| x - m);
    }
    let total_mean = match &q.mean {
        Some(prev) => prev + &mean,
        None => mean,
    };
    Ok(SnapshotMatrix {
        values,
        n_space: q.n_space,
        n_vars: q.n_vars,
        dt: q.dt,
        grid: q.grid.clone(),
        mean: Some(total_mean),
    })
}

/// Identity weighting (W = I).
pub fn build_uniform_weights(m: usize) -> Result<WeightVector> {
    if m == 0 {
        return Err(Error::DimensionMismatch(
            "uniform weights need M >= 1".into(),
        ));
    }
    WeightVector::new(Array1::ones(m))
}

/// Surface-element weights for a regular lat-lon grid on the unit sphere.
///
/// Weight per grid point is cos(lat) * dlat * dlon in radians (r = 1),
/// tiled identically across variables. Local spacings come from the grid:
/// central differences in the interior, one-sided at the ends.
pub fn build_spherical_weights(lats: &[f64], lons: &[f64], n_vars: usize) -> Result<WeightVector> {
    if lats.len() < 2 || lons.len() < 2 {
        return Err(Error::NonMonotoneGrid(
            "need at least two points per axis".into(),
        ));
    }
    if n_vars == 0 {
        return Err(Error::DimensionMismatch("n_vars must be >= 1".into()));
    }
    if lats.iter().any(|&l| l.abs() > 90.0 + 1e-12) {
        return Err(Error::NonMonotoneGrid(
            "latitudes must lie in [-90, 90] degrees".into(),
        ));
    }
    check_monotone(lats, "latitude")?;
    check_monotone(lons, "longitude")?;

    let deg = std::f64::consts::PI / 180.0;
    let dlat = local_spacing(lats);
    let dlon = local_spacing(lons);
    let (n_lat, n_lon) = (lats.len(), lons.len());
    let s = n_lat * n_lon;
    let mut w = Array1::zeros(s * n_vars);
    for (i, &lat) in lats.iter().enumerate() {
        let coslat = (lat * deg).cos().max(0.0);
        for j in 0..n_lon {
            let val = coslat * dlat[i] * deg * dlon[j] * deg;
            for v in 0..n_vars {
                w[v * s + i * n_lon + j] = val;
            }
        }
    }
    WeightVector::new(w)
}

fn check_monotone(axis: &[f64], name: &str) -> Result<()> {
    let increasing = axis.windows(2).all(|p| p[1] > p[0]);
    let decreasing = axis.windows(2).all(|p| p[1] < p[0]);
    if !(increasing || decreasing) {
        return Err(Error::NonMonotoneGrid(format!(
            "{name} axis is not strictly monotone"
        )));
    }
    Ok(())
}

fn local_spacing(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (axis[1] - axis[0]).abs()
            } else if i == n - 1 {
                (axis[n - 1] - axis[n - 2]).abs()
            } else {
                ((axis[i + 1] - axis[i - 1]) / 2.0).abs()
            }
        })
        .collect()
}

/// Contiguous prefix split. The train mean is removed from both parts, so
/// test snapshots never leak their own statistics.
pub fn split_train_test(
    q: &SnapshotMatrix,
    train_fraction: f64,
) -> Result<(SnapshotMatrix, SnapshotMatrix)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::EmptyPartition(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let nt = q.n_snapshots();
    let n_train = (nt as f64 * train_fraction).floor() as usize;
    let n_test = nt - n_train;
    if n_train < 2 {
        return Err(Error::EmptyPartition(format!(
            "train split of {n_train} snapshots is too small (need >= 2)"
        )));
    }
    if n_test == 0 {
        return Err(Error::EmptyPartition("test split is empty".into()));
    }

    let train_block = q.values.slice(s![.., ..n_train]).to_owned();
    let test_block = q.values.slice(s![.., n_train..]).to_owned();
    let train_mean = train_block.mean_axis(ndarray::Axis(1)).unwrap();

    let center = |mut block: Array2<f64>| {
        for (mut row, &m) in block.rows_mut().into_iter().zip(train_mean.iter()) {
            row.mapv_inplace(|x| x - m);
        }
        block
    };
    let total_mean = match &q.mean {
        Some(prev) => prev + &train_mean,
        None => train_mean.clone(),
    };

    let make = |values: Array2<f64>| SnapshotMatrix {
        values,
        n_space: q.n_space,
        n_vars: q.n_vars,
        dt: q.dt,
        grid: q.grid.clone(),
        mean: Some(total_mean.clone()),
    };
    Ok((make(center(train_block)), make(center(test_block))))
}
