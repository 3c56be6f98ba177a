//! Synthetic S-curve datasets, CSV matrix I/O, and random missing-data masks.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::kernels::{kernel_matrix, BaseKernelConfig, KernelError};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::mask::{MaskError, ObservationMask};
use crate::rng::{rng_from_seed, standard_normals};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("row {row} has {got} fields, expected {expected}")]
    RaggedRows { row: usize, expected: usize, got: usize },
    #[error("row {row}, column {col}: `{value}` is not a finite number")]
    NonNumericField { row: usize, col: usize, value: String },
    #[error("row {row}: label `{value}` is not an integer")]
    BadLabel { row: usize, value: String },
    #[error("no data rows")]
    Empty,
    #[error("kernel matrix is not positive definite even with jitter")]
    KernelNotPD,
    #[error("missing fraction must lie in [0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("need at least {min} rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Observations with optional ground truth. `y` always holds every value;
/// the mask only decides what training may look at.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DenseMatrix,
    pub x_true: Option<DenseMatrix>,
    pub labels: Option<Vec<i64>>,
    pub mask: Option<ObservationMask>,
}

impl Dataset {
    pub fn from_matrix(y: DenseMatrix) -> Self {
        Self {
            y,
            x_true: None,
            labels: None,
            mask: None,
        }
    }
}

/// Jitter added once to the covariance before giving up on a Cholesky.
pub const KERNEL_JITTER: f64 = 1e-8;

/// Planar S: `(sin t, sign(t)(cos t − 1))` with `t` equispaced on
/// `[−3π/2, 3π/2]`, plus `N(0, 0.01²)` jitter on both coordinates.
pub fn s_curve_latents(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> (DenseMatrix, Vec<f64>) {
    let t: Vec<f64> = (0..n)
        .map(|i| -1.5 * PI + 3.0 * PI * i as f64 / (n - 1).max(1) as f64)
        .collect();
    let jitter = standard_normals(rng, 2 * n);
    let x = DenseMatrix::from_fn(n, 2, |r, c| {
        let tr = t[r];
        let base = if c == 0 { tr.sin() } else { tr.signum() * (tr.cos() - 1.0) };
        base + 0.01 * jitter[2 * r + c]
    });
    (x, t)
}

/// Class of a curve position: lower arc, middle, upper arc.
fn segment_label(t: f64) -> i64 {
    if t < -0.5 * PI {
        0
    } else if t < 0.5 * PI {
        1
    } else {
        2
    }
}

/// Draws `M` i.i.d. columns `y_j ~ N(0, K + noise_var·I)` with `K` the
/// kernel matrix over S-curve latents.
pub fn make_s_curve_dataset(
    n: usize,
    m: usize,
    kernel: &BaseKernelConfig,
    noise_var: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(DataError::TooFewRows { min: 2, got: n });
    }
    kernel.validate()?;
    let mut rng = rng_from_seed(seed);
    let (x, t) = s_curve_latents(n, &mut rng);
    let mut k = kernel_matrix(&x, kernel);
    k.add_diag(noise_var);
    let chol = match Cholesky::new(&k) {
        Ok(c) => c,
        Err(_) => {
            k.add_diag(KERNEL_JITTER);
            Cholesky::new(&k).map_err(|_| DataError::KernelNotPD)?
        }
    };
    let l = chol.factor();
    let mut y = DenseMatrix::zeros(n, m);
    for c in 0..m {
        let z = standard_normals(&mut rng, n);
        for r in 0..n {
            let row = &l.row(r)[..=r];
            y[(r, c)] = row.iter().zip(&z).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Dataset {
        y,
        x_true: Some(x),
        labels: Some(t.iter().map(|&v| segment_label(v)).collect()),
        mask: None,
    })
}

/// Hides `round(p·N·M)` entries chosen uniformly without replacement. A
/// column left with nothing observed gets one random entry back.
pub fn apply_missing_mask(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&p) {
        return Err(DataError::InvalidFraction(p));
    }
    let (n, m) = ds.y.shape();
    let total = n * m;
    let hide = ((p * total as f64).round() as usize).min(total);
    let mut rng = rng_from_seed(seed);
    let mut mask = ObservationMask::all_observed(n, m);
    for flat in index::sample(&mut rng, total, hide).into_vec() {
        mask.set(flat / m, flat % m, false);
    }
    for c in 0..m {
        if mask.observed_rows(c).is_empty() {
            let r = rng.random_range(0..n);
            mask.set(r, c, true);
        }
    }
    Ok(Dataset {
        mask: Some(mask),
        ..ds.clone()
    })
}

fn io_err(path: &Path, e: impl ToString) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parsed CSV table: numeric rows and an optional header.
struct Table {
    header: Option<Vec<String>>,
    rows: Vec<Vec<String>>,
    /// 1-based line of each row.
    lines: Vec<usize>,
}

fn read_table(reader: impl Read) -> std::result::Result<Table, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut header = None;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if fields.len() == 1 && fields[0].trim().is_empty() {
            continue;
        }
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && fields.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            header = Some(fields);
            continue;
        }
        rows.push(fields);
        lines.push(line);
    }
    Ok(Table { header, rows, lines })
}

fn table_width(t: &Table) -> Result<usize> {
    let width = t
        .header
        .as_ref()
        .map(Vec::len)
        .or_else(|| t.rows.first().map(Vec::len))
        .ok_or(DataError::Empty)?;
    for (row, line) in t.rows.iter().zip(&t.lines) {
        if row.len() != width {
            return Err(DataError::RaggedRows {
                row: *line,
                expected: width,
                got: row.len(),
            });
        }
    }
    Ok(width)
}

fn numeric(t: &Table, cols: usize) -> Result<DenseMatrix> {
    if t.rows.is_empty() {
        return Err(DataError::Empty);
    }
    let mut data = Vec::with_capacity(t.rows.len() * cols);
    for (row, line) in t.rows.iter().zip(&t.lines) {
        for (c, f) in row[..cols].iter().enumerate() {
            data.push(parse_finite(f).ok_or_else(|| DataError::NonNumericField {
                row: *line,
                col: c + 1,
                value: f.clone(),
            })?);
        }
    }
    Ok(DenseMatrix::from_vec(t.rows.len(), cols, data).expect("sized"))
}

/// Reads a numeric CSV matrix. A first row containing any non-numeric field
/// is taken as a header. Rows and columns in errors are 1-based.
pub fn read_matrix(reader: impl Read) -> Result<DenseMatrix> {
    let t = read_table(reader).map_err(|msg| DataError::Io {
        path: "<input>".into(),
        msg,
    })?;
    let width = table_width(&t)?;
    numeric(&t, width)
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_matrix(f).map_err(|e| relabel(e, path))
}

fn relabel(e: DataError, path: &Path) -> DataError {
    match e {
        DataError::Io { msg, .. } => io_err(path, msg),
        other => other,
    }
}

/// Reads a CSV whose last column is an integer class label.
pub fn read_labeled(reader: impl Read) -> Result<(DenseMatrix, Vec<i64>)> {
    let t = read_table(reader).map_err(|msg| DataError::Io {
        path: "<input>".into(),
        msg,
    })?;
    let width = table_width(&t)?;
    let y = numeric(&t, width - 1)?;
    let labels = t
        .rows
        .iter()
        .zip(&t.lines)
        .map(|(row, line)| {
            let f = row[width - 1].trim();
            f.parse::<i64>().map_err(|_| DataError::BadLabel {
                row: *line,
                value: f.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((y, labels))
}

pub fn load_labeled(path: &Path) -> Result<(DenseMatrix, Vec<i64>)> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_labeled(f).map_err(|e| relabel(e, path))
}

/// Reads a one-column label file (header optional).
pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let t = read_table(f).map_err(|msg| io_err(path, msg))?;
    t.rows
        .iter()
        .zip(&t.lines)
        .map(|(row, line)| {
            let f = row.last().map(|s| s.trim()).unwrap_or("");
            f.parse::<i64>().map_err(|_| DataError::BadLabel {
                row: *line,
                value: f.to_string(),
            })
        })
        .collect()
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `m` as CSV, one row per line, with an optional header.
pub fn write_matrix(mut w: impl Write, m: &DenseMatrix, header: Option<&[&str]>) -> std::io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    let mut line = String::new();
    for r in 0..m.rows() {
        line.clear();
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format_f64(*v));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    save_matrix_with_header(path, m, None)
}

pub fn save_matrix_with_header(path: &Path, m: &DenseMatrix, header: Option<&[&str]>) -> Result<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_matrix(&mut w, m, header)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

pub fn save_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut out = String::from("label\n");
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Mask as a 0/1 CSV matrix, `1` = observed.
pub fn save_mask(path: &Path, mask: &ObservationMask) -> Result<()> {
    let mut out = String::new();
    for r in 0..mask.rows() {
        let row: Vec<&str> = (0..mask.cols())
            .map(|c| if mask.is_observed(r, c) { "1" } else { "0" })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<ObservationMask> {
    let m = load_matrix(path)?;
    let observed = m.as_slice().iter().map(|&v| v != 0.0).collect();
    Ok(ObservationMask::from_vec(m.rows(), m.cols(), observed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s_curve_shapes_and_determinism() {
        let k = BaseKernelConfig::rbf_preset();
        let a = make_s_curve_dataset(40, 7, &k, 0.01, 3).unwrap();
        assert_eq!(a.y.shape(), (40, 7));
        assert_eq!(a.x_true.as_ref().unwrap().shape(), (40, 2));
        assert_eq!(a.labels.as_ref().unwrap().len(), 40);
        assert_eq!(a, make_s_curve_dataset(40, 7, &k, 0.01, 3).unwrap());
        assert_ne!(a.y, make_s_curve_dataset(40, 7, &k, 0.01, 4).unwrap().y);
        assert!(matches!(
            make_s_curve_dataset(1, 7, &k, 0.01, 3),
            Err(DataError::TooFewRows { .. })
        ));
    }

    #[test]
    fn mask_fraction_and_determinism() {
        let ds = Dataset::from_matrix(DenseMatrix::zeros(250, 200));
        let none = apply_missing_mask(&ds, 0.0, 1).unwrap();
        assert!(none.mask.unwrap().is_fully_observed());
        let a = apply_missing_mask(&ds, 0.3, 1).unwrap();
        let f = a.mask.as_ref().unwrap().hidden_fraction();
        assert!((0.29..=0.31).contains(&f), "{f}");
        assert_eq!(a, apply_missing_mask(&ds, 0.3, 1).unwrap());
        assert!(apply_missing_mask(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn every_column_keeps_an_observation() {
        let ds = Dataset::from_matrix(DenseMatrix::zeros(2, 50));
        let a = apply_missing_mask(&ds, 0.99, 5).unwrap();
        assert!(a.mask.unwrap().check_columns().is_ok());
    }

    #[test]
    fn csv_parsing_contracts() {
        let m = read_matrix("a,b\n1,2\n3.5,-4e-3\n".as_bytes()).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 2.0, 3.5, -4e-3]);
        let m = read_matrix("1,2\r\n3,4\r\n".as_bytes()).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(
            read_matrix("1,2\n3\n".as_bytes()).unwrap_err(),
            DataError::RaggedRows {
                row: 2,
                expected: 2,
                got: 1
            }
        );
        assert!(matches!(
            read_matrix("1,2\n3,x\n".as_bytes()).unwrap_err(),
            DataError::NonNumericField { row: 2, col: 2, .. }
        ));
        assert!(matches!(
            read_matrix("1,2\n3,NaN\n".as_bytes()).unwrap_err(),
            DataError::NonNumericField { .. }
        ));
        let (y, l) = read_labeled("x,y,label\n0.5,1,0\n2,3,2\n1,1,1\n".as_bytes()).unwrap();
        assert_eq!(y.shape(), (3, 2));
        assert_eq!(l, vec![0, 2, 1]);
    }

    #[test]
    fn write_read_round_trip() {
        let m = DenseMatrix::from_fn(10, 4, |r, c| ((r * 7 + c) as f64).sin() * 10f64.powi(c as i32 * 7 - 10));
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, None).unwrap();
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
    }
}
