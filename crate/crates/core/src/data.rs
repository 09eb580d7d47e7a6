//! Datasets: synthetic generation, centering, and CSV / binary storage.
//!
//! Two on-disk formats are supported. CSV has a header row
//! `x0,..,x{d0-1},y0,..,y{d2-1}` and one sample per line; floats are written
//! in shortest round-trip form so a save/load cycle is exact. The binary
//! format is a 16-byte header (`b"CLD1"`, then `n`, `d0`, `d2` as
//! little-endian `u32`) followed by `n` rows of `d0 + d2` little-endian `f64`
//! values (x first, then y).

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, symmetric_eigen_desc};

const BINARY_MAGIC: &[u8; 4] = b"CLD1";
const CENTER_TOL: f64 = 1e-10;

/// Input samples `x` (n×d0) and targets `y` (n×d2), one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub centered: bool,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::DegenerateInput("dataset has no samples".into()));
        }
        let centered = columns_centered(&x) && columns_centered(&y);
        Ok(Dataset { x, y, centered })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d0(&self) -> usize {
        self.x.ncols()
    }

    pub fn d2(&self) -> usize {
        self.y.ncols()
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn columns_centered(m: &DMatrix<f64>) -> bool {
    column_means(m).iter().all(|v| v.abs() <= CENTER_TOL)
}

/// Recipe for a synthetic regression dataset: `x ~ N(0, A)`, `y = M x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d0: usize,
    pub d2: usize,
    pub n: usize,
    /// Input second moment, d0×d0, symmetric PSD.
    pub a: DMatrix<f64>,
    /// Linear map, d2×d0.
    pub m: DMatrix<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A random recipe: `A = Q diag(φ) Qᵀ` with `Q` Haar-orthogonal and `φ`
    /// log-uniform in `[0.25, 4]`, and `M` with standard normal entries.
    /// `A` and `M` come from a separate stream of the same seed.
    pub fn random(d0: usize, d2: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let q = random_orthogonal(d0, &mut rng);
        let phi = DVector::from_fn(d0, |_, _| 4f64.powf(rng.random_range(-1.0..=1.0)));
        let a = &q * DMatrix::from_diagonal(&phi) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let m = DMatrix::from_fn(d2, d0, |_, _| rng.sample::<f64, _>(StandardNormal));
        SyntheticSpec { d0, d2, n, a, m, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.shape() != (self.d0, self.d0) {
            return Err(Error::InvalidSpec(format!(
                "A must be {}x{}, got {:?}",
                self.d0,
                self.d0,
                self.a.shape()
            )));
        }
        if self.m.shape() != (self.d2, self.d0) {
            return Err(Error::InvalidSpec(format!(
                "M must be {}x{}, got {:?}",
                self.d2,
                self.d0,
                self.m.shape()
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be at least 1".into()));
        }
        let asym = (&self.a - self.a.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::InvalidSpec(format!("A is not symmetric (max |A - A^T| = {asym:e})")));
        }
        let (eig, _) = symmetric_eigen_desc(&self.a);
        if let Some(min) = eig.iter().copied().reduce(f64::min) {
            if min < -1e-12 {
                return Err(Error::InvalidSpec(format!("A is not PSD (min eigenvalue {min:e})")));
            }
        }
        Ok(())
    }
}

/// Draws `n` samples `x ~ N(0, A)` through the eigen-factor `P Φ^{1/2}` of `A`
/// (so singular `A` is fine) and sets `y = M x`. ChaCha8 seeded from
/// `spec.seed` drives the normals, so output is reproducible bit-for-bit.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (phi, p) = symmetric_eigen_desc(&spec.a);
    let root = DVector::from_iterator(phi.len(), phi.iter().map(|v| v.max(0.0).sqrt()));
    // x = P Φ^{1/2} g, stacked as rows: X = G (P Φ^{1/2})^T
    let factor_t = (p * DMatrix::from_diagonal(&root)).transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut g = DMatrix::zeros(spec.n, spec.d0);
    for i in 0..spec.n {
        for j in 0..spec.d0 {
            g[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let x = g * factor_t;
    let y = &x * spec.m.transpose();
    Dataset::new(x, y)
}

/// Subtracts column means from `x` and `y`. Returns the centered dataset with
/// the removed means, which are the optimal encoder/decoder bias offsets.
pub fn center(ds: &Dataset) -> (Dataset, DVector<f64>, DVector<f64>) {
    let mean_x = column_means(&ds.x);
    let mean_y = column_means(&ds.y);
    let mut x = ds.x.clone();
    let mut y = ds.y.clone();
    for mut row in x.row_iter_mut() {
        row -= mean_x.transpose();
    }
    for mut row in y.row_iter_mut() {
        row -= mean_y.transpose();
    }
    (
        Dataset {
            x,
            y,
            centered: true,
        },
        mean_x,
        mean_y,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` means CSV; anything else is the binary format.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    match Format::from_path(path) {
        Format::Csv => load_csv(path),
        Format::Binary => load_binary(path),
    }
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match Format::from_path(path) {
        Format::Csv => save_csv(ds, path),
        Format::Binary => save_binary(ds, path),
    }
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.d0())
        .map(|j| format!("x{j}"))
        .chain((0..ds.d2()).map(|j| format!("y{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.n() {
        let row: Vec<String> = ds
            .x
            .row(i)
            .iter()
            .chain(ds.y.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(0, 0, "empty file".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(1, 0, e.to_string())),
        None => return Err(parse_err(0, 0, "empty file".into())),
    };
    let d0 = header.iter().take_while(|h| h.starts_with('x')).count();
    let d2 = header.len() - d0;
    for (j, name) in header.iter().enumerate() {
        let expected = if j < d0 {
            format!("x{j}")
        } else {
            format!("y{}", j - d0)
        };
        if name != expected {
            return Err(parse_err(
                1,
                j + 1,
                format!("expected header `{expected}`, found `{name}`"),
            ));
        }
    }

    let width = d0 + d2;
    let mut values = Vec::new();
    let mut n = 0usize;
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, 0, e.to_string()))?;
        if rec.len() != width {
            let column = rec.len().min(width) + 1;
            return Err(parse_err(
                line,
                column,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, j + 1, format!("not a number: `{field}`")))?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(parse_err(1, 0, "no data rows".into()));
    }
    let all = DMatrix::from_row_slice(n, width, &values);
    Dataset::new(
        all.columns(0, d0).into_owned(),
        all.columns(d0, d2).into_owned(),
    )
}

pub fn save_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("{what} = {v} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(16 + 8 * ds.n() * (ds.d0() + ds.d2()));
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&to_u32(ds.n(), "n")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.d0(), "d0")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.d2(), "d2")?.to_le_bytes());
    for i in 0..ds.n() {
        for v in ds.x.row(i).iter().chain(ds.y.row(i).iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    if bytes.is_empty() {
        return Err(parse_err(0, 0, "empty file".into()));
    }
    if bytes.len() < 16 {
        return Err(parse_err(0, 0, format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != BINARY_MAGIC {
        return Err(parse_err(0, 0, "bad magic".into()));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, d0, d2) = (read_u32(4), read_u32(8), read_u32(12));
    let width = d0 + d2;
    let body = &bytes[16..];
    let expected = n * width * 8;
    if body.len() != expected {
        let complete = body.len() / 8;
        let (row, column) = if width == 0 { (0, 0) } else { (complete / width + 1, complete % width + 1) };
        return Err(parse_err(
            row,
            column,
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    if n == 0 {
        return Err(parse_err(0, 0, "no data rows".into()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let all = DMatrix::from_row_slice(n, width, &values);
    Dataset::new(
        all.columns(0, d0).into_owned(),
        all.columns(d0, d2).into_owned(),
    )
}
