//! Recorded signal traces, their CSV form, and trace comparison.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    dt: f64,
    columns: Vec<String>,
    rows: Vec<TraceRow>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace file: {0}")]
    Malformed(String),
}

impl Trace {
    pub fn new(dt: f64, columns: Vec<String>) -> Self {
        Self {
            dt,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn reserve(&mut self, n: usize) {
        self.rows.reserve(n);
    }

    /// Appends a row. Panics if the row width does not match the columns.
    pub fn push(&mut self, row: TraceRow) {
        assert_eq!(row.values.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, index: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r.values[index])
    }

    pub fn column_by_name(&self, name: &str) -> Option<impl Iterator<Item = f64> + '_> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.column(i))
    }

    /// Writes `t,<columns...>` with every value at 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = Vec::with_capacity(self.columns.len() + 1);
        header.push("t");
        header.extend(self.columns.iter().map(String::as_str));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.columns.len() + 1);
        for row in &self.rows {
            record.clear();
            record.push(fmt17(row.t));
            record.extend(row.values.iter().map(|v| fmt17(*v)));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a trace written by [`Trace::write_csv`]. The step size is taken
    /// from the first two rows (zero for single-row traces).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, TraceError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(TraceError::Malformed("first column must be \"t\"".into()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| TraceError::Malformed(format!("row {i}: {s:?}: {e}")))
            };
            let mut fields = rec.iter();
            let t = parse(fields.next().unwrap_or(""))?;
            let values = fields.map(parse).collect::<Result<Vec<_>, _>>()?;
            if values.len() != columns.len() {
                return Err(TraceError::Malformed(format!("row {i} has {} values", values.len())));
            }
            rows.push(TraceRow { t, values });
        }
        let dt = if rows.len() >= 2 { rows[1].t - rows[0].t } else { 0.0 };
        Ok(Self { dt, columns, rows })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Scientific notation with 16 fractional digits: 17 significant digits,
/// enough to round-trip any f64.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnDiff {
    pub name: String,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub row: usize,
    pub column: usize,
    pub t: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub tol: f64,
    pub columns: Vec<ColumnDiff>,
    /// First cell, in row-major order, whose difference exceeds `tol`.
    pub first_divergence: Option<Divergence>,
    pub passed: bool,
}

impl ComparisonReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.columns.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }
}

fn cell_diff(a: f64, b: f64) -> f64 {
    if a.to_bits() == b.to_bits() || a == b {
        0.0
    } else if a.is_nan() || b.is_nan() {
        f64::INFINITY
    } else {
        (a - b).abs()
    }
}

fn same_dt(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Column-wise comparison of two traces of identical shape.
pub fn compare_traces(a: &Trace, b: &Trace, tol: f64) -> Result<ComparisonReport, TraceError> {
    if a.rows.len() != b.rows.len() {
        return Err(TraceError::ShapeMismatch(format!(
            "{} rows vs {} rows",
            a.rows.len(),
            b.rows.len()
        )));
    }
    if a.columns.len() != b.columns.len() {
        return Err(TraceError::ShapeMismatch(format!(
            "{} columns vs {} columns",
            a.columns.len(),
            b.columns.len()
        )));
    }
    if a.rows.len() > 1 && !same_dt(a.dt, b.dt) {
        return Err(TraceError::ShapeMismatch(format!("dt {} vs dt {}", a.dt, b.dt)));
    }

    let mut max = vec![0.0f64; a.columns.len()];
    let mut first = None;
    for (r, (ra, rb)) in a.rows.iter().zip(&b.rows).enumerate() {
        for (c, (va, vb)) in ra.values.iter().zip(&rb.values).enumerate() {
            let d = cell_diff(*va, *vb);
            if d > max[c] {
                max[c] = d;
            }
            if first.is_none() && d > tol {
                first = Some(Divergence {
                    row: r,
                    column: c,
                    t: ra.t,
                    a: *va,
                    b: *vb,
                });
            }
        }
    }
    Ok(ComparisonReport {
        tol,
        columns: a
            .columns
            .iter()
            .zip(max)
            .map(|(name, m)| ColumnDiff {
                name: name.clone(),
                max_abs_diff: m,
            })
            .collect(),
        passed: first.is_none(),
        first_divergence: first,
    })
}
