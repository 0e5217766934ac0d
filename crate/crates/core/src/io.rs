//! Header-free, row-major CSV for matrices plus small CSV table helpers.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn write_matrix<W: Write>(out: W, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix<R: std::io::Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse("ragged matrix rows".into()));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_matrix(File::create(path)?, m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(File::open(path)?)
}

/// Writes a table with a fixed header.
pub fn write_table<W: Write, S: AsRef<str>>(
    out: W,
    header: &[S],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(header.iter().map(|h| h.as_ref()))?;
    for row in rows {
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_table<S: AsRef<str>>(
    path: impl AsRef<Path>,
    header: &[S],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    write_table(File::create(path)?, header, rows)
}

/// Reads a headed table as `(header, rows)`.
pub fn load_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    let header = rdr.headers()?.iter().map(str::to_owned).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}
