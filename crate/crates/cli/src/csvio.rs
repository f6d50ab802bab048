//! Observation files: a header `t,x1,...,xd` followed by one row per
//! observation time, with strictly increasing `t`.

use std::io::{Read, Write};
use std::path::Path;

use accel_ode::Dataset;

use crate::error::{CliError, CliResult};

const STAGE: &str = "data parsing";

fn err(message: impl std::fmt::Display) -> CliError {
    CliError::parse(STAGE, message)
}

pub fn read_dataset_file(path: &Path) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    read_dataset(file).map_err(|e| match e {
        CliError::Parse { stage, message } => CliError::Parse { stage, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

pub fn read_dataset<R: Read>(reader: R) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(format!("header: {e}")))?.clone();
    if header.len() < 2 || &header[0] != "t" {
        return Err(err("header must be `t,x1,...,xd`"));
    }
    for (i, name) in header.iter().enumerate().skip(1) {
        if name != format!("x{i}") {
            return Err(err(format!("header column {} is `{name}`, expected `x{i}`", i + 1)));
        }
    }
    let d = header.len() - 1;
    let mut times: Vec<f64> = Vec::new();
    let mut rows = vec![Vec::new(); d];
    for record in rdr.records() {
        let record = record.map_err(|e| err(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != d + 1 {
            return Err(err(format!("line {line}: expected {} fields, found {}", d + 1, record.len())));
        }
        let mut values = Vec::with_capacity(d + 1);
        for (k, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| err(format!("line {line}: `{cell}` in column `{}` is not a number", &header[k])))?;
            if !v.is_finite() {
                return Err(err(format!("line {line}: non-finite value in column `{}`", &header[k])));
            }
            values.push(v);
        }
        let t = values[0];
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(err(format!("line {line}: t = {t} is not greater than the previous t = {prev}")));
            }
        }
        if t < 0.0 {
            return Err(err(format!("line {line}: negative time {t}")));
        }
        times.push(t);
        for (row, v) in rows.iter_mut().zip(&values[1..]) {
            row.push(*v);
        }
    }
    if times.is_empty() {
        return Err(err("no observations"));
    }
    Dataset::from_rows(times, &rows).map_err(err)
}

/// Writes `data` with shortest round-trip formatting, so reading the file
/// back gives bit-identical values.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = data.dim_state();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (j, t) in data.times().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend((0..d).map(|i| data.values()[(i, j)].to_string()));
        w.write_record(&row)?;
    }
    w.flush()
}
