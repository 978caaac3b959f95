//! Point-cloud CSV files and versioned JSON documents.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::synth::PointCloud;

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses a JSON document carrying a top-level `format_version`, checking
/// the version before the schema so that newer files fail with a version
/// error rather than a schema error.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, expected: u64) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Parse {
        offset: 0,
        message: "missing or invalid format_version".into(),
    })?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    serde_json::from_str(text).map_err(|e| parse_error(text, e))
}

/// Writes `x0..x{d-1}` columns followed by `t0..` parameter columns when
/// present.
pub fn write_points<W: Write>(cloud: &PointCloud, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let d = cloud.dim();
    let p = cloud.params.as_ref().map_or(0, |a| a.ncols());
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain((0..p).map(|j| format!("t{j}"))).collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..cloud.len() {
        let mut row: Vec<String> = cloud.points.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(params) = &cloud.params {
            row.extend(params.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::arg(format!("CSV error: {other:?}")),
    }
}

/// Reads a point CSV. Columns named `x*` are coordinates and `t*` are
/// generating parameters; any other columns are ignored.
pub fn read_points<R: Read>(input: R) -> Result<PointCloud> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let xs: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('x')).collect();
    let ts: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('t')).collect();
    if xs.is_empty() {
        return Err(Error::arg("point CSV has no x columns"));
    }
    let mut pts = Vec::new();
    let mut params = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::arg(format!("row {} is short", line + 1)))?
                .parse::<f64>()
                .map_err(|e| Error::arg(format!("row {}: {e}", line + 1)))
        };
        for &i in &xs {
            pts.push(field(i)?);
        }
        for &i in &ts {
            params.push(field(i)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::arg("point CSV has no rows"));
    }
    let points = Array2::from_shape_vec((rows, xs.len()), pts).expect("shape matches");
    if ts.is_empty() {
        return PointCloud::new(points);
    }
    let params = Array2::from_shape_vec((rows, ts.len()), params).expect("shape matches");
    PointCloud::with_params(points, params)
}
