//! CSV artifacts: header row, floats with 17 significant digits, landmark
//! columns `q{i}_{axis}` and `p{i}_{axis}`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::state::LandmarkState;

/// Shortest format that round-trips every `f64`.
pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn axis_name(a: usize) -> String {
    match a {
        0 => "x".into(),
        1 => "y".into(),
        2 => "z".into(),
        _ => format!("a{a}"),
    }
}

/// `q0_x, q0_y, …, p{n−1}_{axis}`.
pub fn state_columns(n: usize, d: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * n * d);
    for v in ["q", "p"] {
        for i in 0..n {
            for a in 0..d {
                out.push(format!("{v}{i}_{}", axis_name(a)));
            }
        }
    }
    out
}

pub fn state_cells(s: &LandmarkState) -> impl Iterator<Item = String> + '_ {
    s.q.iter().chain(&s.p).map(|v| fmt(*v))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(format!("csv {}", path.display()), std::io::Error::other(e))
}

pub fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Rows of `lead` columns followed by the landmark state.
pub fn write_states<'a, I>(path: &Path, lead: &[&str], n: usize, d: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (Vec<String>, &'a LandmarkState)>,
{
    let mut header: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    header.extend(state_columns(n, d));
    write_rows(
        path,
        &header,
        rows.into_iter().map(|(mut cells, s)| {
            cells.extend(state_cells(s));
            cells
        }),
    )
}

/// The `q{i}_{axis}` columns of every row, as flat position vectors.
pub fn read_positions(path: &Path, n: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut cols = Vec::with_capacity(n * d);
    for i in 0..n {
        for a in 0..d {
            let name = format!("q{i}_{}", axis_name(a));
            let c = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("{}: missing column {name}", path.display())))?;
            cols.push(c);
        }
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let v = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::invalid(format!("{}: bad number in row {}", path.display(), row + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(v);
    }
    Ok(out)
}
