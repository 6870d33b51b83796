//! Plain-text file formats: matrix files, functional-path CSV, checker CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::mixing::{CheckOutcome, FiniteChain, FiniteJointDistribution};
use crate::process::FunctionalPath;
use crate::{Error, Result};

/// A parsed matrix file: first line `m l` (or `m` for square), then rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty matrix file".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: hline,
                msg: format!("bad dimension '{t}'"),
            })
        })
        .collect::<Result<_>>()?;
    let (rows, cols) = match dims[..] {
        [m] => (m, m),
        [m, l] => (m, l),
        _ => {
            return Err(Error::Parse {
                line: hline,
                msg: "header must be 'm' or 'm l'".into(),
            })
        }
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line, l) in lines {
        let row: Vec<f64> = l
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number '{t}'"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::Parse {
                line,
                msg: format!("expected {cols} entries, found {}", row.len()),
            });
        }
        values.extend(row);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse {
            line: hline,
            msg: format!("expected {rows} rows, found {seen}"),
        });
    }
    Ok(Matrix { rows, cols, values })
}

pub fn format_matrix(rows: usize, cols: usize, values: &[f64], square_header: bool) -> String {
    let mut s = if square_header && rows == cols {
        format!("{rows}\n")
    } else {
        format!("{rows} {cols}\n")
    };
    for r in 0..rows {
        let row: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_joint(path: &Path) -> Result<FiniteJointDistribution> {
    let m = parse_matrix(&std::fs::read_to_string(path)?)?;
    FiniteJointDistribution::from_flat(m.rows, m.cols, m.values)
}

pub fn read_chain(path: &Path) -> Result<FiniteChain> {
    let m = parse_matrix(&std::fs::read_to_string(path)?)?;
    if m.rows != m.cols {
        return Err(Error::Shape(format!(
            "transition matrix is {}x{}",
            m.rows, m.cols
        )));
    }
    let rows: Vec<Vec<f64>> = m.values.chunks(m.cols).map(<[f64]>::to_vec).collect();
    FiniteChain::new(&rows)
}

/// `grid,g0,...,g_{G-1}[,response]` header, then `k,values[,y]` rows.
pub fn format_functional_path(path: &FunctionalPath) -> String {
    let mut s = String::from("grid");
    for g in path.grid() {
        write!(s, ",{g}").unwrap();
    }
    if path.responses().is_some() {
        s.push_str(",response");
    }
    s.push('\n');
    for (k, c) in path.curves().iter().enumerate() {
        write!(s, "{k}").unwrap();
        for v in c {
            write!(s, ",{v}").unwrap();
        }
        if let Some(r) = path.responses() {
            write!(s, ",{}", r[k]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_functional_path(text: &str) -> Result<FunctionalPath> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.first() != Some(&"grid") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with 'grid'".into(),
        });
    }
    let has_response = fields.last() == Some(&"response");
    let grid_fields = &fields[1..fields.len() - usize::from(has_response)];
    let grid: Vec<f64> = grid_fields
        .iter()
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad grid point '{t}'"),
            })
        })
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    let mut responses = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let vals: Vec<f64> = l
            .split(',')
            .skip(1)
            .map(|t| {
                t.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number '{t}'"),
                })
            })
            .collect::<Result<_>>()?;
        let expect = grid.len() + usize::from(has_response);
        if vals.len() != expect {
            return Err(Error::Parse {
                line,
                msg: format!("expected {expect} values, found {}", vals.len()),
            });
        }
        if has_response {
            responses.push(vals[grid.len()]);
        }
        curves.push(vals[..grid.len()].to_vec());
    }
    FunctionalPath::new(grid, curves, has_response.then_some(responses))
}

/// One row of a checker report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub check_name: String,
    pub outcome: CheckOutcome,
    pub seed: u64,
}

pub const CHECK_HEADER: &str = "check_name,lhs,rhs,holds,seed";

pub fn format_checks(records: &[CheckRecord]) -> String {
    let mut s = format!("{CHECK_HEADER}\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.check_name, r.outcome.lhs, r.outcome.rhs, r.outcome.holds, r.seed
        )
        .unwrap();
    }
    s
}
