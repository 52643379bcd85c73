//! CSV and JSON file formats.
//!
//! Datasets are `t,y1,...,yd` with one column per state component; an empty
//! cell is a missing value and a column with no values marks an unobserved
//! component. Trajectories are `t,x1,...,xd`. Numbers are written in the
//! shortest form that parses back to the same `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::criteria::Dataset;
use crate::diagnostics::LambdaLadderTrace;
use crate::error::{Error, Result};
use crate::profiler::LadderRung;
use crate::reference::Trajectory;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

fn parse_number(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}, column {column}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("line {line}, column {column}: value is not finite")));
    }
    Ok(v)
}

fn check_header(header: &csv::StringRecord, prefix: &str) -> Result<usize> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let expected = |d: usize| {
        std::iter::once("t".to_string())
            .chain((1..=d).map(|k| format!("{prefix}{k}")))
            .collect::<Vec<_>>()
    };
    let d = names.len().saturating_sub(1);
    if d == 0 || names != expected(d) {
        return Err(Error::Parse(format!(
            "bad CSV header '{}': expected '{}'",
            names.join(","),
            expected(d.max(1)).join(",")
        )));
    }
    Ok(d)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Parse a dataset; every observed column uses the squared-error criterion.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let d = check_header(&header, "y")?;
    let mut times = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if rec.len() != d + 1 {
            return Err(Error::Parse(format!("line {line}: {} fields, expected {}", rec.len(), d + 1)));
        }
        times.push(parse_number(&rec[0], line, "t")?);
        let row = (1..=d)
            .map(|k| {
                let f = rec[k].trim();
                if f.is_empty() {
                    Ok(None)
                } else {
                    parse_number(f, line, &header[k]).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    if times.is_empty() {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    let observed: Vec<usize> = (0..d).filter(|&a| cells.iter().any(|r| r[a].is_some())).collect();
    let rows = cells
        .into_iter()
        .map(|r| observed.iter().map(|&a| r[a]).collect())
        .collect();
    Dataset::new(times, d, observed, rows)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::NotFound(format!("cannot open dataset {}: {e}", path.display())))?;
    read_dataset(f)
}

pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let d = data.dim_state();
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|k| format!("y{k}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n() {
        let mut rec = vec![fmt(data.times()[i])];
        for a in 0..d {
            rec.push(data.value_of_component(i, a).map(fmt).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(data: &Dataset, path: &Path) -> Result<()> {
    write_dataset(data, std::fs::File::create(path)?)
}

/// Parse a trajectory; slopes are reconstructed by three-point differences.
pub fn read_trajectory<R: Read>(reader: R) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let d = check_header(&header, "x")?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if rec.len() != d + 1 {
            return Err(Error::Parse(format!("line {line}: {} fields, expected {}", rec.len(), d + 1)));
        }
        times.push(parse_number(&rec[0], line, "t")?);
        values.push(
            (1..=d)
                .map(|k| parse_number(&rec[k], line, &header[k]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let n = times.len();
    if n == 0 {
        return Err(Error::Parse("trajectory has no rows".into()));
    }
    let slopes = (0..n)
        .map(|i| {
            (0..d)
                .map(|a| {
                    if n == 1 {
                        return 0.0;
                    }
                    let (i0, i1) = if i == 0 {
                        (0, 1)
                    } else if i == n - 1 {
                        (n - 2, n - 1)
                    } else {
                        (i - 1, i + 1)
                    };
                    (values[i1][a] - values[i0][a]) / (times[i1] - times[i0])
                })
                .collect()
        })
        .collect();
    Trajectory::new(times, values, slopes)
}

pub fn read_trajectory_file(path: &Path) -> Result<Trajectory> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::NotFound(format!("cannot open trajectory {}: {e}", path.display())))?;
    read_trajectory(f)
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=traj.dim()).map(|k| format!("x{k}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (t, v) in traj.times().iter().zip(traj.values()) {
        let rec: Vec<String> = std::iter::once(fmt(*t)).chain(v.iter().map(|x| fmt(*x))).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_file(traj: &Trajectory, path: &Path) -> Result<()> {
    write_trajectory(traj, std::fs::File::create(path)?)
}

/// `lambda,<names>...,H,J,ci_lo_<name>...,ci_hi_<name>...`; interval cells
/// are empty on rungs without intervals.
pub fn write_ladder_csv<W: Write>(names: &[String], rungs: &[LadderRung], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["lambda".to_string()];
    header.extend(names.iter().cloned());
    header.push("H".into());
    header.push("J".into());
    header.extend(names.iter().map(|n| format!("ci_lo_{n}")));
    header.extend(names.iter().map(|n| format!("ci_hi_{n}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rungs {
        let mut rec = vec![fmt(r.lambda)];
        rec.extend(r.theta_star.iter().map(|v| fmt(*v)));
        rec.push(fmt(r.h_value));
        rec.push(fmt(r.j_value));
        match &r.intervals {
            Some(iv) => {
                rec.extend(iv.iter().map(|i| fmt(i.lo)));
                rec.extend(iv.iter().map(|i| fmt(i.hi)));
            }
            None => rec.extend(std::iter::repeat(String::new()).take(2 * names.len())),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `lambda,J,H`.
pub fn write_limit_csv<W: Write>(trace: &LambdaLadderTrace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "J", "H"]).map_err(csv_err)?;
    for k in 0..trace.lambdas.len() {
        w.write_record([fmt(trace.lambdas[k]), fmt(trace.j_values[k]), fmt(trace.h_values[k])])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t,diff_x1,...`.
pub fn write_difference_csv<W: Write>(curve: &[(f64, Vec<f64>)], writer: W) -> Result<()> {
    let d = curve.first().map_or(0, |(_, v)| v.len());
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|k| format!("diff_x{k}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (t, v) in curve {
        let rec: Vec<String> = std::iter::once(fmt(*t)).chain(v.iter().map(|x| fmt(*x))).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = Dataset::new(
            vec![0.0, 0.1, 0.30000000000000004],
            3,
            vec![0, 2],
            vec![
                vec![Some(1.0 / 3.0), None],
                vec![Some(-0.0), Some(2.5e-300)],
                vec![None, Some(-7.125)],
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y1,y2,y3\n"));
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.observed_components(), &[0, 2]);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back.value(0, 0).unwrap().to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn bad_header_is_a_parse_error() {
        let err = read_dataset("time,y1\n0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)) && err.is_usage());
        assert!(read_dataset("t,y2\n0,1\n".as_bytes()).is_err());
        assert!(read_dataset("t,y1\n0,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let traj = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![1.0, 0.1], vec![2.0, 0.2], vec![4.0, 0.30000000000000004]],
            vec![vec![0.0, 0.0]; 3],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let back = read_trajectory(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_trajectory(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }
}
