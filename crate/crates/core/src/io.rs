//! CSV formats.
//!
//! * graph: `node_id,lat,lon` (or `node_id,x,y` for planar coordinates),
//!   ids `0..n-1` each exactly once;
//! * series: long format `t,node_id,value`, missing entries absent or with an
//!   empty value;
//! * mask: `t,node_id,mask` with 0/1 values;
//! * spread: `t,node_id,spread`;
//! * spectrum: `freq_bin,amplitude`;
//! * training log: `epoch,loss,r`.
//!
//! Floats are written in shortest round-trip form, so files re-read exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::data::SeriesTensor;
use crate::error::{Error, Result};
use crate::graph::Units;
use crate::train::EpochLog;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str, text: &str) -> Result<T> {
    text.parse()
        .map_err(|_| format_err(path, format!("line {line}: cannot parse {field} from `{text}`")))
}

fn header(path: &Path, r: &mut csv::Reader<File>) -> Result<Vec<String>> {
    Ok(r.headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect())
}

fn expect_header(path: &Path, r: &mut csv::Reader<File>, want: &[&str]) -> Result<()> {
    let got = header(path, r)?;
    if got != want {
        return Err(format_err(path, format!("expected header `{}`, found `{}`", want.join(","), got.join(","))));
    }
    Ok(())
}

pub fn write_graph(path: &Path, coords: &[[f64; 2]], units: Units) -> Result<()> {
    let mut w = create(path)?;
    match units {
        Units::Latlon => w.write_record(["node_id", "lat", "lon"])?,
        Units::Euclidean => w.write_record(["node_id", "x", "y"])?,
    }
    for (i, c) in coords.iter().enumerate() {
        w.write_record([i.to_string(), c[0].to_string(), c[1].to_string()])?;
    }
    finish(w, path)
}

/// Coordinates indexed by node id; the header decides the units.
pub fn read_graph(path: &Path) -> Result<(Vec<[f64; 2]>, Units)> {
    let mut r = open(path)?;
    let head = header(path, &mut r)?;
    let units = match head.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["node_id", "lat", "lon"] => Units::Latlon,
        ["node_id", "x", "y"] => Units::Euclidean,
        _ => {
            return Err(format_err(
                path,
                format!("expected header `node_id,lat,lon` or `node_id,x,y`, found `{}`", head.join(",")),
            ))
        }
    };
    let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(format_err(path, format!("line {line}: expected 3 fields")));
        }
        let id: usize = parse(path, line, "node_id", &rec[0])?;
        let a: f64 = parse(path, line, "coordinate", &rec[1])?;
        let b: f64 = parse(path, line, "coordinate", &rec[2])?;
        rows.push((id, [a, b]));
    }
    let n = rows.len();
    let mut coords = vec![None; n];
    for (id, c) in rows {
        if id >= n {
            return Err(format_err(path, format!("node ids must be 0..{}; found {id}", n.saturating_sub(1))));
        }
        if coords[id].replace(c).is_some() {
            return Err(format_err(path, format!("node id {id} appears twice")));
        }
    }
    Ok((coords.into_iter().map(|c| c.expect("ids are a permutation")).collect(), units))
}

fn write_long(path: &Path, column: &str, values: ArrayView2<f64>, present: Option<ArrayView2<f64>>) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["t", "node_id", column])?;
    let (n, len) = values.dim();
    for t in 0..len {
        for j in 0..n {
            let keep = present.is_none_or(|m| m[[j, t]] == 1.0);
            let v = if keep { values[[j, t]].to_string() } else { String::new() };
            w.write_record([t.to_string(), j.to_string(), v])?;
        }
    }
    finish(w, path)
}

/// Series in long format; entries with `mask = 0` get an empty value.
pub fn write_series(path: &Path, series: &SeriesTensor) -> Result<()> {
    write_long(path, "value", series.values.view(), Some(series.mask.view()))
}

/// Complete `n x L` values in the series format.
pub fn write_values(path: &Path, values: ArrayView2<f64>) -> Result<()> {
    write_long(path, "value", values, None)
}

pub fn write_mask(path: &Path, mask: ArrayView2<f64>) -> Result<()> {
    write_long(path, "mask", mask, None)
}

pub fn write_spread(path: &Path, spread: ArrayView2<f64>) -> Result<()> {
    write_long(path, "spread", spread, None)
}

/// Read `(t, node_id, value)` rows into an `n_nodes x L` grid with a
/// presence mask. `L` is one past the largest `t`; without `n_nodes` the node
/// count is one past the largest id.
fn read_long(path: &Path, column: &str, n_nodes: Option<usize>) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut r = open(path)?;
    expect_header(path, &mut r, &["t", "node_id", column])?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(format_err(path, format!("line {line}: expected 3 fields")));
        }
        let t: usize = parse(path, line, "t", &rec[0])?;
        let j: usize = parse(path, line, "node_id", &rec[1])?;
        if n_nodes.is_some_and(|n| j >= n) {
            return Err(format_err(path, format!("line {line}: node_id {j} outside 0..{}", n_nodes.unwrap_or(0))));
        }
        let v: Option<f64> = if rec[2].is_empty() {
            None
        } else {
            let v: f64 = parse(path, line, column, &rec[2])?;
            if !v.is_finite() {
                return Err(format_err(path, format!("line {line}: non-finite {column}")));
            }
            Some(v)
        };
        rows.push((line, t, j, v));
    }
    let len = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let n_nodes = n_nodes.unwrap_or_else(|| rows.iter().map(|r| r.2 + 1).max().unwrap_or(0));
    if len == 0 {
        return Err(format_err(path, "no rows"));
    }
    let mut values = Array2::zeros((n_nodes, len));
    let mut present = Array2::zeros((n_nodes, len));
    let mut seen = Array2::from_elem((n_nodes, len), false);
    for (line, t, j, v) in rows {
        if std::mem::replace(&mut seen[[j, t]], true) {
            return Err(format_err(path, format!("line {line}: duplicate entry for t={t}, node_id={j}")));
        }
        if let Some(v) = v {
            values[[j, t]] = v;
            present[[j, t]] = 1.0;
        }
    }
    Ok((values, present))
}

pub fn read_series(path: &Path, n_nodes: usize) -> Result<SeriesTensor> {
    let (values, mask) = read_long(path, "value", Some(n_nodes))?;
    SeriesTensor::new(values, mask)
}

/// Like [`read_series`], taking the node count from the largest id present.
pub fn read_series_any(path: &Path) -> Result<SeriesTensor> {
    let (values, mask) = read_long(path, "value", None)?;
    SeriesTensor::new(values, mask)
}

/// A file in the series format that must have every entry.
pub fn read_values(path: &Path, n_nodes: usize) -> Result<Array2<f64>> {
    let (values, present) = read_long(path, "value", Some(n_nodes))?;
    if present.iter().any(|p| *p == 0.0) {
        return Err(format_err(path, "expected a value for every (t, node_id)"));
    }
    Ok(values)
}

pub fn read_mask(path: &Path, n_nodes: usize) -> Result<Array2<f64>> {
    let (values, present) = read_long(path, "mask", Some(n_nodes))?;
    if present.iter().any(|p| *p == 0.0) {
        return Err(format_err(path, "expected a mask value for every (t, node_id)"));
    }
    if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(format_err(path, "mask values must be 0 or 1"));
    }
    Ok(values)
}

pub fn write_spectrum(out: impl Write, amplitudes: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["freq_bin", "amplitude"])?;
    for (k, a) in amplitudes.iter().enumerate() {
        w.write_record([k.to_string(), a.to_string()])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["epoch", "loss", "r"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.loss.to_string(), e.r.to_string()])?;
    }
    finish(w, path)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = open(path)?;
    expect_header(path, &mut r, &["epoch", "loss", "r"])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok(EpochLog {
                epoch: parse(path, line, "epoch", &rec[0])?,
                loss: parse(path, line, "loss", &rec[1])?,
                r: parse(path, line, "r", &rec[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("graph.csv");
        let coords = vec![[30.123456789, 120.5], [31.0, -0.1], [29.9, 121.0]];
        write_graph(&p, &coords, Units::Latlon).unwrap();
        assert_eq!(read_graph(&p).unwrap(), (coords.clone(), Units::Latlon));
        write_graph(&p, &coords, Units::Euclidean).unwrap();
        assert_eq!(read_graph(&p).unwrap().1, Units::Euclidean);
    }

    #[test]
    fn graph_ids_must_be_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("graph.csv");
        std::fs::write(&p, "node_id,lat,lon\n0,1,2\n2,3,4\n").unwrap();
        assert!(read_graph(&p).is_err());
        std::fs::write(&p, "node_id,lat,lon\n1,1,2\n0,3,4\n").unwrap();
        assert_eq!(read_graph(&p).unwrap().0, vec![[3.0, 4.0], [1.0, 2.0]]);
        std::fs::write(&p, "id,lat,lon\n0,1,2\n").unwrap();
        assert!(read_graph(&p).is_err());
    }

    #[test]
    fn series_round_trip_with_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("series.csv");
        let s = SeriesTensor::new(array![[0.1, 2.5, -3.0], [1e-300, 7.0, 0.3]], array![[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]).unwrap();
        write_series(&p, &s).unwrap();
        assert_eq!(read_series(&p, 2).unwrap(), s);
        assert!(read_values(&p, 2).is_err());
    }

    #[test]
    fn absent_rows_are_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("series.csv");
        std::fs::write(&p, "t,node_id,value\n0,0,1.5\n2,1,3\n1,0,\n").unwrap();
        let s = read_series(&p, 2).unwrap();
        assert_eq!(s.mask, array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(s.values[[1, 2]], 3.0);
        std::fs::write(&p, "t,node_id,value\n0,0,1\n0,0,2\n").unwrap();
        assert!(read_series(&p, 1).is_err());
        std::fs::write(&p, "t,node_id,value\n0,5,1\n").unwrap();
        assert!(read_series(&p, 2).is_err());
    }

    #[test]
    fn mask_and_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.csv");
        let m = array![[1.0, 0.0], [0.0, 1.0]];
        write_mask(&p, m.view()).unwrap();
        assert_eq!(read_mask(&p, 2).unwrap(), m);
        let p = dir.path().join("log.csv");
        let log = vec![
            EpochLog { epoch: 1, loss: 0.123456789012345, r: 0.1 },
            EpochLog { epoch: 2, loss: 0.1, r: -0.000123 },
        ];
        write_log(&p, &log).unwrap();
        assert_eq!(read_log(&p).unwrap(), log);
    }

    #[test]
    fn spectrum_csv() {
        let mut buf = Vec::new();
        write_spectrum(&mut buf, &[1.0, 0.5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "freq_bin,amplitude\n0,1\n1,0.5\n");
    }
}
