//! Dataset files: a CSV with columns `t,x,<aux…>` and an optional JSON
//! sidecar carrying the true parameters and generation metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::UniformTimeSeries;
use crate::synth::{DatasetMeta, SyntheticDataset};

/// Observed series and any auxiliary series on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: UniformTimeSeries,
    pub aux_names: Vec<String>,
    pub aux: Vec<UniformTimeSeries>,
}

impl Dataset {
    pub fn aux_by_name(&self, name: &str) -> Option<&UniformTimeSeries> {
        self.aux_names.iter().position(|n| n == name).map(|i| &self.aux[i])
    }
}

impl From<&SyntheticDataset> for Dataset {
    fn from(d: &SyntheticDataset) -> Self {
        Dataset {
            x: d.x.clone(),
            aux_names: d.aux_names.clone(),
            aux: d.aux.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    pub t0: f64,
    pub dt: f64,
    pub aux_names: Vec<String>,
    pub meta: DatasetMeta,
    pub theta_true: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_true: Option<Vec<usize>>,
}

/// Writes a table with a header and equally long columns.
pub fn write_columns<W: Write>(out: W, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    if header.len() != columns.len() || columns.iter().any(|c| c.len() != columns[0].len()) {
        return Err(Error::contract("columns and header do not line up"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric table; returns the header and the columns.
pub fn read_columns<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: `{field}` is not a number", line + 2)))?;
            cols[c].push(v);
        }
    }
    Ok((header, cols))
}

/// Builds a series from sampled times, checking the spacing is uniform.
pub fn series_from_times(times: &[f64], values: Vec<f64>) -> Result<UniformTimeSeries> {
    let n = times.len();
    if n < 2 {
        return Err(Error::Parse("a series needs at least two samples".into()));
    }
    let t0 = times[0];
    let dt = (times[n - 1] - t0) / (n - 1) as f64;
    for (i, &t) in times.iter().enumerate() {
        if ((t - (t0 + i as f64 * dt)) / dt).abs() > 1e-6 {
            return Err(Error::Parse(format!("time stamps are not uniform at row {}", i + 2)));
        }
    }
    UniformTimeSeries::new(t0, dt, values)
}

/// Time stamps rounded to six digits below the step, so that a series read
/// back from a file writes identical stamps.
pub fn time_column(s: &UniformTimeSeries) -> Vec<f64> {
    let digits = (6.0 - s.dt.log10().floor()).clamp(0.0, 15.0) as i32;
    let scale = 10f64.powi(digits);
    (0..s.len()).map(|i| (s.time(i) * scale).round() / scale).collect()
}

pub fn write_dataset_csv<W: Write>(out: W, d: &Dataset) -> Result<()> {
    let t = time_column(&d.x);
    let mut header = vec!["t", "x"];
    header.extend(d.aux_names.iter().map(String::as_str));
    let mut cols: Vec<&[f64]> = vec![&t, &d.x.values];
    cols.extend(d.aux.iter().map(|a| a.values.as_slice()));
    write_columns(out, &header, &cols)
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let (header, mut cols) = read_columns(input)?;
    if header.len() < 2 || header[0] != "t" || header[1] != "x" {
        return Err(Error::Parse("dataset header must start with `t,x`".into()));
    }
    let aux_cols = cols.split_off(2);
    let values = cols.pop().expect("two columns");
    let x = series_from_times(&cols[0], values)?;
    let aux = aux_cols
        .into_iter()
        .map(|v| UniformTimeSeries::new(x.t0, x.dt, v))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        x,
        aux_names: header[2..].to_vec(),
        aux,
    })
}

/// Sidecar path next to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `<path>` and its JSON sidecar.
pub fn save_synthetic(path: &Path, d: &SyntheticDataset) -> Result<()> {
    write_dataset_csv(BufWriter::new(File::create(path)?), &Dataset::from(d))?;
    let sidecar = Sidecar {
        n: d.x.len(),
        t0: d.x.t0,
        dt: d.x.dt,
        aux_names: d.aux_names.clone(),
        meta: d.meta.clone(),
        theta_true: d.theta_true.clone(),
        gamma_true: d.gamma_true.clone(),
    };
    let mut w = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer(&mut w, &sidecar)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_csv(BufReader::new(File::open(path)?))
}

/// The sidecar of a dataset, if one exists.
pub fn load_sidecar(csv_path: &Path) -> Result<Option<Sidecar>> {
    let p = sidecar_path(csv_path);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(BufReader::new(File::open(p)?))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Example;

    #[test]
    fn dataset_round_trip_is_lossless() {
        let x = UniformTimeSeries::new(0.5, 0.1, vec![0.1, 1.0 / 3.0, -2.5e-7, 4.0]).unwrap();
        let u = UniformTimeSeries::new(0.5, 0.1, vec![1.0, 2.0, 3.0, 1e300]).unwrap();
        let d = Dataset {
            x,
            aux_names: vec!["u".into()],
            aux: vec![u],
        };
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &d).unwrap();
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back.x.values, d.x.values);
        assert_eq!(
            back.aux,
            vec![UniformTimeSeries::new(back.x.t0, back.x.dt, d.aux[0].values.clone()).unwrap()]
        );
        let mut again = Vec::new();
        write_dataset_csv(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(read_dataset_csv("t,y\n0,1\n1,2\n".as_bytes()).is_err());
        assert!(read_dataset_csv("t,x\n0,1\n1,2\n3,4\n".as_bytes()).is_err());
        assert!(read_dataset_csv("t,x\n0,1\n1,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_files_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Example::Doublewell.default_config(2);
        cfg.n = 200;
        cfg.dt_internal = 1e-3;
        let d = crate::synth::generate_example(&cfg).unwrap();
        let path = dir.path().join("dw.csv");
        save_synthetic(&path, &d).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.x.values, d.x.values);
        assert_eq!(back.aux_by_name("u").unwrap().values, d.aux[0].values);
        let side = load_sidecar(&path).unwrap().unwrap();
        assert_eq!(side.theta_true, d.theta_true);
        assert_eq!(side.meta.model, "doublewell");
    }
}
