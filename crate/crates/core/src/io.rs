//! CSV ingestion and export.
//!
//! * samples: column `tau` (required), optional `weight`
//! * density targets: columns `x` and `density`
//! * path dumps: `path_id,time,from,to` with 1-based states, `to = p+1` for absorption
//!
//! Floats are written with 17 significant digits.

use std::io::{Read, Write};

use crate::em::WeightedSample;
use crate::error::{Error, Result};
use crate::simulate::SamplePath;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record
        .get(idx)
        .ok_or_else(|| Error::Input(format!("line {line}: missing `{name}` field")))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Input(format!("line {line}: `{name}` value {raw:?} is not a number")))
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Input(format!("line {line}: {e}"))
}

/// Reads a `tau[,weight]` table.
pub fn read_sample<R: Read>(input: R) -> Result<WeightedSample> {
    let mut rdr = csv_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let tau_col = column(&headers, "tau").ok_or_else(|| Error::Input("line 1: missing `tau` column".into()))?;
    let weight_col = column(&headers, "weight");
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let tau = parse_field(&record, tau_col, "tau")?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Input(format!("line {line}: tau must be positive, got {tau}")));
        }
        let w = match weight_col {
            Some(c) => parse_field(&record, c, "weight")?,
            None => 1.0,
        };
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::Input(format!("line {line}: weight must be positive, got {w}")));
        }
        values.push(tau);
        weights.push(w);
    }
    WeightedSample::new(values, weights)
}

/// Tabulated density `(x_i, h_i)` with strictly increasing positive `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTarget {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityTarget {
    pub fn new(x: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if x.len() != density.len() || x.is_empty() {
            return Err(Error::Input("density target needs equally many x and density values".into()));
        }
        let mut prev = 0.0;
        for (i, (&xi, &hi)) in x.iter().zip(&density).enumerate() {
            if !(xi.is_finite() && xi > prev) {
                return Err(Error::Input(format!(
                    "row {}: x must be positive and strictly increasing, got {xi}",
                    i + 1
                )));
            }
            if !(hi.is_finite() && hi >= 0.0) {
                return Err(Error::Input(format!("row {}: density must be nonnegative, got {hi}", i + 1)));
            }
            prev = xi;
        }
        Ok(Self { x, density })
    }

    /// Weighted sample with weights `h_i · (x_i - x_{i-1})` (`x_0 = 0`),
    /// normalized to sum to one; zero-height points are dropped.
    pub fn to_sample(&self) -> Result<WeightedSample> {
        let mut values = Vec::new();
        let mut weights = Vec::new();
        let mut prev = 0.0;
        for (&x, &h) in self.x.iter().zip(&self.density) {
            let w = h * (x - prev);
            prev = x;
            if w > 0.0 {
                values.push(x);
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Input("density target has no positive heights".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        WeightedSample::new(values, weights)
    }

    /// Divides the abscissae by `divisor` and rescales heights so the table
    /// still describes a density.
    pub fn scaled(&self, divisor: f64) -> Result<Self> {
        if !(divisor.is_finite() && divisor > 0.0) {
            return Err(Error::Input(format!("scale must be positive, got {divisor}")));
        }
        Self::new(
            self.x.iter().map(|x| x / divisor).collect(),
            self.density.iter().map(|h| h * divisor).collect(),
        )
    }
}

/// Reads an `x,density` table.
pub fn read_density_target<R: Read>(input: R) -> Result<DensityTarget> {
    let mut rdr = csv_reader(input);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let x_col = column(&headers, "x").ok_or_else(|| Error::Input("line 1: missing `x` column".into()))?;
    let h_col =
        column(&headers, "density").ok_or_else(|| Error::Input("line 1: missing `density` column".into()))?;
    let mut x = Vec::new();
    let mut h = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        x.push(parse_field(&record, x_col, "x")?);
        h.push(parse_field(&record, h_col, "density")?);
    }
    DensityTarget::new(x, h)
}

/// Writes `tau[,weight]`.
pub fn write_sample<W: Write>(out: W, values: &[f64], weights: Option<&[f64]>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    match weights {
        Some(w) => {
            wtr.write_record(["tau", "weight"]).map_err(io)?;
            for (v, w) in values.iter().zip(w) {
                wtr.write_record([fmt_f64(*v), fmt_f64(*w)]).map_err(io)?;
            }
        }
        None => {
            wtr.write_record(["tau"]).map_err(io)?;
            for v in values {
                wtr.write_record([fmt_f64(*v)]).map_err(io)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `path_id,time,from,to` rows; the start of each path is a row with
/// time 0 and an empty `from`.
pub fn write_paths<W: Write>(out: W, paths: &[SamplePath]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wtr.write_record(["path_id", "time", "from", "to"]).map_err(io)?;
    for (id, path) in paths.iter().enumerate() {
        wtr.write_record([
            id.to_string(),
            fmt_f64(0.0),
            String::new(),
            (path.initial_state + 1).to_string(),
        ])
        .map_err(io)?;
        for e in &path.events {
            wtr.write_record([
                id.to_string(),
                fmt_f64(e.time),
                (e.from + 1).to_string(),
                (e.to + 1).to_string(),
            ])
            .map_err(io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_weighted_sample() {
        let s = read_sample("tau,weight\n1.5,2\n0.5,1\n".as_bytes()).unwrap();
        assert_eq!(s.values(), &[1.5, 0.5]);
        assert_eq!(s.weights(), &[2.0, 1.0]);
        let s = read_sample("tau\n3\n".as_bytes()).unwrap();
        assert_eq!(s.weights(), &[1.0]);
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = read_sample("tau\n1.0\nabc\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = read_sample("tau\n1.0\n-2\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = read_sample("value\n1.0\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("tau"), "{err}");
    }

    #[test]
    fn density_target_weights() {
        let t = DensityTarget::new(vec![0.5, 1.0, 1.5], vec![1.0, 0.0, 3.0]).unwrap();
        let s = t.to_sample().unwrap();
        assert_eq!(s.values(), &[0.5, 1.5]);
        assert_eq!(s.weights(), &[0.25, 0.75]);
        let scaled = DensityTarget::new(vec![0.5, 1.0, 1.5], vec![7.0, 0.0, 21.0]).unwrap();
        assert_eq!(scaled.to_sample().unwrap(), s);
        assert!(DensityTarget::new(vec![1.0], vec![0.0]).unwrap().to_sample().is_err());
        assert!(DensityTarget::new(vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sample_csv_round_trip() {
        let mut buf = Vec::new();
        let values = [0.1, 1.0 / 3.0, 2.5e-7];
        write_sample(&mut buf, &values, None).unwrap();
        let back = read_sample(buf.as_slice()).unwrap();
        assert_eq!(back.values(), &values);
    }
}
