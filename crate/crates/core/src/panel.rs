use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Balanced panel in wide layout: `y` and each covariate (and optional
/// instrument) are `T x N` matrices, row = period, column = unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    pub y: DMatrix<f64>,
    pub x: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub unit_labels: Vec<String>,
    pub time_labels: Vec<String>,
}

impl PanelData {
    pub fn new(y: DMatrix<f64>, x: Vec<DMatrix<f64>>, z: Vec<DMatrix<f64>>) -> Result<Self> {
        let (t, n) = (y.nrows(), y.ncols());
        if t == 0 || n == 0 {
            return Err(Error::Invalid("panel must have at least one period and unit".into()));
        }
        if x.is_empty() {
            return Err(Error::Invalid("panel needs at least one covariate".into()));
        }
        for (k, m) in x.iter().enumerate() {
            if m.nrows() != t || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "covariate {k} is {}x{}, expected {t}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (l, m) in z.iter().enumerate() {
            if m.nrows() != t || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "instrument {l} is {}x{}, expected {t}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let all = y.iter().chain(x.iter().flat_map(|m| m.iter())).chain(z.iter().flat_map(|m| m.iter()));
        for v in all {
            if !v.is_finite() {
                return Err(Error::Invalid("panel contains non-finite values".into()));
            }
        }
        let unit_labels = (0..n).map(|i| i.to_string()).collect();
        let time_labels = (0..t).map(|t| t.to_string()).collect();
        Ok(PanelData { y, x, z, unit_labels, time_labels })
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// Number of covariates.
    pub fn k(&self) -> usize {
        self.x.len()
    }

    /// Number of instrument columns.
    pub fn l(&self) -> usize {
        self.z.len()
    }

    /// Removes per-unit time means from every variable (within transform).
    /// Eliminates unit fixed effects; requires at least two periods.
    pub fn demean_time(&self) -> Result<PanelData> {
        if self.t() < 2 {
            return Err(Error::Invalid("time demeaning needs at least 2 periods".into()));
        }
        let mut out = self.clone();
        for m in std::iter::once(&mut out.y).chain(out.x.iter_mut()).chain(out.z.iter_mut()) {
            demean_columns(m);
        }
        Ok(out)
    }

    /// Applies `I - H`, `H = (1/n) iota iota'`, within every period: each
    /// variable loses its cross-sectional mean.  Under a fully row-normalized
    /// network this removes common time shocks from the outcome equation.
    pub fn global_difference(&self) -> PanelData {
        let mut out = self.clone();
        for m in std::iter::once(&mut out.y).chain(out.x.iter_mut()).chain(out.z.iter_mut()) {
            demean_rows(m);
        }
        out
    }

    /// Reads a long-format CSV with header `unit,time,y,x1..xK[,z1..zL]`.
    /// The panel must be balanced with no duplicate `(unit, time)` pairs.
    /// Units and times are ordered numerically when all labels parse as
    /// integers, lexicographically otherwise.
    pub fn from_long_csv<R: Read>(reader: R) -> Result<PanelData> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        if headers.len() < 4 || headers[0] != "unit" || headers[1] != "time" || headers[2] != "y" {
            return Err(Error::Invalid(format!(
                "panel header must start with 'unit,time,y,x1..', got '{}'",
                headers.join(",")
            )));
        }
        let mut k = 0;
        let mut idx = 3;
        while idx < headers.len() && headers[idx] == format!("x{}", k + 1) {
            k += 1;
            idx += 1;
        }
        let mut l = 0;
        while idx < headers.len() && headers[idx] == format!("z{}", l + 1) {
            l += 1;
            idx += 1;
        }
        if k == 0 || idx != headers.len() {
            return Err(Error::Invalid(format!(
                "panel header columns after 'y' must be x1..xK then z1..zL, got '{}'",
                headers.join(",")
            )));
        }

        struct Row {
            unit: String,
            time: String,
            vals: Vec<f64>,
        }
        let mut rows: Vec<Row> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 + k + l {
                return Err(Error::Invalid(format!(
                    "panel row {} has {} fields, expected {}",
                    r + 2,
                    rec.len(),
                    3 + k + l
                )));
            }
            let mut vals = Vec::with_capacity(1 + k + l);
            for f in rec.iter().skip(2) {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad numeric value '{f}' in panel row {}", r + 2)))?;
                vals.push(v);
            }
            rows.push(Row { unit: rec[0].to_string(), time: rec[1].to_string(), vals });
        }
        if rows.is_empty() {
            return Err(Error::Invalid("panel file has no data rows".into()));
        }

        let units = sorted_labels(rows.iter().map(|r| r.unit.clone()));
        let times = sorted_labels(rows.iter().map(|r| r.time.clone()));
        let (n, t) = (units.len(), times.len());
        if rows.len() != n * t {
            return Err(Error::Invalid(format!(
                "panel is unbalanced: {n} units x {t} periods needs {} rows, got {}",
                n * t,
                rows.len()
            )));
        }
        let unit_index: HashMap<&str, usize> =
            units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let time_index: HashMap<&str, usize> =
            times.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let mut y = DMatrix::zeros(t, n);
        let mut x: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(t, n)).collect();
        let mut z: Vec<DMatrix<f64>> = (0..l).map(|_| DMatrix::zeros(t, n)).collect();
        let mut seen = vec![false; n * t];
        for row in &rows {
            let i = unit_index[row.unit.as_str()];
            let s = time_index[row.time.as_str()];
            if seen[s * n + i] {
                return Err(Error::Invalid(format!(
                    "duplicate observation for unit '{}' at time '{}'",
                    row.unit, row.time
                )));
            }
            seen[s * n + i] = true;
            y[(s, i)] = row.vals[0];
            for (kk, m) in x.iter_mut().enumerate() {
                m[(s, i)] = row.vals[1 + kk];
            }
            for (ll, m) in z.iter_mut().enumerate() {
                m[(s, i)] = row.vals[1 + k + ll];
            }
        }
        let mut panel = PanelData::new(y, x, z)?;
        panel.unit_labels = units;
        panel.time_labels = times;
        Ok(panel)
    }

    pub fn from_long_csv_path<P: AsRef<Path>>(path: P) -> Result<PanelData> {
        let file = std::fs::File::open(path)?;
        Self::from_long_csv(file)
    }

    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["unit".to_string(), "time".to_string(), "y".to_string()];
        for k in 0..self.k() {
            header.push(format!("x{}", k + 1));
        }
        for l in 0..self.l() {
            header.push(format!("z{}", l + 1));
        }
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            for t in 0..self.t() {
                let mut rec = vec![
                    self.unit_labels[i].clone(),
                    self.time_labels[t].clone(),
                    format!("{}", self.y[(t, i)]),
                ];
                for m in &self.x {
                    rec.push(format!("{}", m[(t, i)]));
                }
                for m in &self.z {
                    rec.push(format!("{}", m[(t, i)]));
                }
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn sorted_labels<I: Iterator<Item = String>>(iter: I) -> Vec<String> {
    let mut labels: Vec<String> = iter.collect();
    labels.sort();
    labels.dedup();
    if labels.iter().all(|s| s.parse::<i64>().is_ok()) {
        labels.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    labels
}

/// Subtracts each column's mean (per-unit mean over time).
fn demean_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mean = m.column(j).mean();
        for i in 0..m.nrows() {
            m[(i, j)] -= mean;
        }
    }
}

/// Subtracts each row's mean (per-period mean over units).
fn demean_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let mean = m.row(i).mean();
        for j in 0..m.ncols() {
            m[(i, j)] -= mean;
        }
    }
}
