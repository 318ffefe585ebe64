use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted directed interaction matrix.  Entry `(i, j)` is the influence of
/// unit `j` on unit `i`; the diagonal is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    weights: DMatrix<f64>,
}

impl Network {
    /// Validates squareness, finiteness and an exactly-zero diagonal.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::Dimension(format!(
                "interaction matrix must be square, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("interaction matrix has non-finite entries".into()));
        }
        for i in 0..weights.nrows() {
            if weights[(i, i)] != 0.0 {
                return Err(Error::Invalid(format!(
                    "interaction matrix must have a zero diagonal, entry ({i}, {i}) = {}",
                    weights[(i, i)]
                )));
            }
        }
        Ok(Network { weights })
    }

    /// Empty network on `n` units.
    pub fn empty(n: usize) -> Self {
        Network { weights: DMatrix::zeros(n, n) }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn into_weights(self) -> DMatrix<f64> {
        self.weights
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.weights.row(i).sum()).collect()
    }

    pub fn is_nonneg(&self) -> bool {
        self.weights.iter().all(|&v| v >= 0.0)
    }

    /// True when every non-isolated row sums to one within `tol`.  Rows whose
    /// entries are all below `zero_tol` in absolute value count as isolated.
    pub fn is_row_normalized(&self, tol: f64, zero_tol: f64) -> bool {
        (0..self.n()).all(|i| {
            let row = self.weights.row(i);
            let isolated = row.iter().all(|v| v.abs() <= zero_tol);
            isolated || (row.sum() - 1.0).abs() <= tol
        })
    }

    /// Count of off-diagonal entries above `zero_tol` in absolute value.
    pub fn edge_count(&self, zero_tol: f64) -> usize {
        let mut count = 0;
        for i in 0..self.n() {
            for j in 0..self.n() {
                if i != j && self.weights[(i, j)].abs() > zero_tol {
                    count += 1;
                }
            }
        }
        count
    }

    /// Reads an edge list in `from,to,weight` format.  Node ids may be 0-based
    /// integers (the matrix dimension is then `max id + 1`) or arbitrary
    /// labels (ordered by sorted label).  Pairs not listed are zero; duplicate
    /// pairs and self-loops are rejected.
    pub fn from_edge_list<R: Read>(reader: R) -> Result<(Self, Vec<String>)> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        {
            let headers = rdr.headers()?;
            let expect = ["from", "to", "weight"];
            let got: Vec<&str> = headers.iter().collect();
            if got != expect {
                return Err(Error::Invalid(format!(
                    "edge list header must be 'from,to,weight', got '{}'",
                    got.join(",")
                )));
            }
        }
        let mut rows: Vec<(String, String, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Invalid(format!(
                    "edge list row {} has {} fields, expected 3",
                    rows.len() + 2,
                    rec.len()
                )));
            }
            let w: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad weight '{}' in edge list", &rec[2])))?;
            if !w.is_finite() {
                return Err(Error::Invalid(format!("non-finite weight '{}' in edge list", &rec[2])));
            }
            rows.push((rec[0].to_string(), rec[1].to_string(), w));
        }
        let all_numeric = rows
            .iter()
            .flat_map(|(f, t, _)| [f, t])
            .all(|s| s.parse::<usize>().is_ok());
        let labels: Vec<String> = if all_numeric {
            let max_id = rows
                .iter()
                .flat_map(|(f, t, _)| [f.parse::<usize>().unwrap(), t.parse::<usize>().unwrap()])
                .max()
                .ok_or_else(|| Error::Invalid("edge list has no rows".into()))?;
            (0..=max_id).map(|i| i.to_string()).collect()
        } else {
            let mut ls: Vec<String> =
                rows.iter().flat_map(|(f, t, _)| [f.clone(), t.clone()]).collect();
            ls.sort();
            ls.dedup();
            ls
        };
        let index: HashMap<&str, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let n = labels.len();
        let mut weights = DMatrix::zeros(n, n);
        let mut seen = vec![false; n * n];
        for (f, t, w) in &rows {
            let i = index[f.as_str()];
            let j = index[t.as_str()];
            if seen[i * n + j] {
                return Err(Error::Invalid(format!("duplicate edge ({f}, {t}) in edge list")));
            }
            seen[i * n + j] = true;
            if i == j {
                // A zero-weight self-record declares an isolated node so it
                // survives the round trip; actual self-loops are rejected.
                if *w != 0.0 {
                    return Err(Error::Invalid(format!("edge list contains self-loop on '{f}'")));
                }
                continue;
            }
            // Edge from -> to means "from" influences "to": row = to, col = from.
            weights[(j, i)] = *w;
        }
        Ok((Network::new(weights)?, labels))
    }

    pub fn from_edge_list_path<P: AsRef<Path>>(path: P) -> Result<(Self, Vec<String>)> {
        let file = std::fs::File::open(path)?;
        Self::from_edge_list(file)
    }

    /// Writes the nonzero off-diagonal entries as a `from,to,weight` edge list.
    pub fn write_edge_list<W: Write>(&self, labels: Option<&[String]>, out: W) -> Result<()> {
        if let Some(ls) = labels {
            if ls.len() != self.n() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} units",
                    ls.len(),
                    self.n()
                )));
            }
        }
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["from", "to", "weight"])?;
        let name = |i: usize| labels.map(|ls| ls[i].clone()).unwrap_or_else(|| i.to_string());
        for i in 0..self.n() {
            for j in 0..self.n() {
                if i != j && self.weights[(i, j)] != 0.0 {
                    // Entry (i, j): j influences i, so the edge runs j -> i.
                    wtr.write_record([name(j), name(i), format!("{}", self.weights[(i, j)])])?;
                }
            }
        }
        // Nodes with no links at all are declared with a zero self-record,
        // otherwise the reader could not know they exist.
        for i in 0..self.n() {
            let isolated = (0..self.n())
                .all(|j| self.weights[(i, j)] == 0.0 && self.weights[(j, i)] == 0.0);
            if isolated {
                wtr.write_record([name(i), name(i), "0".into()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = (0..self.n())
            .map(|i| self.weights.row(i).iter().copied().collect())
            .collect();
        NetworkRepr { n: self.n(), rows }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NetworkRepr::deserialize(d)?;
        if repr.rows.len() != repr.n || repr.rows.iter().any(|r| r.len() != repr.n) {
            return Err(serde::de::Error::custom("network rows do not match declared size"));
        }
        let weights = DMatrix::from_fn(repr.n, repr.n, |i, j| repr.rows[i][j]);
        Network::new(weights).map_err(serde::de::Error::custom)
    }
}
