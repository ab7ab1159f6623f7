use std::path::Path;

use super::MetricsError;

/// Tolerance for the symmetry and unit-diagonal checks.
pub const SIMILARITY_TOL: f64 = 1e-9;

/// Symmetric `n x n` similarity matrix with unit diagonal, indexed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self, MetricsError> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(MetricsError::Invalid(format!("{} values for {n} ids", values.len())));
        }
        for i in 0..n {
            if (values[i * n + i] - 1.0).abs() > SIMILARITY_TOL {
                return Err(MetricsError::Invalid(format!("diagonal entry {i} is {}", values[i * n + i])));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(-1.0 - SIMILARITY_TOL..=1.0 + SIMILARITY_TOL).contains(&v) {
                    return Err(MetricsError::Invalid(format!("entry ({i}, {j}) = {v}")));
                }
                if (v - values[j * n + i]).abs() > SIMILARITY_TOL {
                    return Err(MetricsError::Invalid(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ids.len() + j]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Submatrix over `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Self, MetricsError> {
        let idx = ids
            .iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| MetricsError::Mismatch(format!("unknown sample id {id:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let values = idx
            .iter()
            .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        Ok(Self {
            ids: ids.to_vec(),
            values,
        })
    }

    /// CSV with a header row `id,<id_1>,...,<id_n>` followed by one row per
    /// sample. Values use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.ids.len() {
                out.push(',');
                out.push_str(&self.get(i, j).to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MetricsError::Format("empty file".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("id") {
            return Err(MetricsError::Format("header must start with \"id\"".into()));
        }
        let ids: Vec<String> = cols.map(str::to_string).collect();
        let n = ids.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            if fields.next() != Some(ids.get(i).map_or("", String::as_str)) {
                return Err(MetricsError::Format(format!("row {i} does not match the header order")));
            }
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|_| MetricsError::Format(format!("bad value {f:?} in row {i}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != n {
                return Err(MetricsError::Format(format!("row {i} has {} values, expected {n}", row.len())));
            }
            values.extend(row);
        }
        if values.len() != n * n {
            return Err(MetricsError::Format(format!("{} rows, expected {n}", values.len() / n.max(1))));
        }
        Self::new(ids, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
