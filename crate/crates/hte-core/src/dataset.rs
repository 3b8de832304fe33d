//! Sample container and CSV ingestion.
//!
//! A [`Dataset`] holds one i.i.d. sample {Y_i, Z_i, W_i, X_i}: outcome vector,
//! treatment matrix (n×p), instrument matrix (n×q) and a scalar covariate,
//! plus the index k of the instrument coordinate the tests center on.
//! Construction validates shapes and rejects non-finite entries, so every
//! downstream routine can assume complete, finite data.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    x: DVector<f64>,
    k: usize,
}

impl Dataset {
    /// Validating constructor. `k` is the 0-based column of `w` used by the
    /// test statistic.
    pub fn new(
        y: DVector<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        x: DVector<f64>,
        k: usize,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Invalid("empty sample".into()));
        }
        if z.nrows() != n || w.nrows() != n || x.len() != n {
            return Err(Error::Invalid(format!(
                "row count mismatch: y has {n}, z has {}, w has {}, x has {}",
                z.nrows(),
                w.nrows(),
                x.len()
            )));
        }
        if z.ncols() == 0 || w.ncols() == 0 {
            return Err(Error::Invalid("z and w need at least one column".into()));
        }
        if k >= w.ncols() {
            return Err(Error::Config(format!(
                "instrument index k={} out of range for q={} instrument columns",
                k,
                w.ncols()
            )));
        }
        for (name, finite) in [
            ("y", y.iter().all(|v| v.is_finite())),
            ("z", z.iter().all(|v| v.is_finite())),
            ("w", w.iter().all(|v| v.is_finite())),
            ("x", x.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::Invalid(format!("non-finite entry in {name}")));
            }
        }
        Ok(Self { y, z, w, x, k })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.z.ncols()
    }
    pub fn q(&self) -> usize {
        self.w.ncols()
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    /// Pairwise resample: row `r` of the output is row `indices[r]` of the
    /// input for all four components jointly. Bootstrap semantics, so the
    /// index list must have exactly n entries.
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.len() != self.n() {
            return Err(Error::Invalid(format!(
                "resample needs {} indices, got {}",
                self.n(),
                indices.len()
            )));
        }
        self.subset(indices)
    }

    /// Row gather of arbitrary length (batching, blocking). Rows still move
    /// jointly across all four components.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.n();
        if indices.is_empty() {
            return Err(Error::Invalid("subset needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!(
                "subset index {bad} out of range for n={n}"
            )));
        }
        let m = indices.len();
        let gather_vec = |v: &DVector<f64>| {
            DVector::from_iterator(m, indices.iter().map(|&i| v[i]))
        };
        let gather_mat = |mat: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(m, mat.ncols());
            for c in 0..mat.ncols() {
                let src = mat.column(c);
                let mut dst = out.column_mut(c);
                for (r, &i) in indices.iter().enumerate() {
                    dst[r] = src[i];
                }
            }
            out
        };
        Ok(Dataset {
            y: gather_vec(&self.y),
            z: gather_mat(&self.z),
            w: gather_mat(&self.w),
            x: gather_vec(&self.x),
            k: self.k,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Outcome,
    Treatment,
    Instrument,
    Covariate,
}

/// One CSV column mapping. `intercept` set on a treatment (resp. instrument)
/// column asks the loader to prepend a column of ones to z (resp. w).
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub role: ColumnRole,
    pub name: String,
    pub intercept: bool,
}

impl ColumnSpec {
    pub fn new(role: ColumnRole, name: impl Into<String>) -> Self {
        Self {
            role,
            name: name.into(),
            intercept: false,
        }
    }

    pub fn with_intercept(mut self) -> Self {
        self.intercept = true;
        self
    }
}

/// Reads a headered CSV into a [`Dataset`].
///
/// `k` selects the instrument coordinate by its 1-based position among the
/// instrument columns *as listed in `spec`*; when an instrument intercept is
/// requested, the ones column is prepended and `k` keeps referring to the
/// named columns.
pub fn load_csv(path: impl AsRef<Path>, spec: &[ColumnSpec], k: usize) -> Result<Dataset> {
    let outcomes: Vec<&ColumnSpec> = spec.iter().filter(|s| s.role == ColumnRole::Outcome).collect();
    let covariates: Vec<&ColumnSpec> = spec.iter().filter(|s| s.role == ColumnRole::Covariate).collect();
    let treatments: Vec<&ColumnSpec> = spec.iter().filter(|s| s.role == ColumnRole::Treatment).collect();
    let instruments: Vec<&ColumnSpec> = spec.iter().filter(|s| s.role == ColumnRole::Instrument).collect();
    if outcomes.len() != 1 || covariates.len() != 1 {
        return Err(Error::Config(format!(
            "need exactly one outcome and one covariate column, got {} and {}",
            outcomes.len(),
            covariates.len()
        )));
    }
    if treatments.is_empty() || instruments.is_empty() {
        return Err(Error::Config(
            "need at least one treatment and one instrument column".into(),
        ));
    }
    if k == 0 || k > instruments.len() {
        return Err(Error::Config(format!(
            "k={} is not among the {} instrument columns",
            k,
            instruments.len()
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };

    let mut wanted: Vec<(usize, &ColumnSpec)> = Vec::with_capacity(spec.len());
    for s in spec {
        wanted.push((col_index(&s.name)?, s));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row_num, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("malformed CSV record: {e}")))?;
        for (slot, (idx, s)) in wanted.iter().enumerate() {
            let raw = record.get(*idx).ok_or_else(|| Error::Parse {
                row: row_num + 1,
                column: s.name.clone(),
                detail: "row is shorter than the header".into(),
            })?;
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row: row_num + 1,
                column: s.name.clone(),
                detail: format!("'{raw}' is not a real number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_num + 1,
                    column: s.name.clone(),
                    detail: format!("non-finite value '{raw}'"),
                });
            }
            columns[slot].push(value);
        }
    }
    let n = columns.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Invalid("CSV has no data rows".into()));
    }

    let take = |role: ColumnRole| -> Vec<Vec<f64>> {
        wanted
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.role == role)
            .map(|(slot, _)| columns[slot].clone())
            .collect()
    };
    let assemble = |mut cols: Vec<Vec<f64>>, intercept: bool| -> DMatrix<f64> {
        if intercept {
            cols.insert(0, vec![1.0; n]);
        }
        DMatrix::from_columns(
            &cols
                .iter()
                .map(|c| DVector::from_column_slice(c))
                .collect::<Vec<_>>(),
        )
    };

    let z_intercept = treatments.iter().any(|s| s.intercept);
    let w_intercept = instruments.iter().any(|s| s.intercept);
    let y = DVector::from_vec(take(ColumnRole::Outcome).remove(0));
    let x = DVector::from_vec(take(ColumnRole::Covariate).remove(0));
    let z = assemble(take(ColumnRole::Treatment), z_intercept);
    let w = assemble(take(ColumnRole::Instrument), w_intercept);
    let k0 = if w_intercept { k } else { k - 1 };

    Dataset::new(y, z, w, x, k0)
}

/// Reads named columns from a headered CSV without imposing the dataset
/// roles. The diagnostics front end pulls its covariate/instrument pairs
/// through this.
pub fn load_columns(path: impl AsRef<Path>, names: &[String]) -> Result<Vec<Vec<f64>>> {
    if names.is_empty() {
        return Err(Error::Config("no columns requested".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let mut indices = Vec::with_capacity(names.len());
    for name in names {
        indices.push(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))?,
        );
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (row_num, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("malformed CSV record: {e}")))?;
        for (slot, (&idx, name)) in indices.iter().zip(names).enumerate() {
            let raw = record.get(idx).ok_or_else(|| Error::Parse {
                row: row_num + 1,
                column: name.clone(),
                detail: "row is shorter than the header".into(),
            })?;
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row: row_num + 1,
                column: name.clone(),
                detail: format!("'{raw}' is not a real number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_num + 1,
                    column: name.clone(),
                    detail: format!("non-finite value '{raw}'"),
                });
            }
            columns[slot].push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Invalid("CSV has no data rows".into()));
    }
    Ok(columns)
}
