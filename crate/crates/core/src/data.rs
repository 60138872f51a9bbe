//! Observed datasets: regression covariates `U`, proxy columns `X` (continuous
//! or categorical), the target `Y`, and optional ground-truth labels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One proxy column.
#[derive(Debug, Clone, PartialEq)]
pub enum XColumn {
    Continuous(Vec<f64>),
    /// Level indices in `[0, cardinality)`.
    Categorical { levels: Vec<usize>, cardinality: usize },
}

impl XColumn {
    pub fn len(&self) -> usize {
        match self {
            XColumn::Continuous(v) => v.len(),
            XColumn::Categorical { levels, .. } => levels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, XColumn::Continuous(_))
    }

    pub fn value(&self, i: usize) -> XValue {
        match self {
            XColumn::Continuous(v) => XValue::Real(v[i]),
            XColumn::Categorical { levels, .. } => XValue::Level(levels[i]),
        }
    }
}

/// A single proxy observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum XValue {
    Real(f64),
    Level(usize),
}

/// Mean/standard-deviation pair recorded when a continuous column is
/// standardized, so the transform can be replayed or inverted later.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Complete-case dataset. Rows with missing entries are dropped at ingestion,
/// so every column here is fully observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    u: DMatrix<f64>,
    x: Vec<XColumn>,
    y: Vec<f64>,
    true_z: Option<Vec<usize>>,
    x_standardization: Vec<Option<Standardization>>,
}

impl Dataset {
    pub fn new(
        u: DMatrix<f64>,
        x: Vec<XColumn>,
        y: Vec<f64>,
        true_z: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one record"));
        }
        if u.nrows() != n {
            return Err(Error::LengthMismatch { expected: n, got: u.nrows() });
        }
        if y.iter().any(|v| !v.is_finite()) || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("u and y must be finite"));
        }
        for (j, col) in x.iter().enumerate() {
            if col.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: col.len() });
            }
            match col {
                XColumn::Continuous(v) => {
                    if v.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid(format!("x column {j} has non-finite values")));
                    }
                }
                XColumn::Categorical { levels, cardinality } => {
                    if *cardinality == 0 {
                        return Err(Error::invalid(format!("x column {j} has zero cardinality")));
                    }
                    if let Some(&bad) = levels.iter().find(|&&l| l >= *cardinality) {
                        return Err(Error::InvalidLevel { level: bad, cardinality: *cardinality });
                    }
                }
            }
        }
        if let Some(z) = &true_z {
            if z.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: z.len() });
            }
        }
        let d_x = x.len();
        Ok(Dataset { u, x, y, true_z, x_standardization: vec![None; d_x] })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.x.len()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn u_row(&self, i: usize) -> Vec<f64> {
        (0..self.d_u()).map(|c| self.u[(i, c)]).collect()
    }

    pub fn x(&self) -> &[XColumn] {
        &self.x
    }

    pub fn x_column(&self, j: usize) -> &XColumn {
        &self.x[j]
    }

    pub fn x_value(&self, i: usize, j: usize) -> XValue {
        self.x[j].value(i)
    }

    /// Proxy row as values, in column order.
    pub fn x_row(&self, i: usize) -> Vec<XValue> {
        (0..self.d_x()).map(|j| self.x_value(i, j)).collect()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    pub fn true_z(&self) -> Option<&[usize]> {
        self.true_z.as_deref()
    }

    /// Indices of the continuous proxy columns.
    pub fn continuous_x_dims(&self) -> Vec<usize> {
        (0..self.d_x()).filter(|&j| self.x[j].is_continuous()).collect()
    }

    /// Indices of the categorical proxy columns.
    pub fn categorical_x_dims(&self) -> Vec<usize> {
        (0..self.d_x()).filter(|&j| !self.x[j].is_continuous()).collect()
    }

    /// Standardization applied to each x column (`None` for categorical or
    /// untouched columns).
    pub fn x_standardization(&self) -> &[Option<Standardization>] {
        &self.x_standardization
    }

    /// Returns a copy with every continuous x column centered and scaled to
    /// unit variance, recording the transforms. Constant columns are left
    /// centered with `sd = 1`.
    pub fn standardize_x(&self) -> Dataset {
        let mut out = self.clone();
        for (j, col) in out.x.iter_mut().enumerate() {
            if let XColumn::Continuous(v) = col {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
                for x in v.iter_mut() {
                    *x = (*x - mean) / sd;
                }
                out.x_standardization[j] = Some(Standardization { mean, sd });
            }
        }
        out
    }

    /// Applies previously recorded transforms to a raw proxy row (used when
    /// predicting on new records with a model fitted on standardized data).
    pub fn standardize_x_row(
        transforms: &[Option<Standardization>],
        row: &[XValue],
    ) -> Result<Vec<XValue>> {
        if transforms.len() != row.len() {
            return Err(Error::LengthMismatch { expected: transforms.len(), got: row.len() });
        }
        Ok(row
            .iter()
            .zip(transforms)
            .map(|(v, t)| match (v, t) {
                (XValue::Real(a), Some(t)) => XValue::Real(t.apply(*a)),
                _ => *v,
            })
            .collect())
    }

    /// Splits record indices into train/test with the given test fraction,
    /// after a seeded shuffle.
    pub fn split_indices(&self, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        assert!((0.0..1.0).contains(&test_fraction));
        let mut idx: Vec<usize> = (0..self.n()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_test = ((self.n() as f64) * test_fraction).round() as usize;
        let test = idx[..n_test].to_vec();
        let train = idx[n_test..].to_vec();
        (train, test)
    }

    /// Subset of records by index (keeps transforms metadata).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let u = DMatrix::from_fn(indices.len(), self.d_u(), |r, c| self.u[(indices[r], c)]);
        let x = self
            .x
            .iter()
            .map(|col| match col {
                XColumn::Continuous(v) => {
                    XColumn::Continuous(indices.iter().map(|&i| v[i]).collect())
                }
                XColumn::Categorical { levels, cardinality } => XColumn::Categorical {
                    levels: indices.iter().map(|&i| levels[i]).collect(),
                    cardinality: *cardinality,
                },
            })
            .collect();
        let y = indices.iter().map(|&i| self.y[i]).collect();
        let true_z = self.true_z.as_ref().map(|z| indices.iter().map(|&i| z[i]).collect());
        Dataset {
            u,
            x,
            y,
            true_z,
            x_standardization: self.x_standardization.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let u = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let x = vec![
            XColumn::Continuous(vec![1.0, 3.0, 5.0, 7.0]),
            XColumn::Categorical { levels: vec![0, 1, 1, 0], cardinality: 2 },
        ];
        Dataset::new(u, x, vec![0.5, 1.5, 2.5, 3.5], Some(vec![0, 0, 1, 1])).unwrap()
    }

    #[test]
    fn construction_checks_shapes_and_levels() {
        let u = DMatrix::zeros(3, 1);
        let bad_level = vec![XColumn::Categorical { levels: vec![0, 2, 1], cardinality: 2 }];
        assert!(matches!(
            Dataset::new(u.clone(), bad_level, vec![0.0; 3], None),
            Err(Error::InvalidLevel { level: 2, .. })
        ));
        let short = vec![XColumn::Continuous(vec![1.0, 2.0])];
        assert!(Dataset::new(u, short, vec![0.0; 3], None).is_err());
    }

    #[test]
    fn standardization_round_trip() {
        let data = toy().standardize_x();
        let col = match data.x_column(0) {
            XColumn::Continuous(v) => v.clone(),
            _ => unreachable!(),
        };
        let mean: f64 = col.iter().sum::<f64>() / 4.0;
        let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let t = data.x_standardization()[0].unwrap();
        assert!((t.invert(t.apply(5.0)) - 5.0).abs() < 1e-12);
        // Categorical columns are untouched.
        assert!(data.x_standardization()[1].is_none());
        assert_eq!(data.x_value(1, 1), XValue::Level(1));
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let data = toy();
        let (tr1, te1) = data.split_indices(0.25, 9);
        let (tr2, te2) = data.split_indices(0.25, 9);
        assert_eq!((tr1.clone(), te1.clone()), (tr2, te2));
        let mut all: Vec<usize> = tr1.iter().chain(te1.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(te1.len(), 1);
    }

    #[test]
    fn subset_keeps_alignment() {
        let data = toy();
        let sub = data.subset(&[2, 0]);
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.y()[0], 2.5);
        assert_eq!(sub.u()[(1, 0)], 0.0);
        assert_eq!(sub.true_z().unwrap(), &[1, 0]);
    }
}
