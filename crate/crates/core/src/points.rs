//! Dense row-major point sets.

use faer::Mat;

use crate::error::{Error, Result};

/// An `n × d` collection of points stored row-major, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl Points {
    pub fn new(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Input(format!(
                "buffer of length {} cannot hold {n}x{d} points",
                data.len()
            )));
        }
        Ok(Self { data, n, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Input(format!(
                    "row {i} has {} columns, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { data, n: rows.len(), d })
    }

    /// One-dimensional points from a slice of scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self { data: values.to_vec(), n: values.len(), d: 1 }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self { data: vec![0.0; n * d], n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let d = self.d.max(1);
        self.data.chunks_exact(d).take(if self.d == 0 { 0 } else { self.n })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Subset of rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { data, n: idx.len(), d: self.d }
    }

    /// Per-coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.n.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance (denominator `n - 1`).
    pub fn sample_covariance(&self) -> Result<Mat<f64>> {
        if self.n < 2 {
            return Err(Error::InsufficientData { got: self.n, need: 2 });
        }
        let mean = self.mean();
        let mut cov = Mat::<f64>::zeros(self.d, self.d);
        for r in self.rows() {
            for a in 0..self.d {
                let da = r[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += da * (r[b] - mean[b]);
                }
            }
        }
        let denom = (self.n - 1) as f64;
        for a in 0..self.d {
            for b in 0..=a {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        Ok(cov)
    }

    pub fn to_mat(&self) -> Mat<f64> {
        Mat::from_fn(self.n, self.d, |i, j| self.get(i, j))
    }

    pub fn from_mat(m: &Mat<f64>) -> Self {
        let (n, d) = (m.nrows(), m.ncols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(m[(i, j)]);
            }
        }
        Self { data, n, d }
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::dim_mismatch(d, self.d));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_uses_unbiased_denominator() {
        let p = Points::from_scalars(&[-1.0, 1.0]);
        let c = p.sample_covariance().unwrap();
        assert_eq!(c[(0, 0)], 2.0);
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Points::from_rows(&rows).is_err());
    }

    #[test]
    fn select_keeps_order() {
        let p = Points::from_scalars(&[10.0, 20.0, 30.0]);
        assert_eq!(p.select(&[2, 0]).as_slice(), &[30.0, 10.0]);
    }
}
