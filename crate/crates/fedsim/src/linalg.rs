//! Small dense-matrix and vector-geometry helpers.
//!
//! Everything here is plain `f64` with row-major storage. The simulator is
//! desk-scale, so clarity wins over cache tricks.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch(format!(
                    "ragged rows: expected width {c}, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn l2_norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
///
/// Zero-norm inputs are rejected rather than mapped to zero; a zero vector
/// here almost always means an initialization or bookkeeping bug upstream.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u, v)?;
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity lhs".into()));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity rhs".into()));
    }
    let d = dot(u, v)?;
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_len(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Coordinate-wise mean of equally sized vectors.
pub fn mean_vector(vs: &[&[f64]]) -> Vec<f64> {
    let n = vs.len();
    assert!(n > 0, "mean_vector on empty set");
    let len = vs[0].len();
    let mut out = vec![0.0; len];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divisor `n`).
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_self_is_one() {
        let u = [1.0, -2.5, 3.0];
        assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_closed_form() {
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn l2_basics() {
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let u = [1.0, 2.0];
        assert_eq!(l2_distance(&u, &u).unwrap(), 0.0);
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn polarization_identity() {
        // ||u-v||^2 == ||u||^2 + ||v||^2 - 2<u,v>
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let u: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lhs = l2_distance(&u, &v).unwrap().powi(2);
            let rhs = l2_norm(&u).powi(2) + l2_norm(&v).powi(2) - 2.0 * dot(&u, &v).unwrap();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
