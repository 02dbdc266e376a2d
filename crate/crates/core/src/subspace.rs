//! Dense vector math and orthonormal subspace maintenance.
//!
//! [`OrthoBasis`] keeps an orthonormal set of columns `Q` so that the projector
//! onto the stored span is `Q Qᵀ`. Columns are added one at a time with
//! Gram-Schmidt and a second re-orthogonalization pass, which keeps the columns
//! orthogonal to working precision well past rank 50.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero when a direction is required.
pub const ZERO_NORM: f64 = 1e-12;

/// Default residual-ratio tolerance for [`OrthoBasis::insert`].
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Flat parameter or gradient storage for one layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        ParamVector(data)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| x * factor).collect())
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl From<&[f64]> for ParamVector {
    fn from(v: &[f64]) -> Self {
        ParamVector(v.to_vec())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Fails with [`Error::ZeroVector`] when either norm is at most [`ZERO_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Largest positive part of `-gᵀu` over `dirs`; zero when `dirs` is empty.
pub fn interference_risk(u: &[f64], dirs: &[ParamVector]) -> Result<f64> {
    let mut risk = 0.0f64;
    for g in dirs {
        g.check_dim(u.len())?;
        risk = risk.max(-dot(g, u));
    }
    Ok(risk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// The vector already lies in the span, up to the tolerance.
    Rejected,
}

/// Orthonormal basis `Q` of a subspace of `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    columns: Vec<ParamVector>,
}

impl OrthoBasis {
    pub fn new(dim: usize) -> Self {
        OrthoBasis {
            dim,
            columns: Vec::new(),
        }
    }

    /// Builds a basis for the span of `vectors`, skipping those already represented.
    pub fn from_vectors<'a, I>(dim: usize, vectors: I, tol: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut basis = OrthoBasis::new(dim);
        for v in vectors {
            match basis.insert(v, tol) {
                Ok(_) | Err(Error::ZeroVector) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[ParamVector] {
        &self.columns
    }

    pub fn clear(&mut self) {
        self.columns.clear();
    }

    /// Appends the normalized component of `g` orthogonal to the current span
    /// when `‖residual‖ / ‖g‖ > tol`.
    pub fn insert(&mut self, g: &[f64], tol: f64) -> Result<InsertOutcome> {
        self.check(g)?;
        let g_norm = norm(g);
        if g_norm <= ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        if self.rank() == self.dim {
            return Ok(InsertOutcome::Rejected);
        }
        let mut residual = g.to_vec();
        // twice is enough
        self.subtract_components(&mut residual);
        self.subtract_components(&mut residual);
        let r_norm = norm(&residual);
        if r_norm / g_norm <= tol {
            return Ok(InsertOutcome::Rejected);
        }
        residual.iter_mut().for_each(|x| *x /= r_norm);
        self.columns.push(ParamVector(residual));
        Ok(InsertOutcome::Inserted)
    }

    /// `g - Q Qᵀ g`: the component of `g` orthogonal to the span.
    pub fn project_out(&self, g: &[f64]) -> Result<ParamVector> {
        self.check(g)?;
        let mut out = g.to_vec();
        self.subtract_components(&mut out);
        Ok(ParamVector(out))
    }

    /// `Q Qᵀ g`: the component of `g` inside the span.
    pub fn project_onto(&self, g: &[f64]) -> Result<ParamVector> {
        self.check(g)?;
        let mut out = vec![0.0; self.dim];
        for q in &self.columns {
            axpy(&mut out, dot(q, g), q);
        }
        Ok(ParamVector(out))
    }

    fn subtract_components(&self, v: &mut [f64]) {
        for q in &self.columns {
            let c = dot(q, v);
            axpy(v, -c, q);
        }
    }

    fn check(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: g.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(dim: usize, i: usize) -> ParamVector {
        let mut v = ParamVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    fn basis_of(dim: usize, cols: &[usize]) -> OrthoBasis {
        let mut b = OrthoBasis::new(dim);
        for &c in cols {
            b.insert(&e(dim, c), DEFAULT_RANK_TOL).unwrap();
        }
        b
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1e-13, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [0.1, 0.2, 0.3];
        let c = cosine(&a, &a).unwrap();
        assert!(c <= 1.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!(cosine(&a, &neg).unwrap() >= -1.0);
    }

    #[test]
    fn insert_examples() {
        let mut b = basis_of(2, &[0]);
        assert_eq!(
            b.insert(&e(2, 0), DEFAULT_RANK_TOL).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(b.rank(), 1);

        let mut b = OrthoBasis::new(3);
        assert_eq!(
            b.insert(&[3.0, 0.0, 0.0], DEFAULT_RANK_TOL).unwrap(),
            InsertOutcome::Inserted
        );
        assert_eq!(b.columns()[0].as_slice(), &[1.0, 0.0, 0.0]);

        let mut b = basis_of(3, &[0]);
        assert_eq!(
            b.insert(&[1.0, 1.0, 0.0], 1e-6).unwrap(),
            InsertOutcome::Inserted
        );
        assert_eq!(b.columns()[1].as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn insert_errors() {
        let mut b = OrthoBasis::new(3);
        assert!(matches!(b.insert(&[0.0; 3], 1e-6), Err(Error::ZeroVector)));
        assert!(matches!(
            b.insert(&[1.0, 0.0], 1e-6),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn full_rank_basis_rejects_everything() {
        let mut b = basis_of(2, &[0, 1]);
        assert_eq!(
            b.insert(&[0.3, -2.0], 1e-6).unwrap(),
            InsertOutcome::Rejected
        );
    }

    #[test]
    fn project_out_examples() {
        let empty = OrthoBasis::new(2);
        assert_eq!(
            empty.project_out(&[2.0, 3.0]).unwrap().as_slice(),
            &[2.0, 3.0]
        );
        let b = basis_of(2, &[0]);
        assert_eq!(b.project_out(&[2.0, 3.0]).unwrap().as_slice(), &[0.0, 3.0]);
        let b = basis_of(3, &[0, 1]);
        assert_eq!(
            b.project_out(&[1.0, 1.0, 1.0]).unwrap().as_slice(),
            &[0.0, 0.0, 1.0]
        );
        assert!(b.project_out(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn risk_examples() {
        assert_eq!(interference_risk(&[1.0, 0.0], &[e(2, 0)]).unwrap(), 0.0);
        assert_eq!(
            interference_risk(&[1.0, 0.0], &[ParamVector::new(vec![-1.0, 0.0])]).unwrap(),
            1.0
        );
        let u = basis_of(2, &[0]).project_out(&[1.0, 1.0]).unwrap();
        assert_eq!(interference_risk(&u, &[e(2, 0)]).unwrap(), 0.0);
        assert_eq!(interference_risk(&u, &[]).unwrap(), 0.0);
        assert!(interference_risk(&u, &[e(3, 0)]).is_err());
    }

    #[test]
    fn from_vectors_skips_zero_and_duplicates() {
        let vs = vec![e(3, 0), ParamVector::zeros(3), e(3, 0).scaled(2.0), e(3, 2)];
        let b = OrthoBasis::from_vectors(3, &vs, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(b.rank(), 2);
    }
}
