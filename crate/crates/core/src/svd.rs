//! Reference projection through a thin SVD.
//!
//! Solves `min ½‖u − g‖²  s.t.  Gᵀu = 0` as `u = (I − U_r U_rᵀ) g`, where `U_r`
//! holds the left singular vectors of the column matrix `G`. The decomposition
//! is one-sided (Hestenes) Jacobi and shares no code with [`crate::subspace`],
//! so it serves as an independent check of the Gram-Schmidt projector. Meant
//! for small matrices (ambient dimension up to a few dozen).

use crate::error::{Error, Result};
use crate::subspace::{axpy, dot, norm, ParamVector};

/// Singular values below `SVD_CUTOFF * σ_max` count as zero.
pub const SVD_CUTOFF: f64 = 1e-10;

const MAX_SWEEPS: usize = 60;

/// Thin SVD of `G` (given as columns): returns left singular vectors and the
/// matching singular values, sorted descending. Zero singular values are kept.
pub fn thin_svd(cols: &[ParamVector]) -> Result<(Vec<ParamVector>, Vec<f64>)> {
    let Some(first) = cols.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let d = first.dim();
    for c in cols {
        c.check_dim(d)?;
    }
    let mut a: Vec<Vec<f64>> = cols.iter().map(|c| c.to_vec()).collect();
    let k = a.len();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                let (ap, aq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = a
        .into_iter()
        .map(|col| {
            let s = norm(&col);
            (s, col)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let sigma_max = pairs.first().map_or(0.0, |p| p.0);

    let mut u = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for (s, mut col) in pairs {
        if s > 0.0 && s > SVD_CUTOFF * sigma_max {
            col.iter_mut().for_each(|x| *x /= s);
        } else {
            col.iter_mut().for_each(|x| *x = 0.0);
        }
        u.push(ParamVector::new(col));
        sigma.push(s);
    }
    Ok((u, sigma))
}

/// `(I − U_r U_rᵀ) g` with `r` the numerical rank of `G`.
pub fn svd_projection_oracle(cols: &[ParamVector], g: &[f64]) -> Result<ParamVector> {
    if let Some(first) = cols.first() {
        if first.dim() != g.len() {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                found: g.len(),
            });
        }
    }
    let (u, sigma) = thin_svd(cols)?;
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let mut out = g.to_vec();
    for (ui, s) in u.iter().zip(&sigma) {
        if *s > 0.0 && *s > SVD_CUTOFF * sigma_max {
            axpy(&mut out, -dot(ui, g), ui);
        }
    }
    Ok(ParamVector::new(out))
}

/// Numerical rank under the [`SVD_CUTOFF`] convention.
pub fn numerical_rank(cols: &[ParamVector]) -> Result<usize> {
    let (_, sigma) = thin_svd(cols)?;
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    Ok(sigma
        .iter()
        .filter(|&&s| s > 0.0 && s > SVD_CUTOFF * sigma_max)
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v)
    }

    #[test]
    fn oracle_examples() {
        let out = svd_projection_oracle(&[pv(&[1.0, 0.0])], &[2.0, 3.0]).unwrap();
        assert!((out[0]).abs() < 1e-15 && (out[1] - 3.0).abs() < 1e-15);

        let out = svd_projection_oracle(&[pv(&[1.0, 0.0]), pv(&[2.0, 0.0])], &[1.0, 1.0]).unwrap();
        assert!(out[0].abs() < 1e-14 && (out[1] - 1.0).abs() < 1e-14);

        let out = svd_projection_oracle(&[], &[5.0]).unwrap();
        assert_eq!(out.as_slice(), &[5.0]);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let (_, s) = thin_svd(&[pv(&[3.0, 0.0, 0.0]), pv(&[0.0, 4.0, 0.0])]).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-14 && (s[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rank_of_dependent_columns() {
        let cols = [
            pv(&[1.0, 2.0, 3.0]),
            pv(&[2.0, 4.0, 6.0]),
            pv(&[0.0, 1.0, 0.0]),
        ];
        assert_eq!(numerical_rank(&cols).unwrap(), 2);
    }

    #[test]
    fn mismatch() {
        assert!(svd_projection_oracle(&[pv(&[1.0, 0.0])], &[1.0]).is_err());
        assert!(thin_svd(&[pv(&[1.0, 0.0]), pv(&[1.0])]).is_err());
    }
}
