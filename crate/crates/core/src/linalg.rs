//! Thin SVD with a deterministic ordering of singular triples.

use faer::Mat;

use crate::error::{DotaError, Result};
use crate::tensor::DenseTensor;

/// `a = u · diag(s) · vt` with `s` sorted descending.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    /// `[m, k]`, orthonormal columns.
    pub u: DenseTensor<f64>,
    /// Length `k = min(m, n)`.
    pub s: Vec<f64>,
    /// `[k, n]`, orthonormal rows.
    pub vt: DenseTensor<f64>,
}

impl ThinSvd {
    /// Keeps the leading `rank` triples.
    pub fn truncate(&self, rank: usize) -> Result<ThinSvd> {
        let (m, k) = self.u.dims2()?;
        let (_, n) = self.vt.dims2()?;
        let r = rank.min(k);
        let u: Vec<f64> = (0..m)
            .flat_map(|i| self.u.data()[i * k..i * k + r].iter().copied())
            .collect();
        Ok(ThinSvd {
            u: DenseTensor::matrix(m, r, u)?,
            s: self.s[..r].to_vec(),
            vt: DenseTensor::matrix(r, n, self.vt.data()[..r * n].to_vec())?,
        })
    }
}

/// Computes the thin SVD of a matrix.
///
/// Singular values come back in descending order. The backend runs
/// single-threaded, so the result is bitwise reproducible.
pub fn thin_svd(a: &DenseTensor<f64>) -> Result<ThinSvd> {
    let (m, n) = a.dims2()?;
    if !a.is_finite() {
        return Err(DotaError::Numeric("SVD input contains non-finite values".into()));
    }
    let data = a.data();
    let mat = Mat::<f64>::from_fn(m, n, |i, j| data[i * n + j]);
    let svd = mat
        .thin_svd()
        .map_err(|e| DotaError::Numeric(format!("SVD of {m}x{n} matrix failed: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sv = svd.S().column_vector();
    let k = m.min(n);
    let mut order: Vec<usize> = (0..k).collect();
    // backend order is already non-increasing; the stable sort pins ties
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));

    let mut ud = Vec::with_capacity(m * k);
    for i in 0..m {
        ud.extend(order.iter().map(|&c| u[(i, c)]));
    }
    let mut vd = Vec::with_capacity(k * n);
    for &r in &order {
        vd.extend((0..n).map(|j| v[(j, r)]));
    }
    Ok(ThinSvd {
        u: DenseTensor::matrix(m, k, ud)?,
        s: order.iter().map(|&i| sv[i]).collect(),
        vt: DenseTensor::matrix(k, n, vd)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rebuild(svd: &ThinSvd) -> DenseTensor<f64> {
        let (m, k) = svd.u.dims2().unwrap();
        let mut us = svd.u.clone();
        for i in 0..m {
            for c in 0..k {
                us.data_mut()[i * k + c] *= svd.s[c];
            }
        }
        matmul(&us, &svd.vt).unwrap()
    }

    #[test]
    fn reconstructs_tall_and_wide() {
        for (m, n) in [(7, 3), (3, 7), (16, 16), (16, 256)] {
            let a = random(m, n, (m * 31 + n) as u64);
            let svd = thin_svd(&a).unwrap();
            assert_eq!(svd.s.len(), m.min(n));
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(relative_error(&rebuild(&svd), &a).unwrap() < 1e-13);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = random(3, 3, 1);
        a.data_mut()[4] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(DotaError::Numeric(_))));
    }

    #[test]
    fn truncate_keeps_leading() {
        let a = random(6, 5, 2);
        let svd = thin_svd(&a).unwrap();
        let t = svd.truncate(2).unwrap();
        assert_eq!(t.u.shape(), &[6, 2]);
        assert_eq!(t.vt.shape(), &[2, 5]);
        assert_eq!(t.s, svd.s[..2]);
    }
}
