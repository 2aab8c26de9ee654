//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's decomposition or gradient code.
#![allow(dead_code)]

use dota::{CoreChain, DenseTensor, DotaAdapter, MpoShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn seeded(rows: usize, cols: usize, seed: u64) -> DenseTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DenseTensor::matrix(rows, cols, data).unwrap()
}

pub fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Singular values (descending) by one-sided Jacobi rotations on columns.
pub fn jacobi_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // work on the orientation with at least as many rows as columns
    let mut cols_data: Vec<Vec<f64>> = if rows >= cols {
        (0..cols).map(|j| (0..rows).map(|i| a[i * cols + j]).collect()).collect()
    } else {
        (0..rows).map(|i| a[i * cols..(i + 1) * cols].to_vec()).collect()
    };
    let n = cols_data.len();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols_data[p], &cols_data[q]);
                    (
                        cp.iter().map(|x| x * x).sum::<f64>(),
                        cq.iter().map(|x| x * x).sum::<f64>(),
                        cp.iter().zip(cq).map(|(x, y)| x * y).sum::<f64>(),
                    )
                };
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols_data.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols_data.iter().map(|c| frob(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Frobenius error of the best rank-`r` approximation.
pub fn best_rank_error(sv: &[f64], r: usize) -> f64 {
    sv.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

/// `M[(i1, j1), (i2, j2)] = W[i1·I2 + i2, j1·J2 + j2]` for a two-core shape.
pub fn reorder_two_site(w: &DenseTensor<f64>, i: [usize; 2], j: [usize; 2]) -> Vec<f64> {
    let cols = i[1] * j[1];
    let mut m = vec![0.0; i[0] * j[0] * cols];
    for i1 in 0..i[0] {
        for j1 in 0..j[0] {
            for i2 in 0..i[1] {
                for j2 in 0..j[1] {
                    m[(i1 * j[0] + j1) * cols + i2 * j[1] + j2] = w.get(&[i1 * i[1] + i2, j1 * j[1] + j2]).unwrap();
                }
            }
        }
    }
    m
}

fn digits(mut x: usize, radix: &[usize]) -> Vec<usize> {
    let mut d = vec![0; radix.len()];
    for k in (0..radix.len()).rev() {
        d[k] = x % radix[k];
        x /= radix[k];
    }
    d
}

/// Entry-by-entry contraction of a core chain: for every `(row, col)` sums
/// the product of core entries over all bond-index paths.
pub fn brute_force_matrix(chain: &CoreChain<f64>, shape: &MpoShape) -> Vec<f64> {
    let (fi, fo) = (shape.in_factors(), shape.out_factors());
    let (rows, cols) = (shape.rows(), shape.cols());
    let cores = chain.cores();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let ir = digits(r, fi);
        for c in 0..cols {
            let jc = digits(c, fo);
            // vector over the current bond index
            let mut v = vec![1.0];
            for (k, core) in cores.iter().enumerate() {
                let s = core.shape();
                let mut next = vec![0.0; s[3]];
                for (a, va) in v.iter().enumerate() {
                    for (b, nb) in next.iter_mut().enumerate() {
                        *nb += va * core.get(&[a, ir[k], jc[k], b]).unwrap();
                    }
                }
                v = next;
            }
            out[r * cols + c] = v[0];
        }
    }
    out
}

/// `0.5 · ‖forward(x) − target‖²`, accumulated in f64.
pub fn half_sq_loss(adapter: &DotaAdapter<f64>, x: &DenseTensor<f64>, target: &DenseTensor<f64>) -> f64 {
    let y = adapter.forward(x).unwrap();
    0.5 * y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

/// Central finite differences of [`half_sq_loss`] with respect to every
/// core entry.
pub fn fd_core_gradients(
    adapter: &DotaAdapter<f64>,
    x: &DenseTensor<f64>,
    target: &DenseTensor<f64>,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut probe = adapter.clone();
    (0..adapter.cores().num_cores())
        .map(|k| {
            (0..adapter.cores().cores()[k].len())
                .map(|e| {
                    let orig = probe.core_data_mut(k)[e];
                    probe.core_data_mut(k)[e] = orig + h;
                    let plus = half_sq_loss(&probe, x, target);
                    probe.core_data_mut(k)[e] = orig - h;
                    let minus = half_sq_loss(&probe, x, target);
                    probe.core_data_mut(k)[e] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Matrix shapes with dims between 16 and 256 and two, three or five cores.
pub fn reconstruction_grid() -> Vec<MpoShape> {
    let s = |i: &[usize], o: &[usize]| MpoShape::new(i.to_vec(), o.to_vec()).unwrap();
    vec![
        s(&[4, 4], &[4, 4]),
        s(&[2, 8], &[4, 4]),
        s(&[4, 8], &[8, 4]),
        s(&[16, 16], &[16, 16]),
        s(&[8, 16], &[4, 8]),
        s(&[3, 7], &[5, 4]),
        s(&[16, 8], &[2, 16]),
        s(&[4, 4, 4], &[4, 4, 4]),
        s(&[2, 4, 2], &[4, 2, 2]),
        s(&[4, 8, 8], &[4, 4, 4]),
        s(&[3, 3, 3], &[2, 4, 3]),
        s(&[8, 4, 8], &[4, 8, 4]),
        s(&[4, 4, 16], &[16, 4, 4]),
        s(&[5, 2, 4], &[2, 3, 4]),
        s(&[2, 2, 2, 2, 2], &[2, 2, 2, 2, 2]),
        s(&[2, 2, 2, 2, 2], &[4, 2, 2, 2, 2]),
        s(&[3, 3, 3, 3, 3], &[2, 2, 2, 2, 2]),
        s(&[2, 2, 4, 2, 2], &[2, 4, 2, 2, 2]),
        s(&[4, 4, 4, 2, 2], &[2, 2, 4, 4, 4]),
        s(&[4, 4, 2, 2, 2], &[4, 4, 2, 2, 2]),
    ]
}
