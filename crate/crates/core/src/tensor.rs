//! Dense row-major tensors and the reshape / permute / contract algebra.
//!
//! Layout is row-major everywhere: the last index varies fastest. Mode
//! indices are zero-based.

use crate::error::{shape_err, DotaError, Result};
use crate::exec::Exec;
use crate::scalar::Scalar;

/// Work (multiply-adds) above which `contract` goes to the thread pool.
const PAR_WORK_THRESHOLD: usize = 1 << 18;

/// An order-N array with explicit shape, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn checked_product(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| DotaError::Shape(format!("shape {shape:?} overflows usize")))
    })
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor order must be at least 1");
    }
    if shape.contains(&0) {
        return shape_err(format!("mode sizes must be positive, got {shape:?}"));
    }
    checked_product(shape)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = validate_shape(&shape)?;
        if n != data.len() {
            return shape_err(format!(
                "data length {} does not match shape {shape:?} ({n} elements)",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = validate_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![T::zero(); n],
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n = validate_shape(&shape)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self
            .offset(index)
            .ok_or_else(|| DotaError::Shape(format!("index {index:?} out of bounds for {:?}", self.shape)))?;
        self.data[off] = value;
        Ok(())
    }

    /// Reinterprets the row-major data under a new shape with the same size.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Returns `(rows, cols)` for an order-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => shape_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Self> {
        self.dims2()?;
        permute(self, &IndexPermutation::new(vec![1, 0])?)
    }
}

/// Advances a row-major multi-index; wraps to all zeros after the last one.
fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// ‖a − b‖_F / ‖b‖_F, or the absolute difference norm when `b` is zero.
pub fn relative_error<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let base = b.frobenius_norm();
    Ok(if base == 0.0 { diff } else { diff / base })
}

/// A bijection on `{0, .., n-1}`: output mode `m` takes input mode `perm[m]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPermutation {
    perm: Vec<usize>,
}

impl IndexPermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(DotaError::Parameter(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (m, &p) in self.perm.iter().enumerate() {
            inv[p] = m;
        }
        Self { perm: inv }
    }
}

/// Reshapes a flat row-major array into a tensor of the given shape.
pub fn tensorize<T: Scalar>(vec: Vec<T>, shape: Vec<usize>) -> Result<DenseTensor<T>> {
    DenseTensor::new(shape, vec)
}

/// Row-major flattening; the inverse of [`tensorize`].
pub fn flatten<T: Scalar>(t: &DenseTensor<T>) -> Vec<T> {
    t.data.clone()
}

/// Relabels modes: mode `m` of the output is mode `p[m]` of the input.
pub fn permute<T: Scalar>(t: &DenseTensor<T>, p: &IndexPermutation) -> Result<DenseTensor<T>> {
    if p.len() != t.order() {
        return Err(DotaError::Parameter(format!(
            "permutation of length {} applied to order-{} tensor",
            p.len(),
            t.order()
        )));
    }
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = p.perm.iter().map(|&q| t.shape[q]).collect();
    // stride in the input buffer for a unit step along each output mode
    let gather: Vec<usize> = p.perm.iter().map(|&q| in_strides[q]).collect();

    let mut data = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..t.len() {
        data.push(t.data[src]);
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            src += gather[k];
            if idx[k] < out_shape[k] {
                break;
            }
            src -= gather[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    Ok(DenseTensor {
        shape: out_shape,
        data,
    })
}

/// Mode-`mode` matricization: an `[I_mode, prod of the other sizes]` matrix
/// whose columns run over the remaining modes in ascending order, row-major.
pub fn matricize<T: Scalar>(t: &DenseTensor<T>, mode: usize) -> Result<DenseTensor<T>> {
    if mode >= t.order() {
        return Err(DotaError::Parameter(format!(
            "mode {mode} out of range for order-{} tensor",
            t.order()
        )));
    }
    let mut perm = vec![mode];
    perm.extend((0..t.order()).filter(|&m| m != mode));
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    permute(t, &IndexPermutation { perm })?.reshape(vec![rows, cols])
}

/// Contracts the last `k` modes of `a` with the first `k` modes of `b`.
pub fn contract<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>, k: usize) -> Result<DenseTensor<T>> {
    contract_with(a, b, k, Exec::default())
}

pub fn contract_with<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    k: usize,
    exec: Exec,
) -> Result<DenseTensor<T>> {
    if k > a.order() || k > b.order() {
        return shape_err(format!(
            "cannot contract {k} modes of orders {} and {}",
            a.order(),
            b.order()
        ));
    }
    let a_shared = &a.shape[a.order() - k..];
    let b_shared = &b.shape[..k];
    if a_shared != b_shared {
        return shape_err(format!(
            "shared modes differ: {a_shared:?} vs {b_shared:?}"
        ));
    }
    let mut out_shape: Vec<usize> = a.shape[..a.order() - k].to_vec();
    out_shape.extend_from_slice(&b.shape[k..]);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let inner: usize = a_shared.iter().product();
    let m = a.len() / inner;
    let n = b.len() / inner;
    let data = gemm(&a.data, &b.data, m, inner, n, exec);
    DenseTensor::new(out_shape, data)
}

/// Row-major `[m, k] x [k, n]` product. Each output row is accumulated in a
/// fixed order, so sequential and parallel runs agree bitwise.
fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, exec: Exec) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    let exec = if m * k * n >= PAR_WORK_THRESHOLD {
        exec
    } else {
        Exec::Sequential
    };
    exec.for_each_chunk(&mut out, n, row);
    out
}

/// Matrix product of two order-2 tensors.
pub fn matmul<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    matmul_with(a, b, Exec::default())
}

pub fn matmul_with<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>, exec: Exec) -> Result<DenseTensor<T>> {
    let (_, ak) = a.dims2()?;
    let (bk, _) = b.dims2()?;
    if ak != bk {
        return shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        ));
    }
    contract_with(a, b, 1, exec)
}

/// `aᵀ · b` for matrices sharing their row count.
pub fn matmul_tn<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    matmul(&a.transpose()?, b)
}

/// `a · bᵀ` for matrices sharing their column count.
pub fn matmul_nt<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    matmul(a, &b.transpose()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensorize_identity_1d() {
        let v: Vec<f64> = (0..6).map(f64::from).collect();
        let t = tensorize(v.clone(), vec![6]).unwrap();
        assert_eq!(t.shape(), &[6]);
        assert_eq!(t.data(), v.as_slice());
    }

    #[test]
    fn tensorize_row_major_offset() {
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let t = tensorize(v, vec![2, 3, 4]).unwrap();
        assert_eq!(t.get(&[1, 2, 3]), Some(23.0));
        assert_eq!(t.get(&[1, 0, 2]), Some(14.0));
    }

    #[test]
    fn tensorize_round_trip() {
        let t = random(&[3, 5, 2], 7);
        let v = flatten(&t);
        assert_eq!(flatten(&tensorize(v.clone(), vec![3, 5, 2]).unwrap()), v);
    }

    #[test]
    fn tensorize_size_mismatch() {
        assert!(matches!(
            tensorize(vec![1.0f64; 5], vec![2, 3]),
            Err(DotaError::Shape(_))
        ));
        assert!(DenseTensor::<f64>::zeros(vec![2, 0]).is_err());
        assert!(DenseTensor::<f64>::zeros(vec![]).is_err());
    }

    #[test]
    fn matricize_order2_mode0_is_identity() {
        let t = random(&[3, 4], 1);
        assert_eq!(matricize(&t, 0).unwrap(), t);
    }

    #[test]
    fn matricize_against_triple_loop() {
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let t = tensorize(v, vec![2, 3, 4]).unwrap();
        let m = matricize(&t, 1).unwrap();
        assert_eq!(m.shape(), &[3, 8]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    // remaining modes (i, k) in row-major order
                    let col = i * 4 + k;
                    assert_eq!(m.get(&[j, col]), t.get(&[i, j, k]));
                }
            }
        }
        let m0 = matricize(&t, 0).unwrap();
        assert_eq!(m0.shape(), &[2, 12]);
        assert_eq!(&m0.data()[..12], &t.data()[..12]);
    }

    #[test]
    fn matricize_mode_out_of_range() {
        let t = random(&[2, 3], 1);
        assert!(matches!(matricize(&t, 2), Err(DotaError::Parameter(_))));
    }

    #[test]
    fn contract_identity() {
        let b = random(&[2, 3], 3);
        let id = DenseTensor::identity(2).unwrap();
        assert_eq!(contract(&id, &b, 1).unwrap(), b);
    }

    #[test]
    fn contract_against_nested_loops() {
        let a = random(&[2, 3, 4], 4);
        let b = random(&[4, 5], 5);
        let c = contract(&a, &b, 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..5 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += a.get(&[i, j, k]).unwrap() * b.get(&[k, l]).unwrap();
                    }
                    assert!((c.get(&[i, j, l]).unwrap() - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn contract_two_shared_modes() {
        let a = random(&[3, 2, 4], 8);
        let b = random(&[2, 4, 5], 9);
        let c = contract(&a, &b, 2).unwrap();
        assert_eq!(c.shape(), &[3, 5]);
        let mut s = 0.0;
        for j in 0..2 {
            for k in 0..4 {
                s += a.get(&[1, j, k]).unwrap() * b.get(&[j, k, 3]).unwrap();
            }
        }
        assert!((c.get(&[1, 3]).unwrap() - s).abs() < 1e-14);
    }

    #[test]
    fn contract_scalar_case() {
        let a = DenseTensor::matrix(1, 1, vec![2.5]).unwrap();
        let b = random(&[1, 7], 6);
        let c = contract(&a, &b, 1).unwrap();
        assert_eq!(c, b.scale(2.5));
    }

    #[test]
    fn contract_mismatch() {
        let a = random(&[2, 3], 1);
        let b = random(&[4, 2], 2);
        assert!(matches!(contract(&a, &b, 1), Err(DotaError::Shape(_))));
    }

    #[test]
    fn contract_matches_naive_matmul() {
        let a = random(&[7, 11], 10);
        let b = random(&[11, 5], 11);
        let c = contract(&a, &b, 1).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let s: f64 = (0..11).map(|k| a.data()[i * 11 + k] * b.data()[k * 5 + j]).sum();
                assert!((c.data()[i * 5 + j] - s).abs() <= f64::EPSILON * 11.0 * 4.0);
            }
        }
    }

    #[test]
    fn chain_contraction_is_associative() {
        let a = random(&[3, 4, 5], 20);
        let b = random(&[5, 6, 7], 21);
        let c = random(&[7, 2], 22);
        let left = contract(&contract(&a, &b, 1).unwrap(), &c, 1).unwrap();
        let right = contract(&a, &contract(&b, &c, 1).unwrap(), 1).unwrap();
        assert!(relative_error(&left, &right).unwrap() < 1e-12);
    }

    #[test]
    fn parallel_gemm_is_bitwise_sequential() {
        let a = random(&[96, 80], 30);
        let b = random(&[80, 72], 31);
        let s = contract_with(&a, &b, 1, Exec::Sequential).unwrap();
        let p = contract_with(&a, &b, 1, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn permute_identity_and_transpose() {
        let t = random(&[2, 3], 12);
        assert_eq!(permute(&t, &IndexPermutation::identity(2)).unwrap(), t);
        let tt = permute(&t, &IndexPermutation::new(vec![1, 0]).unwrap()).unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.get(&[2, 1]), t.get(&[1, 2]));
    }

    #[test]
    fn invalid_permutations() {
        assert!(IndexPermutation::new(vec![0, 0]).is_err());
        assert!(IndexPermutation::new(vec![0, 2]).is_err());
        let t = random(&[2, 3], 12);
        assert!(permute(&t, &IndexPermutation::identity(3)).is_err());
    }

    #[test]
    fn permute_matches_index_relabeling() {
        let t = random(&[2, 3, 4, 5], 13);
        let p = IndexPermutation::new(vec![2, 0, 3, 1]).unwrap();
        let out = permute(&t, &p).unwrap();
        assert_eq!(out.shape(), &[4, 2, 5, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        let src = [a, b, c, d];
                        let dst: Vec<usize> = p.as_slice().iter().map(|&q| src[q]).collect();
                        assert_eq!(out.get(&dst), t.get(&src));
                    }
                }
            }
        }
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn flatten_tensorize_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let t = random(&shape, seed);
            let back = tensorize(flatten(&t), shape.clone()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn permute_inverse_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let t = random(&shape, seed);
            let mut perm: Vec<usize> = (0..shape.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let p = IndexPermutation::new(perm).unwrap();
            let there = permute(&t, &p).unwrap();
            let mut a: Vec<u64> = there.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(permute(&there, &p.inverse()).unwrap(), t);
        }
    }
}
