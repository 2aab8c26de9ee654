//! NF4 blockwise quantization of frozen residuals (QDoTA).
//!
//! Elements are grouped into consecutive row-major blocks. Each block stores
//! its absmax `s_b` and every element as the index of the NF4 level nearest to
//! `w / s_b`. Dequantization is `level[code] * s_b`.

use crate::adapter::{DotaAdapter, Nf4Residual, Residual};
use crate::error::{DotaError, Result};
use crate::exec::Exec;
use crate::mpo::{mpo_decompose, reconstruct, MpoShape};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// The 16 NF4 levels (standard-normal quantiles, 7 negative, zero, 8
/// positive, normalized to [-1, 1]) as published with the QLoRA kernels.
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

/// Code of the zero level.
pub const NF4_ZERO_CODE: u8 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Nf4Codebook {
    levels: [f64; 16],
    midpoints: [f64; 15],
}

pub fn nf4_codebook() -> Nf4Codebook {
    let mut midpoints = [0.0; 15];
    for (k, m) in midpoints.iter_mut().enumerate() {
        *m = 0.5 * (NF4_LEVELS[k] + NF4_LEVELS[k + 1]);
    }
    Nf4Codebook {
        levels: NF4_LEVELS,
        midpoints,
    }
}

impl Nf4Codebook {
    pub fn levels(&self) -> &[f64; 16] {
        &self.levels
    }

    pub fn level(&self, code: u8) -> f64 {
        self.levels[code as usize & 0x0F]
    }

    /// Index of the level nearest to `v`; exact midpoints go to the lower index.
    pub fn nearest(&self, v: f64) -> u8 {
        self.midpoints.iter().filter(|&&m| v > m).count() as u8
    }

    /// Largest distance between adjacent levels.
    pub fn max_gap(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// A matrix stored as packed NF4 codes plus one absmax scale per block.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix<T = f64> {
    rows: usize,
    cols: usize,
    block_size: usize,
    /// Two codes per byte, low nibble first.
    codes: Vec<u8>,
    absmax: Vec<T>,
}

impl<T: Scalar> QuantizedMatrix<T> {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block_size: usize,
        codes: Vec<u8>,
        absmax: Vec<T>,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(DotaError::Parameter("block size must be at least 1".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(DotaError::Shape("quantized matrix needs positive dims".into()));
        }
        let n = rows * cols;
        if codes.len() != n.div_ceil(2) {
            return Err(DotaError::Format(format!(
                "{} code bytes for {n} elements, expected {}",
                codes.len(),
                n.div_ceil(2)
            )));
        }
        if absmax.len() != n.div_ceil(block_size) {
            return Err(DotaError::Format(format!(
                "{} scales for {n} elements in blocks of {block_size}, expected {}",
                absmax.len(),
                n.div_ceil(block_size)
            )));
        }
        if absmax.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(DotaError::Format("block scales must be finite and non-negative".into()));
        }
        Ok(Self {
            rows,
            cols,
            block_size,
            codes,
            absmax,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn absmax(&self) -> &[T] {
        &self.absmax
    }

    pub fn num_blocks(&self) -> usize {
        self.absmax.len()
    }

    /// Code of element `i` in row-major order.
    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    pub fn dequantize(&self) -> DenseTensor<T> {
        dequantize_nf4(self)
    }
}

fn pack(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| pair[0] | pair.get(1).map_or(0, |hi| hi << 4))
        .collect()
}

/// Quantizes `w` to NF4 with absmax scaling over `block_size` consecutive
/// row-major elements.
pub fn quantize_nf4<T: Scalar>(w: &DenseTensor<T>, block_size: usize) -> Result<QuantizedMatrix<T>> {
    quantize_nf4_with(w, block_size, Exec::default())
}

pub fn quantize_nf4_with<T: Scalar>(
    w: &DenseTensor<T>,
    block_size: usize,
    exec: Exec,
) -> Result<QuantizedMatrix<T>> {
    if block_size == 0 {
        return Err(DotaError::Parameter("block size must be at least 1".into()));
    }
    let (rows, cols) = w.dims2()?;
    if !w.is_finite() {
        return Err(DotaError::Numeric("cannot quantize non-finite values".into()));
    }
    let book = nf4_codebook();
    let blocks: Vec<&[T]> = w.data().chunks(block_size).collect();
    let encoded = exec.map(blocks, |block| {
        let scale = block.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let codes: Vec<u8> = if scale == T::zero() {
            vec![NF4_ZERO_CODE; block.len()]
        } else {
            let s = scale.as_f64();
            block.iter().map(|v| book.nearest(v.as_f64() / s)).collect()
        };
        (scale, codes)
    });
    let mut absmax = Vec::with_capacity(encoded.len());
    let mut codes = Vec::with_capacity(rows * cols);
    for (s, c) in encoded {
        absmax.push(s);
        codes.extend(c);
    }
    QuantizedMatrix::from_parts(rows, cols, block_size, pack(&codes), absmax)
}

pub fn dequantize_nf4<T: Scalar>(q: &QuantizedMatrix<T>) -> DenseTensor<T> {
    let book = nf4_codebook();
    let data = (0..q.len())
        .map(|i| T::from_f64(book.level(q.code(i))) * q.absmax[i / q.block_size])
        .collect();
    DenseTensor::matrix(q.rows, q.cols, data).expect("dims validated at construction")
}

/// DoTA initialization with the residual stored in NF4. The cores stay at
/// full precision.
pub fn qdota_init<T: Scalar>(
    w0: &DenseTensor<T>,
    shape: &MpoShape,
    rank_threshold: Option<usize>,
    block_size: usize,
) -> Result<DotaAdapter<T>> {
    let cores = mpo_decompose(w0, shape, rank_threshold)?;
    let w_res = w0.sub(&reconstruct(&cores, shape)?)?;
    let q = quantize_nf4(&w_res, block_size)?;
    DotaAdapter::from_parts(Residual::Nf4(Nf4Residual::new(q)), cores, shape.clone())
}

/// `x · Dequant(W_res) + x · MPO(cores)`.
pub fn qdota_forward<T: Scalar>(adapter: &DotaAdapter<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    adapter.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::dota_init;
    use crate::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, std).unwrap();
        DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn codebook_shape() {
        let book = nf4_codebook();
        let l = book.levels();
        assert_eq!(l.len(), 16);
        assert_eq!(l[0], -1.0);
        assert_eq!(l[15], 1.0);
        assert!(l.contains(&0.0));
        assert_eq!(l[NF4_ZERO_CODE as usize], 0.0);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn nearest_ties_go_low() {
        let book = nf4_codebook();
        let mid = 0.5 * (NF4_LEVELS[3] + NF4_LEVELS[4]);
        assert_eq!(book.nearest(mid), 3);
        assert_eq!(book.nearest(mid + 1e-12), 4);
        assert_eq!(book.nearest(-2.0), 0);
        assert_eq!(book.nearest(1.0), 15);
        assert_eq!(book.nearest(0.0), NF4_ZERO_CODE);
    }

    #[test]
    fn zero_matrix_round_trips() {
        let w = DenseTensor::<f64>::zeros(vec![4, 8]).unwrap();
        let q = quantize_nf4(&w, 5).unwrap();
        assert!(q.absmax().iter().all(|&s| s == 0.0));
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn endpoints_are_exact() {
        let w = DenseTensor::matrix(1, 4, vec![0.5, 0.0, 0.0, -0.5]).unwrap();
        let q = quantize_nf4(&w, 4).unwrap();
        assert_eq!(q.absmax(), &[0.5]);
        assert_eq!(q.codes(), vec![15, 7, 7, 0]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn round_trip_within_gap_bound() {
        let w = gaussian(16, 16, 0.02, 1);
        let q = quantize_nf4(&w, 64).unwrap();
        let d = q.dequantize();
        let g = nf4_codebook().max_gap();
        for (i, (&x, &y)) in w.data().iter().zip(d.data()).enumerate() {
            let s = q.absmax()[i / 64];
            assert!((x - y).abs() <= s * g / 2.0);
            assert!(y.abs() <= s);
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let w = gaussian(7, 9, 1.0, 2);
        let q1 = quantize_nf4(&w, 10).unwrap();
        let q2 = quantize_nf4(&q1.dequantize(), 10).unwrap();
        assert_eq!(q1.codes(), q2.codes());
    }

    #[test]
    fn storage_accounting() {
        let w = gaussian(5, 7, 1.0, 3);
        let q = quantize_nf4(&w, 8).unwrap();
        assert_eq!(q.packed_codes().len(), 18);
        assert_eq!(q.num_blocks(), 5);
        assert!(q.codes().iter().all(|&c| c < 16));
    }

    #[test]
    fn quantize_errors() {
        let mut w = gaussian(2, 2, 1.0, 4);
        assert!(matches!(quantize_nf4(&w, 0), Err(DotaError::Parameter(_))));
        w.data_mut()[0] = f64::NAN;
        assert!(matches!(quantize_nf4(&w, 2), Err(DotaError::Numeric(_))));
    }

    #[test]
    fn parallel_quantization_matches_sequential() {
        let w = gaussian(64, 48, 1.0, 5);
        assert_eq!(
            quantize_nf4_with(&w, 64, Exec::Sequential).unwrap(),
            quantize_nf4_with(&w, 64, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn from_parts_validation() {
        assert!(QuantizedMatrix::<f64>::from_parts(2, 2, 2, vec![0; 2], vec![1.0; 2]).is_ok());
        assert!(QuantizedMatrix::<f64>::from_parts(2, 2, 2, vec![0; 3], vec![1.0; 2]).is_err());
        assert!(QuantizedMatrix::<f64>::from_parts(2, 2, 2, vec![0; 2], vec![1.0; 1]).is_err());
        assert!(QuantizedMatrix::<f64>::from_parts(2, 2, 2, vec![0; 2], vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn qdota_init_error_is_residual_quantization_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..64 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w0 = DenseTensor::matrix(64, 64, data).unwrap();
        let shape = MpoShape::new(vec![4, 4, 4], vec![4, 4, 4]).unwrap();
        let q = qdota_init(&w0, &shape, Some(4), 64).unwrap();
        let d = dota_init(&w0, &shape, Some(4)).unwrap();
        assert_eq!(q.cores(), d.cores());
        let quant_err = q
            .residual()
            .matrix()
            .sub(d.residual().matrix())
            .unwrap()
            .frobenius_norm();
        let merge_err = q.merge().unwrap().sub(&w0).unwrap().frobenius_norm();
        assert!(merge_err <= quant_err + 1e-10);
        assert!(quant_err > 0.0);
    }

    #[test]
    fn qdota_untruncated_is_exact() {
        let w0 = gaussian(16, 16, 1.0, 7);
        let shape = MpoShape::new(vec![4, 4], vec![4, 4]).unwrap();
        let q = qdota_init(&w0, &shape, None, 64).unwrap();
        assert!(relative_error(&q.merge().unwrap(), &w0).unwrap() < 1e-12);
    }
}
