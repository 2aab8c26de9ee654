//! Little-endian binary formats for matrices and decomposed core bundles.
//!
//! Matrix file:
//! ```text
//! "DOTM" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64) | rows u32 | cols u32 | payload
//! ```
//! Bundle file:
//! ```text
//! "DOTC" | version u8 = 1 | header_len u32 | JSON header | cores 1..N | residual?
//! ```
//! The residual is either a raw row-major matrix or packed NF4 codes followed
//! by the block scales at the bundle's dtype.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{DotaAdapter, Nf4Residual, Residual};
use crate::error::{DotaError, Result};
use crate::mpo::{CoreChain, MpoShape};
use crate::quant::QuantizedMatrix;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::DenseTensor;

pub const MATRIX_MAGIC: &[u8; 4] = b"DOTM";
pub const BUNDLE_MAGIC: &[u8; 4] = b"DOTC";
pub const FORMAT_VERSION: u8 = 1;

const MATRIX_HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DotaError::Format(msg.into()))
}

/// Sequential reader over a byte slice that fails cleanly on truncation.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => format_err(format!(
                "truncated: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn scalars<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let len = n
            .checked_mul(size)
            .ok_or_else(|| DotaError::Format(format!("{what}: element count overflows")))?;
        Ok(self.take(len, what)?.chunks_exact(size).map(T::read_le).collect())
    }

    fn finish(&self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return format_err(format!("{rest} trailing bytes after payload"));
        }
        Ok(())
    }
}

fn check_preamble(c: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    let m = c.take(4, "magic")?;
    if m != magic {
        return format_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        ));
    }
    let v = c.u8("version")?;
    if v != FORMAT_VERSION {
        return format_err(format!("unsupported version {v}, expected {FORMAT_VERSION}"));
    }
    Ok(())
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).or_else(|_| format_err(format!("{what} {n} does not fit in u32")))
}

fn push_scalars<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    out.reserve(data.len() * T::DTYPE.size());
    for &v in data {
        v.write_le(out);
    }
}

/// A matrix of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyMatrix {
    F32(DenseTensor<f32>),
    F64(DenseTensor<f64>),
}

impl AnyMatrix {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyMatrix::F32(_) => Dtype::F32,
            AnyMatrix::F64(_) => Dtype::F64,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            AnyMatrix::F32(m) => m.dims2(),
            AnyMatrix::F64(m) => m.dims2(),
        }
        .expect("matrix files hold rank-2 tensors")
    }

    pub fn to_f64(&self) -> DenseTensor<f64> {
        match self {
            AnyMatrix::F32(m) => m.cast(),
            AnyMatrix::F64(m) => m.clone(),
        }
    }
}

impl From<DenseTensor<f32>> for AnyMatrix {
    fn from(m: DenseTensor<f32>) -> Self {
        AnyMatrix::F32(m)
    }
}

impl From<DenseTensor<f64>> for AnyMatrix {
    fn from(m: DenseTensor<f64>) -> Self {
        AnyMatrix::F64(m)
    }
}

pub fn encode_matrix<T: Scalar>(m: &DenseTensor<T>) -> Result<Vec<u8>> {
    let (rows, cols) = m.dims2()?;
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + m.len() * T::DTYPE.size());
    out.extend_from_slice(MATRIX_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&dim_u32(rows, "rows")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(cols, "cols")?.to_le_bytes());
    push_scalars(&mut out, m.data());
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<AnyMatrix> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, MATRIX_MAGIC)?;
    let code = c.u8("dtype")?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| DotaError::Format(format!("unknown dtype code {code}")))?;
    let rows = c.u32("rows")? as usize;
    let cols = c.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return format_err(format!("empty matrix {rows}x{cols}"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| DotaError::Format("matrix size overflows".into()))?;
    let m = match dtype {
        Dtype::F32 => AnyMatrix::F32(DenseTensor::new(vec![rows, cols], c.scalars(n, "payload")?)?),
        Dtype::F64 => AnyMatrix::F64(DenseTensor::new(vec![rows, cols], c.scalars(n, "payload")?)?),
    };
    c.finish()?;
    Ok(m)
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| DotaError::Io(e.error))?;
    Ok(())
}

pub fn write_matrix<T: Scalar>(path: &Path, m: &DenseTensor<T>) -> Result<()> {
    write_atomic(path, &encode_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<AnyMatrix> {
    decode_matrix(&fs::read(path)?)
}

/// JSON header of a bundle file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleHeader {
    pub in_factors: Vec<usize>,
    pub out_factors: Vec<usize>,
    /// Bond ranks `R_0..R_N`, with `R_0 = R_N = 1`.
    pub ranks: Vec<usize>,
    pub dtype: Dtype,
    pub has_residual: bool,
    pub residual_quantized: bool,
    /// NF4 block size; meaningful only for a quantized residual.
    pub block_size: usize,
    pub original_rows: usize,
    pub original_cols: usize,
}

/// MPO cores of one matrix, optionally with the residual that completes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle<T = f64> {
    pub shape: MpoShape,
    pub cores: CoreChain<T>,
    pub residual: Option<Residual<T>>,
}

impl<T: Scalar> Bundle<T> {
    pub fn new(shape: MpoShape, cores: CoreChain<T>, residual: Option<Residual<T>>) -> Result<Self> {
        cores.check_shape(&shape)?;
        if let Some(r) = &residual {
            let (rows, cols) = r.matrix().dims2()?;
            shape.check_matrix(rows, cols)?;
        }
        Ok(Self { shape, cores, residual })
    }

    pub fn from_adapter(adapter: &DotaAdapter<T>) -> Self {
        Self {
            shape: adapter.shape().clone(),
            cores: adapter.cores().clone(),
            residual: Some(adapter.residual().clone()),
        }
    }

    /// The adapter this bundle describes; requires a residual.
    pub fn into_adapter(self) -> Result<DotaAdapter<T>> {
        let residual = self
            .residual
            .ok_or_else(|| DotaError::Format("bundle has no residual".into()))?;
        DotaAdapter::from_parts(residual, self.cores, self.shape)
    }

    /// `W_res + MPO(cores)`, or just the contracted cores without a residual.
    pub fn reconstruct(&self) -> Result<DenseTensor<T>> {
        let tensor = crate::mpo::reconstruct(&self.cores, &self.shape)?;
        match &self.residual {
            Some(r) => r.matrix().add(&tensor),
            None => Ok(tensor),
        }
    }

    pub fn header(&self) -> BundleHeader {
        let block_size = match &self.residual {
            Some(Residual::Nf4(q)) => q.quantized().block_size(),
            _ => 0,
        };
        BundleHeader {
            in_factors: self.shape.in_factors().to_vec(),
            out_factors: self.shape.out_factors().to_vec(),
            ranks: self.cores.ranks(),
            dtype: T::DTYPE,
            has_residual: self.residual.is_some(),
            residual_quantized: self.residual.as_ref().is_some_and(Residual::is_quantized),
            block_size,
            original_rows: self.shape.rows(),
            original_cols: self.shape.cols(),
        }
    }
}

/// A bundle of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyBundle {
    F32(Bundle<f32>),
    F64(Bundle<f64>),
}

impl AnyBundle {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyBundle::F32(_) => Dtype::F32,
            AnyBundle::F64(_) => Dtype::F64,
        }
    }

    pub fn reconstruct(&self) -> Result<AnyMatrix> {
        Ok(match self {
            AnyBundle::F32(b) => AnyMatrix::F32(b.reconstruct()?),
            AnyBundle::F64(b) => AnyMatrix::F64(b.reconstruct()?),
        })
    }
}

pub fn encode_bundle<T: Scalar>(b: &Bundle<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&b.header())?;
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&dim_u32(header.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&header);
    for core in b.cores.cores() {
        push_scalars(&mut out, core.data());
    }
    match &b.residual {
        None => {}
        Some(Residual::Dense(m)) => push_scalars(&mut out, m.data()),
        Some(Residual::Nf4(q)) => {
            out.extend_from_slice(q.quantized().packed_codes());
            push_scalars(&mut out, q.quantized().absmax());
        }
    }
    Ok(out)
}

fn validate_header(h: &BundleHeader) -> Result<MpoShape> {
    let shape = MpoShape::new(h.in_factors.clone(), h.out_factors.clone())
        .map_err(|e| DotaError::Format(format!("header factors: {e}")))?;
    if (h.original_rows, h.original_cols) != (shape.rows(), shape.cols()) {
        return format_err(format!(
            "header dims {}x{} do not match factors ({}x{})",
            h.original_rows,
            h.original_cols,
            shape.rows(),
            shape.cols()
        ));
    }
    let n = shape.num_cores();
    if h.ranks.len() != n + 1 || h.ranks[0] != 1 || h.ranks[n] != 1 || h.ranks.contains(&0) {
        return format_err(format!(
            "ranks {:?} invalid for {n} cores (need N+1 positive entries with boundary ranks 1)",
            h.ranks
        ));
    }
    if h.residual_quantized && !h.has_residual {
        return format_err("residual_quantized set without a residual");
    }
    if h.residual_quantized && h.block_size == 0 {
        return format_err("quantized residual needs block_size >= 1");
    }
    Ok(shape)
}

fn decode_bundle_as<T: Scalar>(c: &mut Cursor, h: &BundleHeader, shape: MpoShape) -> Result<Bundle<T>> {
    let mut cores = Vec::with_capacity(shape.num_cores());
    for k in 0..shape.num_cores() {
        let dims = vec![h.ranks[k], shape.in_factors()[k], shape.out_factors()[k], h.ranks[k + 1]];
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| DotaError::Format(format!("core {} size overflows", k + 1)))?;
        let data = c.scalars(len, &format!("core {}", k + 1))?;
        cores.push(DenseTensor::new(dims, data)?);
    }
    let cores = CoreChain::new(cores)?;
    let (rows, cols) = (shape.rows(), shape.cols());
    let residual = match (h.has_residual, h.residual_quantized) {
        (false, _) => None,
        (true, false) => Some(Residual::Dense(DenseTensor::new(
            vec![rows, cols],
            c.scalars(rows * cols, "residual")?,
        )?)),
        (true, true) => {
            let n = rows * cols;
            let codes = c.take(n.div_ceil(2), "residual codes")?.to_vec();
            let scales = c.scalars(n.div_ceil(h.block_size), "residual scales")?;
            let q = QuantizedMatrix::from_parts(rows, cols, h.block_size, codes, scales)?;
            Some(Residual::Nf4(Nf4Residual::new(q)))
        }
    };
    c.finish()?;
    Bundle::new(shape, cores, residual)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<AnyBundle> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, BUNDLE_MAGIC)?;
    let len = c.u32("header length")? as usize;
    let header: BundleHeader = serde_json::from_slice(c.take(len, "header")?)
        .map_err(|e| DotaError::Format(format!("bundle header: {e}")))?;
    let shape = validate_header(&header)?;
    Ok(match header.dtype {
        Dtype::F32 => AnyBundle::F32(decode_bundle_as(&mut c, &header, shape)?),
        Dtype::F64 => AnyBundle::F64(decode_bundle_as(&mut c, &header, shape)?),
    })
}

pub fn write_bundle<T: Scalar>(path: &Path, b: &Bundle<T>) -> Result<()> {
    write_atomic(path, &encode_bundle(b)?)
}

pub fn read_bundle(path: &Path) -> Result<AnyBundle> {
    decode_bundle(&fs::read(path)?)
}
