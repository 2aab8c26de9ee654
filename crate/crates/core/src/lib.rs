pub mod adapter;
pub mod error;
pub mod harness;
pub mod io;
pub mod exec;
pub mod linalg;
pub mod mpo;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use adapter::{dota_init, Backward, CoreGradients, DotaAdapter, Residual};
pub use error::{DotaError, Result};
pub use exec::Exec;
pub use mpo::{
    max_ranks, mpo_decompose, param_count, reconstruct, reconstruction_error, reorder_for_mpo,
    CoreChain, MpoShape,
};
pub use quant::{
    dequantize_nf4, nf4_codebook, qdota_forward, qdota_init, quantize_nf4, Nf4Codebook,
    QuantizedMatrix,
};
pub use scalar::{Dtype, Scalar};
pub use tensor::{contract, matricize, permute, tensorize, DenseTensor, IndexPermutation};
pub use io::{read_bundle, read_matrix, write_bundle, write_matrix, AnyBundle, AnyMatrix, Bundle, BundleHeader};
