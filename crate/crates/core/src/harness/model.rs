use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rng::{gaussian_matrix, gaussian_tensor, stream_rng, Stream};
use crate::adapter::{dota_init, DotaAdapter, Residual};
use crate::error::{DotaError, Result};
use crate::mpo::{truncated_ranks, CoreChain, MpoShape};
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseTensor};

/// Fine-tuning method compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dota")]
    Dota,
    #[serde(rename = "dota-random")]
    DotaRandom,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "full-ft")]
    FullFt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dota, Method::DotaRandom, Method::Lora, Method::FullFt];

    pub fn label(self) -> &'static str {
        match self {
            Method::Dota => "dota",
            Method::DotaRandom => "dota-random",
            Method::Lora => "lora",
            Method::FullFt => "full-ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = DotaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                DotaError::Parameter(format!(
                    "unknown method {s:?} (expected dota, dota-random, lora or full-ft)"
                ))
            })
    }
}

/// Random tensor chain with the given ranks whose contraction is exactly zero:
/// cores `1..N-1` are Gaussian, the last core is all zeros.
pub fn random_init_cores(shape: &MpoShape, ranks: &[usize], std: f64, seed: u64) -> Result<CoreChain<f64>> {
    let mut chain = CoreChain::zeros(shape, ranks)?;
    let mut rng = stream_rng(seed, Stream::RandomCores, 0);
    let n = chain.num_cores();
    for k in 0..n - 1 {
        let sample = gaussian_tensor(chain.cores()[k].shape().to_vec(), std, &mut rng);
        chain.core_data_mut(k).copy_from_slice(sample.data());
    }
    Ok(chain)
}

/// `W = W_0 + A · B` with `A` Gaussian and `B` zero at initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBaseline {
    w0: DenseTensor<f64>,
    a: DenseTensor<f64>,
    b: DenseTensor<f64>,
}

impl LoraBaseline {
    pub fn new(w0: DenseTensor<f64>, rank: usize, std: f64, seed: u64) -> Result<Self> {
        let (i, j) = w0.dims2()?;
        if rank == 0 {
            return Err(DotaError::Parameter("LoRA rank must be at least 1".into()));
        }
        let a = gaussian_matrix(i, rank, std, &mut stream_rng(seed, Stream::Lora, 0));
        let b = DenseTensor::zeros(vec![rank, j])?;
        Ok(Self { w0, a, b })
    }

    pub fn a(&self) -> &DenseTensor<f64> {
        &self.a
    }

    pub fn b(&self) -> &DenseTensor<f64> {
        &self.b
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn forward(&self, x: &DenseTensor<f64>) -> Result<DenseTensor<f64>> {
        matmul(x, &self.w0)?.add(&matmul(&matmul(x, &self.a)?, &self.b)?)
    }

    pub fn effective_weight(&self) -> Result<DenseTensor<f64>> {
        self.w0.add(&matmul(&self.a, &self.b)?)
    }

    fn step(&mut self, x: &DenseTensor<f64>, dy: &DenseTensor<f64>, lr: f64) -> Result<()> {
        let dw = matmul_tn(x, dy)?;
        let da = matmul_nt(&dw, &self.b)?;
        let db = matmul_tn(&self.a, &dw)?;
        self.a.axpy(-lr, &da)?;
        self.b.axpy(-lr, &db)
    }
}

/// A model under training in the harness.
#[derive(Clone, Debug)]
pub enum Model {
    /// DoTA adapter, either decomposition-initialized or random-initialized
    /// over a frozen `W_0`.
    Adapter(DotaAdapter<f64>),
    Lora(LoraBaseline),
    Full(DenseTensor<f64>),
}

impl Model {
    /// Builds the starting point for `method`. Every variant's effective
    /// weight equals `W_0` at step 0.
    pub fn init(method: Method, w0: &DenseTensor<f64>, shape: &MpoShape, rank: usize, lora_rank: usize, seed: u64) -> Result<Self> {
        let std = 1.0 / (shape.rows() as f64).sqrt();
        Ok(match method {
            Method::Dota => Model::Adapter(dota_init(w0, shape, Some(rank))?),
            Method::DotaRandom => {
                let ranks = truncated_ranks(shape, Some(rank));
                let chain = random_init_cores(shape, &ranks, std, seed)?;
                Model::Adapter(DotaAdapter::from_parts(
                    Residual::Dense(w0.clone()),
                    chain,
                    shape.clone(),
                )?)
            }
            Method::Lora => Model::Lora(LoraBaseline::new(w0.clone(), lora_rank, std, seed)?),
            Method::FullFt => Model::Full(w0.clone()),
        })
    }

    pub fn forward(&self, x: &DenseTensor<f64>) -> Result<DenseTensor<f64>> {
        match self {
            Model::Adapter(a) => a.forward(x),
            Model::Lora(l) => l.forward(x),
            Model::Full(w) => matmul(x, w),
        }
    }

    /// One gradient-descent step given `dy = ∂L/∂y` on batch `x`.
    pub fn step(&mut self, x: &DenseTensor<f64>, dy: &DenseTensor<f64>, lr: f64) -> Result<()> {
        match self {
            Model::Adapter(a) => {
                let g = a.backward(x, dy)?;
                a.apply_gradients(&g.cores, lr)
            }
            Model::Lora(l) => l.step(x, dy, lr),
            Model::Full(w) => w.axpy(-lr, &matmul_tn(x, dy)?),
        }
    }

    pub fn effective_weight(&self) -> Result<DenseTensor<f64>> {
        match self {
            Model::Adapter(a) => a.merge(),
            Model::Lora(l) => l.effective_weight(),
            Model::Full(w) => Ok(w.clone()),
        }
    }

    pub fn trainable_params(&self) -> usize {
        match self {
            Model::Adapter(a) => a.trainable_params(),
            Model::Lora(l) => l.trainable_params(),
            Model::Full(w) => w.len(),
        }
    }
}
