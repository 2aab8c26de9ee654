use serde::{Deserialize, Serialize};

use super::rng::{gaussian_matrix, gaussian_tensor, stream_rng, Stream};
use crate::error::{DotaError, Result};
use crate::mpo::{mpo_decompose, reconstruct, truncated_ranks, CoreChain, MpoShape};
use crate::tensor::{matmul, DenseTensor};

/// How the target perturbation `Δ` relates to `W_0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaKind {
    /// `Δ` reuses the cores `1..N-1` of the rank-`r_delta` decomposition of
    /// `W_0` and has a Gaussian last core, so it lives in the dominant bond
    /// subspaces of the pretrained weight.
    #[default]
    Aligned,
    /// `Δ` is the contraction of an independent Gaussian chain.
    Random,
}

/// Everything that defines a synthetic task apart from its seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpec {
    pub shape: MpoShape,
    /// Bond-rank bound of the target perturbation.
    pub r_delta: usize,
    pub delta_kind: DeltaKind,
    /// Target `‖Δ‖_F / ‖W_0‖_F`.
    pub delta_scale: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
}

/// Matrix regression surrogate for fine-tuning: learn `x ↦ x · W*` starting
/// from the "pretrained" weight `W_0`, where `W* = W_0 + Δ` and `Δ` has MPO
/// bond ranks at most `r_delta`. `W_0` has i.i.d. `N(0, 1/I)` entries.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: TaskSpec,
    seed: u64,
    w0: DenseTensor<f64>,
    w_star: DenseTensor<f64>,
    delta_ratio: f64,
    eval_x: DenseTensor<f64>,
    eval_y: DenseTensor<f64>,
}

impl SyntheticTask {
    pub fn generate(spec: TaskSpec, seed: u64) -> Result<Self> {
        if spec.r_delta == 0 || spec.batch_size == 0 || spec.eval_batch_size == 0 {
            return Err(DotaError::Parameter(
                "r_delta and batch sizes must be at least 1".into(),
            ));
        }
        if !(spec.delta_scale.is_finite() && spec.delta_scale >= 0.0) {
            return Err(DotaError::Parameter("delta_scale must be finite and >= 0".into()));
        }
        let (rows, cols) = (spec.shape.rows(), spec.shape.cols());
        let std = 1.0 / (rows as f64).sqrt();
        let w0 = gaussian_matrix(rows, cols, std, &mut stream_rng(seed, Stream::BaseWeight, 0));

        let ranks = truncated_ranks(&spec.shape, Some(spec.r_delta));
        let mut rng = stream_rng(seed, Stream::Delta, 0);
        let n = spec.shape.num_cores();
        let gaussian_core = |k: usize, rng: &mut _| {
            gaussian_tensor(
                vec![
                    ranks[k],
                    spec.shape.in_factors()[k],
                    spec.shape.out_factors()[k],
                    ranks[k + 1],
                ],
                1.0,
                rng,
            )
        };
        let cores = match spec.delta_kind {
            DeltaKind::Random => (0..n).map(|k| gaussian_core(k, &mut rng)).collect(),
            DeltaKind::Aligned => {
                let base = mpo_decompose(&w0, &spec.shape, Some(spec.r_delta))?;
                let mut cores = base.into_cores();
                let k = n - 1;
                let last_rank = cores[k].shape()[0];
                cores[k] = gaussian_tensor(
                    vec![last_rank, spec.shape.in_factors()[k], spec.shape.out_factors()[k], 1],
                    1.0,
                    &mut rng,
                );
                cores
            }
        };
        let raw = reconstruct(&CoreChain::new(cores)?, &spec.shape)?;
        let raw_norm = raw.frobenius_norm();
        let delta = if raw_norm > 0.0 {
            raw.scale(spec.delta_scale * w0.frobenius_norm() / raw_norm)
        } else {
            raw
        };
        let w_star = w0.add(&delta)?;
        let delta_ratio = delta.frobenius_norm() / w0.frobenius_norm();

        let eval_x = gaussian_matrix(
            spec.eval_batch_size,
            rows,
            1.0,
            &mut stream_rng(seed, Stream::EvalBatch, 0),
        );
        let eval_y = matmul(&eval_x, &w_star)?;
        Ok(Self {
            spec,
            seed,
            w0,
            w_star,
            delta_ratio,
            eval_x,
            eval_y,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w0(&self) -> &DenseTensor<f64> {
        &self.w0
    }

    pub fn w_star(&self) -> &DenseTensor<f64> {
        &self.w_star
    }

    pub fn delta(&self) -> DenseTensor<f64> {
        self.w_star.sub(&self.w0).expect("same shape")
    }

    /// Realized `‖Δ‖_F / ‖W_0‖_F`.
    pub fn delta_ratio(&self) -> f64 {
        self.delta_ratio
    }

    /// Held-out evaluation batch `(x, x · W*)`.
    pub fn eval_batch(&self) -> (&DenseTensor<f64>, &DenseTensor<f64>) {
        (&self.eval_x, &self.eval_y)
    }

    /// Training batch for step `step`; identical for every method.
    pub fn train_batch(&self, step: usize) -> Result<(DenseTensor<f64>, DenseTensor<f64>)> {
        let mut rng = stream_rng(self.seed, Stream::TrainBatch, step as u64);
        let x = gaussian_matrix(self.spec.batch_size, self.spec.shape.rows(), 1.0, &mut rng);
        let y = matmul(&x, &self.w_star)?;
        Ok((x, y))
    }
}
