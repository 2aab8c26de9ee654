//! DoTA adapter for a single linear layer.
//!
//! The effective weight is `W' = W_res + MPO(cores)`. At initialization the
//! cores come from [`mpo_decompose`] of the pretrained weight and
//! `W_res = W_0 − MPO(W_0)`, so `W' = W_0` no matter how hard the ranks were
//! truncated. Training updates the cores only; the residual is frozen.

use crate::error::{shape_err, Result};
use crate::mpo::{mpo_decompose, reconstruct, reorder_for_mpo, CoreChain, MpoShape};
use crate::quant::QuantizedMatrix;
use crate::scalar::Scalar;
use crate::tensor::{contract, matmul, matmul_nt, matmul_tn, DenseTensor};

/// NF4-stored residual together with its dequantized form.
#[derive(Clone, Debug, PartialEq)]
pub struct Nf4Residual<T = f64> {
    quantized: QuantizedMatrix<T>,
    dequantized: DenseTensor<T>,
}

impl<T: Scalar> Nf4Residual<T> {
    pub fn new(quantized: QuantizedMatrix<T>) -> Self {
        let dequantized = quantized.dequantize();
        Self {
            quantized,
            dequantized,
        }
    }

    pub fn quantized(&self) -> &QuantizedMatrix<T> {
        &self.quantized
    }

    pub fn dequantized(&self) -> &DenseTensor<T> {
        &self.dequantized
    }
}

/// The frozen part of the effective weight.
#[derive(Clone, Debug, PartialEq)]
pub enum Residual<T = f64> {
    Dense(DenseTensor<T>),
    Nf4(Nf4Residual<T>),
}

impl<T: Scalar> Residual<T> {
    /// The residual as a dense matrix (dequantized for NF4).
    pub fn matrix(&self) -> &DenseTensor<T> {
        match self {
            Residual::Dense(m) => m,
            Residual::Nf4(q) => q.dequantized(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Residual::Nf4(_))
    }
}

/// One gradient tensor per core, shaped like the core.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreGradients<T = f64> {
    grads: Vec<DenseTensor<T>>,
}

impl<T: Scalar> CoreGradients<T> {
    pub fn grads(&self) -> &[DenseTensor<T>] {
        &self.grads
    }

    pub fn into_grads(self) -> Vec<DenseTensor<T>> {
        self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(DenseTensor::is_finite)
    }
}

/// Result of [`DotaAdapter::backward`].
#[derive(Clone, Debug)]
pub struct Backward<T = f64> {
    pub cores: CoreGradients<T>,
    pub dx: DenseTensor<T>,
}

/// Frozen residual plus trainable MPO cores for one `I x J` layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DotaAdapter<T = f64> {
    residual: Residual<T>,
    cores: CoreChain<T>,
    shape: MpoShape,
}

/// Builds an adapter whose cores are the (truncated) MPO of `w0` and whose
/// residual absorbs the truncation error.
pub fn dota_init<T: Scalar>(
    w0: &DenseTensor<T>,
    shape: &MpoShape,
    rank_threshold: Option<usize>,
) -> Result<DotaAdapter<T>> {
    let cores = mpo_decompose(w0, shape, rank_threshold)?;
    let w_res = w0.sub(&reconstruct(&cores, shape)?)?;
    DotaAdapter::from_parts(Residual::Dense(w_res), cores, shape.clone())
}

impl<T: Scalar> DotaAdapter<T> {
    pub fn from_parts(residual: Residual<T>, cores: CoreChain<T>, shape: MpoShape) -> Result<Self> {
        cores.check_shape(&shape)?;
        let (r, c) = residual.matrix().dims2()?;
        shape.check_matrix(r, c)?;
        Ok(Self {
            residual,
            cores,
            shape,
        })
    }

    pub fn residual(&self) -> &Residual<T> {
        &self.residual
    }

    pub fn cores(&self) -> &CoreChain<T> {
        &self.cores
    }

    pub fn shape(&self) -> &MpoShape {
        &self.shape
    }

    pub fn in_features(&self) -> usize {
        self.shape.rows()
    }

    pub fn out_features(&self) -> usize {
        self.shape.cols()
    }

    pub fn trainable_params(&self) -> usize {
        self.cores.param_count()
    }

    pub fn frozen_params(&self) -> usize {
        self.shape.rows() * self.shape.cols()
    }

    /// The dense matrix currently represented by the cores.
    pub fn tensor_weight(&self) -> Result<DenseTensor<T>> {
        reconstruct(&self.cores, &self.shape)
    }

    /// `x · W_res + x · MPO(cores)` for a `[B, I]` batch.
    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        self.check_input(x)?;
        let frozen = matmul(x, self.residual.matrix())?;
        let live = matmul(x, &self.tensor_weight()?)?;
        frozen.add(&live)
    }

    /// Gradients of a loss with respect to every core and to the input,
    /// given `dy = ∂L/∂y` for `y = forward(x)`.
    pub fn backward(&self, x: &DenseTensor<T>, dy: &DenseTensor<T>) -> Result<Backward<T>> {
        self.check_input(x)?;
        let (b, _) = x.dims2()?;
        if dy.shape() != [b, self.out_features()] {
            return shape_err(format!(
                "dy has shape {:?}, expected [{b}, {}]",
                dy.shape(),
                self.out_features()
            ));
        }
        let dw = matmul_tn(x, dy)?;
        let cores = core_gradients(&self.cores, &self.shape, &dw)?;
        let dx = matmul_nt(dy, &self.merge()?)?;
        Ok(Backward { cores, dx })
    }

    /// `W_res + MPO(cores)` as one dense matrix.
    pub fn merge(&self) -> Result<DenseTensor<T>> {
        self.residual.matrix().add(&self.tensor_weight()?)
    }

    /// `core_k -= lr * grad_k` for every core.
    pub fn apply_gradients(&mut self, grads: &CoreGradients<T>, lr: T) -> Result<()> {
        if grads.grads.len() != self.cores.num_cores() {
            return shape_err("gradient count does not match core count");
        }
        for (k, g) in grads.grads.iter().enumerate() {
            if g.shape() != self.cores.cores()[k].shape() {
                return shape_err(format!("gradient {k} shape differs from its core"));
            }
        }
        for (k, g) in grads.grads.iter().enumerate() {
            for (c, &gv) in self.cores.core_data_mut(k).iter_mut().zip(g.data()) {
                *c -= lr * gv;
            }
        }
        Ok(())
    }

    /// Mutable core values, for optimizers and perturbation tests.
    pub fn core_data_mut(&mut self, k: usize) -> &mut [T] {
        self.cores.core_data_mut(k)
    }

    fn check_input(&self, x: &DenseTensor<T>) -> Result<()> {
        let (_, i) = x.dims2()?;
        if i != self.in_features() {
            return shape_err(format!(
                "input has {i} features, adapter expects {}",
                self.in_features()
            ));
        }
        Ok(())
    }
}

/// Chain-rule gradients `∂L/∂core_k` given the weight gradient `dw = ∂L/∂W`.
///
/// Left environments `L_k` (cores before `k` contracted) and right
/// environments `E_k` (cores after `k`) are built once each; then
/// `grad_k[a, d, b] = Σ_{p,q} L_k[p, a] · G[p, d, q] · E_k[b, q]` where `G` is
/// `dw` in interleaved order, split around site `k`.
pub fn core_gradients<T: Scalar>(
    chain: &CoreChain<T>,
    shape: &MpoShape,
    dw: &DenseTensor<T>,
) -> Result<CoreGradients<T>> {
    chain.check_shape(shape)?;
    let (g, _) = reorder_for_mpo(dw, shape)?;
    let n = chain.num_cores();
    let ranks = chain.ranks();
    let sites: Vec<usize> = (0..n).map(|k| shape.site_dim(k)).collect();
    let as3 = |k: usize| {
        chain.cores()[k]
            .clone()
            .reshape(vec![ranks[k], sites[k], ranks[k + 1]])
    };

    // left[k]: [prod sites[..k], ranks[k]]
    let mut left = Vec::with_capacity(n);
    left.push(DenseTensor::matrix(1, 1, vec![T::one()])?);
    for k in 0..n - 1 {
        let (p, _) = left[k].dims2()?;
        let next = contract(&left[k], &as3(k)?, 1)?;
        left.push(next.reshape(vec![p * sites[k], ranks[k + 1]])?);
    }
    // right[k]: [ranks[k + 1], prod sites[k + 1..]]
    let mut right = vec![DenseTensor::matrix(1, 1, vec![T::one()])?; n];
    for k in (0..n - 1).rev() {
        let (_, q) = right[k + 1].dims2()?;
        let next = contract(&as3(k + 1)?, &right[k + 1], 1)?;
        right[k] = next.reshape(vec![ranks[k + 1], sites[k + 1] * q])?;
    }

    let g = g.into_data();
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let (p, _) = left[k].dims2()?;
        let (_, q) = right[k].dims2()?;
        let gk = DenseTensor::matrix(p, sites[k] * q, g.clone())?;
        let t = matmul_tn(&left[k], &gk)?.reshape(vec![ranks[k] * sites[k], q])?;
        let grad = matmul_nt(&t, &right[k])?;
        grads.push(grad.reshape(chain.cores()[k].shape().to_vec())?);
    }
    Ok(CoreGradients { grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpo::max_ranks;
    use crate::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(shape: &[usize], seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn shape3() -> MpoShape {
        MpoShape::new(vec![4, 4, 4], vec![4, 4, 4]).unwrap()
    }

    #[test]
    fn untruncated_init_has_zero_residual() {
        let w0 = gaussian(&[64, 64], 1);
        let a = dota_init(&w0, &shape3(), None).unwrap();
        assert_eq!(a.cores().ranks(), max_ranks(&shape3()));
        assert!(a.residual().matrix().frobenius_norm() / w0.frobenius_norm() <= 1e-12);
    }

    #[test]
    fn truncated_init_merges_to_w0() {
        let w0 = gaussian(&[64, 64], 2);
        let a = dota_init(&w0, &shape3(), Some(4)).unwrap();
        assert!(a.residual().matrix().frobenius_norm() > 0.1);
        assert!(relative_error(&a.merge().unwrap(), &w0).unwrap() <= 1e-12);
    }

    #[test]
    fn forward_at_init_matches_dense() {
        let w0 = gaussian(&[64, 64], 3);
        let a = dota_init(&w0, &shape3(), Some(8)).unwrap();
        let x = gaussian(&[5, 64], 4);
        let y = a.forward(&x).unwrap();
        assert!(relative_error(&y, &matmul(&x, &w0).unwrap()).unwrap() <= 1e-10);
        let zero = DenseTensor::zeros(vec![3, 64]).unwrap();
        assert!(a.forward(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let a = dota_init(&gaussian(&[64, 64], 5), &shape3(), Some(2)).unwrap();
        assert!(a.forward(&gaussian(&[2, 63], 6)).is_err());
        let x = gaussian(&[2, 64], 6);
        assert!(a.backward(&x, &gaussian(&[3, 64], 7)).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let a = dota_init(&gaussian(&[64, 64], 8), &shape3(), Some(4)).unwrap();
        let x = gaussian(&[4, 64], 9);
        let dy = DenseTensor::zeros(vec![4, 64]).unwrap();
        let out = a.backward(&x, &dy).unwrap();
        assert!(out.cores.grads().iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(out.dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_core_gradient_is_dense_gradient() {
        let w0 = gaussian(&[6, 5], 10);
        let shape = MpoShape::new(vec![6], vec![5]).unwrap();
        let a = dota_init(&w0, &shape, None).unwrap();
        let x = gaussian(&[3, 6], 11);
        let dy = gaussian(&[3, 5], 12);
        let out = a.backward(&x, &dy).unwrap();
        let expected = matmul_tn(&x, &dy).unwrap();
        assert_eq!(out.cores.grads()[0].shape(), &[1, 6, 5, 1]);
        assert!(relative_error(&out.cores.grads()[0].clone().reshape(vec![6, 5]).unwrap(), &expected).unwrap() < 1e-14);
    }

    #[test]
    fn frozen_residual_survives_training() {
        let w0 = gaussian(&[16, 16], 13);
        let shape = MpoShape::new(vec![4, 4], vec![4, 4]).unwrap();
        let mut a = dota_init(&w0, &shape, Some(2)).unwrap();
        let before: Vec<u64> = a.residual().matrix().data().iter().map(|v| v.to_bits()).collect();
        for s in 0..5 {
            let x = gaussian(&[4, 16], 20 + s);
            let dy = gaussian(&[4, 16], 40 + s);
            let g = a.backward(&x, &dy).unwrap();
            a.apply_gradients(&g.cores, 0.01).unwrap();
        }
        let after: Vec<u64> = a.residual().matrix().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert!(relative_error(&a.merge().unwrap(), &w0).unwrap() > 1e-6);
    }

    #[test]
    fn forward_is_linear() {
        let a = dota_init(&gaussian(&[64, 64], 14), &shape3(), Some(4)).unwrap();
        let x1 = gaussian(&[3, 64], 15);
        let x2 = gaussian(&[3, 64], 16);
        let alpha = 0.37;
        let lhs = a.forward(&x1.scale(alpha).add(&x2).unwrap()).unwrap();
        let rhs = a.forward(&x1).unwrap().scale(alpha).add(&a.forward(&x2).unwrap()).unwrap();
        assert!(relative_error(&lhs, &rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn dx_uses_effective_weight() {
        let w0 = gaussian(&[16, 16], 17);
        let shape = MpoShape::new(vec![4, 4], vec![4, 4]).unwrap();
        let a = dota_init(&w0, &shape, Some(3)).unwrap();
        let x = gaussian(&[2, 16], 18);
        let dy = gaussian(&[2, 16], 19);
        let dx = a.backward(&x, &dy).unwrap().dx;
        assert!(relative_error(&dx, &matmul_nt(&dy, &w0).unwrap()).unwrap() < 1e-12);
    }
}
