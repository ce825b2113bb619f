//! Matrix-free curvature-vector products.
//!
//! Two curvature operators back the second-order optimizers, both applied
//! without ever materializing a matrix:
//!
//! - Gauss-Newton: `v -> sum_t J_t^T (∇²L_t (J_t v)) + lambda v`, the
//!   composition of the R-operator, a per-frame loss-Hessian action and the
//!   Jacobian-transpose pass, summed over a curvature batch of utterances.
//! - Empirical Fisher: `v -> scale * (1/R) sum_r g_r (g_r . v) + floor * v`
//!   built from per-utterance MMI gradients; rank at most R, so one apply
//!   costs R dot products and R axpys.
//!
//! The per-frame MBR loss Hessian `(kappa^2/R)[diag(ghat) - ghat gamma^T]`
//! is not symmetric as printed (`ghat != gamma` in general); conjugate
//! gradients needs a symmetric operator, so the default action uses the
//! symmetrized form `(M + M^T)/2`, which leaves the quadratic form
//! unchanged. The raw form stays available for diagnostics.

use rand::rngs::StdRng;

use crate::error::{Error, Result};
use crate::lattice::{forward_backward, mbr_utterance, mmi_utterance, UtteranceExample};
use crate::math::Mat;
use crate::tensor_net::{
    backward, forward, rop, rop_transpose, ActivationRecord, Network, ParameterVector,
};

/// A symmetric positive (semi-)definite linear map on parameter space.
pub trait CurvatureOp {
    fn dim(&self) -> usize;
    fn apply(&self, v: &ParameterVector) -> Result<ParameterVector>;
}

/// A curvature operator with an adjustable damping parameter, so an
/// optimizer can raise `lambda` and retry after a CG abort without
/// rebuilding the cached batch state. For Gauss-Newton `lambda` is the
/// additive Tikhonov term; for the empirical Fisher it scales the metric.
pub trait DampedCurvature: CurvatureOp {
    fn lambda(&self) -> f64;
    fn set_lambda(&mut self, lambda: f64);
    /// Utterances behind this operator (0 for synthetic/dense operators).
    fn curvature_batch_size(&self) -> usize {
        0
    }
}

/// Which per-frame loss Hessian the Gauss-Newton product uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossHessianMode {
    /// MBR Hessian, symmetrized (the default for MPE/sMBR training).
    Mbr,
    /// MBR Hessian exactly as printed; diagnostic only, not symmetric.
    MbrRaw,
    /// MMI Hessian `diag(gamma) - gamma gamma^T` (symmetric by form).
    Mmi,
    /// Frame-level cross-entropy Hessian `diag(y) - y y^T` with softmax
    /// outputs `y`, scaled by the total frame count. Frame-local, so on a
    /// linear network the GN product is the exact Hessian.
    Ce,
    /// Identity: turns the product into plain `J^T J v`; diagnostic only.
    Identity,
}

/// Action of the per-frame loss Hessian on a `D_out` vector, never
/// materializing the matrix.
///
/// With `ghat = gamma ⊙ (L̆ - c_avg)` from the MBR auxiliary output, the
/// symmetrized action is
/// `(kappa^2/R) [ghat ⊙ u - (ghat (gamma.u) + gamma (ghat.u)) / 2]`;
/// the raw action keeps only the `ghat (gamma.u)` cross term.
pub fn loss_hessian_apply(
    gamma: &[f64],
    gamma_hat: &[f64],
    kappa: f64,
    r_count: usize,
    u: &[f64],
    symmetrized: bool,
) -> Result<Vec<f64>> {
    let d = u.len();
    if gamma.len() != d || gamma_hat.len() != d {
        return Err(Error::usage(format!(
            "loss_hessian_apply dimension mismatch: gamma {}, gamma_hat {}, u {}",
            gamma.len(),
            gamma_hat.len(),
            d
        )));
    }
    if r_count == 0 {
        return Err(Error::usage("loss_hessian_apply needs r_count >= 1"));
    }
    let scale = kappa * kappa / r_count as f64;
    let gu = crate::math::dot(gamma, u);
    let gh_u = crate::math::dot(gamma_hat, u);
    let mut out = vec![0.0; d];
    if symmetrized {
        for i in 0..d {
            out[i] = scale * (gamma_hat[i] * u[i] - 0.5 * (gamma_hat[i] * gu + gamma[i] * gh_u));
        }
    } else {
        for i in 0..d {
            out[i] = scale * (gamma_hat[i] * u[i] - gamma_hat[i] * gu);
        }
    }
    Ok(out)
}

/// Gauss-Newton operator over a cached curvature batch.
pub struct GnOperator {
    net: Network,
    theta: ParameterVector,
    records: Vec<ActivationRecord>,
    gammas: Vec<Mat>,
    gamma_hats: Vec<Mat>,
    kappa: f64,
    lambda: f64,
    mode: LossHessianMode,
    /// Divisor of the per-frame Hessian: the utterance count, except for CE
    /// where the criterion averages over frames.
    hessian_count: usize,
}

impl GnOperator {
    /// Runs the forward passes and the lattice statistics for the curvature
    /// batch under the current parameters. For the MBR modes the lattices
    /// must carry local-loss annotations.
    pub fn build(
        net: &Network,
        theta: &ParameterVector,
        curvature_batch: &[&UtteranceExample],
        kappa: f64,
        lambda: f64,
        mode: LossHessianMode,
    ) -> Result<Self> {
        if curvature_batch.is_empty() {
            return Err(Error::usage("curvature batch must be non-empty"));
        }
        if lambda < 0.0 {
            return Err(Error::config("damping lambda must be non-negative"));
        }
        let mut records = Vec::with_capacity(curvature_batch.len());
        let mut gammas = Vec::with_capacity(curvature_batch.len());
        let mut gamma_hats = Vec::with_capacity(curvature_batch.len());
        let mut total_frames = 0;
        for example in curvature_batch {
            let record = forward(net, theta, &example.frames)?;
            total_frames += record.num_frames();
            match mode {
                LossHessianMode::Mbr | LossHessianMode::MbrRaw => {
                    let crit = mbr_utterance(example, record.output(), kappa)?;
                    gamma_hats.push(crit.aux.gamma_hat.expect("mbr aux carries gamma_hat"));
                    gammas.push(crit.aux.gamma);
                }
                LossHessianMode::Mmi => {
                    let post = forward_backward(&example.denominator, record.output(), kappa)?;
                    gamma_hats.push(post.gamma.clone());
                    gammas.push(post.gamma);
                }
                LossHessianMode::Ce => {
                    let mut probs = record.output().clone();
                    for t in 0..probs.rows() {
                        crate::math::softmax_row(probs.row_mut(t));
                    }
                    gamma_hats.push(probs.clone());
                    gammas.push(probs);
                }
                LossHessianMode::Identity => {
                    let d = record.output().cols();
                    let t = record.output().rows();
                    gammas.push(Mat::zeros(t, d));
                    gamma_hats.push(Mat::zeros(t, d));
                }
            }
            records.push(record);
        }
        let hessian_count = match mode {
            LossHessianMode::Ce => total_frames,
            _ => curvature_batch.len(),
        };
        // CE is a frame-level criterion: kappa never enters it.
        let kappa = match mode {
            LossHessianMode::Ce => 1.0,
            _ => kappa,
        };
        Ok(GnOperator {
            net: net.clone(),
            theta: theta.clone(),
            records,
            gammas,
            gamma_hats,
            kappa,
            lambda,
            mode,
            hessian_count,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.records.len()
    }
}

impl DampedCurvature for GnOperator {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn curvature_batch_size(&self) -> usize {
        self.records.len()
    }
}

impl CurvatureOp for GnOperator {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn apply(&self, v: &ParameterVector) -> Result<ParameterVector> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!(
                "curvature apply: vector length {} vs parameter count {}",
                v.len(),
                self.dim()
            )));
        }
        let r_count = self.hessian_count;
        let mut out = ParameterVector::zeros(self.dim());
        for (r, record) in self.records.iter().enumerate() {
            let jv = rop(&self.net, &self.theta, record, v)?;
            let t_frames = jv.rows();
            let d_out = jv.cols();
            let mut transformed = Mat::zeros(t_frames, d_out);
            for t in 0..t_frames {
                let row = match self.mode {
                    LossHessianMode::Identity => jv.row(t).to_vec(),
                    LossHessianMode::MbrRaw => loss_hessian_apply(
                        self.gammas[r].row(t),
                        self.gamma_hats[r].row(t),
                        self.kappa,
                        r_count,
                        jv.row(t),
                        false,
                    )?,
                    LossHessianMode::Mbr | LossHessianMode::Mmi | LossHessianMode::Ce => {
                        loss_hessian_apply(
                            self.gammas[r].row(t),
                            self.gamma_hats[r].row(t),
                            self.kappa,
                            r_count,
                            jv.row(t),
                            true,
                        )?
                    }
                };
                transformed.row_mut(t).copy_from_slice(&row);
            }
            let jtu = rop_transpose(&self.net, &self.theta, record, &transformed)?;
            out.axpy(1.0, &jtu);
        }
        out.axpy(self.lambda, v);
        Ok(out)
    }
}

/// Empirical-Fisher action with additive damping:
/// `(1/R) sum_r g_r (g_r . v) + lambda v`.
pub fn fisher_apply(
    grads: &[ParameterVector],
    lambda: f64,
    v: &ParameterVector,
) -> Result<ParameterVector> {
    if grads.is_empty() {
        return Err(Error::usage("fisher_apply needs at least one gradient"));
    }
    let dim = v.len();
    let mut out = v.scaled(lambda);
    let r = grads.len() as f64;
    for g in grads {
        if g.len() != dim {
            return Err(Error::shape("fisher gradient length mismatch"));
        }
        out.axpy(g.dot(v) / r, g);
    }
    Ok(out)
}

/// One parameter-space MMI gradient per utterance (unscaled by 1/R):
/// `g_r = grad log P(H^r | O^r)`.
pub fn build_fisher_gradients(
    net: &Network,
    theta: &ParameterVector,
    curvature_batch: &[&UtteranceExample],
    kappa: f64,
) -> Result<Vec<ParameterVector>> {
    let mut grads = Vec::with_capacity(curvature_batch.len());
    for example in curvature_batch {
        let record = forward(net, theta, &example.frames)?;
        let crit = mmi_utterance(example, record.output(), kappa)?;
        grads.push(backward(net, theta, &record, &crit.activation_gradient)?);
    }
    Ok(grads)
}

/// Empirical-Fisher operator in the trust-region parameterization
/// `B = lambda * I_hat + eps_floor * I`: `lambda` scales the Fisher metric
/// itself while a tiny identity floor keeps the operator strictly positive
/// definite off the gradient span.
pub struct FisherOperator {
    grads: Vec<ParameterVector>,
    dim: usize,
    lambda: f64,
    eps_floor: f64,
}

pub const FISHER_EPS_FLOOR: f64 = 1e-8;

impl FisherOperator {
    pub fn build(
        net: &Network,
        theta: &ParameterVector,
        curvature_batch: &[&UtteranceExample],
        kappa: f64,
        lambda: f64,
        eps_floor: f64,
    ) -> Result<Self> {
        if curvature_batch.is_empty() {
            return Err(Error::usage("curvature batch must be non-empty"));
        }
        if lambda < 0.0 || eps_floor < 0.0 {
            return Err(Error::config("fisher damping terms must be non-negative"));
        }
        let grads = build_fisher_gradients(net, theta, curvature_batch, kappa)?;
        Ok(FisherOperator {
            dim: theta.len(),
            grads,
            lambda,
            eps_floor,
        })
    }

    pub fn from_gradients(
        grads: Vec<ParameterVector>,
        lambda: f64,
        eps_floor: f64,
    ) -> Result<Self> {
        let dim = grads
            .first()
            .map(ParameterVector::len)
            .ok_or_else(|| Error::usage("fisher operator needs at least one gradient"))?;
        Ok(FisherOperator {
            dim,
            grads,
            lambda,
            eps_floor,
        })
    }

    pub fn gradients(&self) -> &[ParameterVector] {
        &self.grads
    }
}

impl DampedCurvature for FisherOperator {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn curvature_batch_size(&self) -> usize {
        self.grads.len()
    }
}

impl CurvatureOp for FisherOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &ParameterVector) -> Result<ParameterVector> {
        let mut out = fisher_apply(&self.grads, 0.0, v)?;
        out.scale(self.lambda);
        out.axpy(self.eps_floor, v);
        Ok(out)
    }
}

/// Per-update curvature subsample: uniform without replacement, at least
/// `floor` utterances (capped at the pool size), returned in ascending
/// order so downstream reductions stay deterministic.
pub fn sample_curvature_batch(
    rng: &mut StdRng,
    pool_size: usize,
    fraction: f64,
    floor: usize,
) -> Result<Vec<usize>> {
    if pool_size == 0 {
        return Err(Error::usage("cannot sample from an empty pool"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("curvature fraction must lie in [0, 1]"));
    }
    let want = ((fraction * pool_size as f64).ceil() as usize)
        .max(floor)
        .min(pool_size);
    let mut picked = rand::seq::index::sample(rng, pool_size, want).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
