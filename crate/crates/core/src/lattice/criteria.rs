//! MMI and MBR sequence criteria over lattices.
//!
//! Sign conventions: `mmi_criterion` returns the average log posterior of
//! the reference paths (non-positive), which training *maximizes* — the
//! optimizers uniformly minimize its negation. `mbr_criterion` returns the
//! average expected loss (non-negative for non-negative local losses),
//! which is minimized as-is.

use crate::error::{Error, Result};
use crate::math::{Mat, LOG_ZERO};

use super::{forward_backward, Lattice, LossLevel, PosteriorSet, UtteranceExample};

/// Per-utterance by-products of a criterion evaluation, kept for the
/// curvature module (Gauss-Newton loss Hessian) and diagnostics.
#[derive(Debug, Clone)]
pub struct CriterionAux {
    /// Denominator occupancies, `T x D_out`.
    pub gamma: Mat,
    /// Loss-weighted occupancies `gamma ⊙ (L̆ - c_avg)`; MBR only.
    pub gamma_hat: Option<Mat>,
    /// Posterior-averaged total path loss; MBR only.
    pub avg_loss: Option<f64>,
    /// Log partition value of the denominator lattice.
    pub log_z: f64,
}

/// Batch criterion value, its gradient with respect to the linear output
/// activations of every utterance, and per-utterance auxiliaries.
#[derive(Debug, Clone)]
pub struct CriterionOutput {
    pub value: f64,
    pub activation_gradient: Vec<Mat>,
    pub auxiliary: Vec<CriterionAux>,
}

/// Single-utterance criterion value/gradient, unscaled by the batch size.
#[derive(Debug, Clone)]
pub struct UtteranceCriterion {
    pub value: f64,
    pub activation_gradient: Mat,
    pub aux: CriterionAux,
}

/// MMI for one utterance: `log P(H^r|O^r) = kappa*score(num) - log Z`.
/// The activation gradient is `kappa * (gamma_num - gamma_den)` with the
/// numerator occupancy being the reference path's one-hot states.
pub fn mmi_utterance(
    example: &UtteranceExample,
    activations: &Mat,
    kappa: f64,
) -> Result<UtteranceCriterion> {
    let lat = &example.denominator;
    let post = forward_backward(lat, activations, kappa)?;
    let num_score: f64 = example
        .numerator
        .arc_ids()
        .iter()
        .map(|&a| post.log_score[a])
        .sum();
    let value = num_score - post.log_z;

    let mut grad = Mat::zeros(lat.num_frames(), activations.cols());
    for t in 0..lat.num_frames() {
        let ref_state = example.numerator.frame_states()[t];
        for i in 0..activations.cols() {
            let num_occ = if i == ref_state { 1.0 } else { 0.0 };
            grad[(t, i)] = kappa * (num_occ - post.gamma[(t, i)]);
        }
    }
    Ok(UtteranceCriterion {
        value,
        activation_gradient: grad,
        aux: CriterionAux {
            gamma: post.gamma,
            gamma_hat: None,
            avg_loss: None,
            log_z: post.log_z,
        },
    })
}

/// Batch MMI criterion, averaged over utterances in index order.
pub fn mmi_criterion(
    batch: &[UtteranceExample],
    activations: &[&Mat],
    kappa: f64,
) -> Result<CriterionOutput> {
    if batch.is_empty() {
        return Err(Error::usage("mmi_criterion needs a non-empty batch"));
    }
    if batch.len() != activations.len() {
        return Err(Error::shape("one activation matrix per utterance required"));
    }
    let r = batch.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    let mut auxes = Vec::with_capacity(batch.len());
    for (example, act) in batch.iter().zip(activations) {
        let mut one = mmi_utterance(example, act, kappa)?;
        value += one.value / r;
        for g in one.activation_gradient.data_mut() {
            *g /= r;
        }
        grads.push(one.activation_gradient);
        auxes.push(one.aux);
    }
    Ok(CriterionOutput {
        value,
        activation_gradient: grads,
        auxiliary: auxes,
    })
}

/// Expected-loss statistics of one annotated lattice under a posterior set.
///
/// For every arc `q` this computes the posterior-conditioned expected total
/// path loss `c_q` of complete paths through `q`, via two ratio recursions
/// that stay in the linear loss domain (the underlying path weights stay in
/// the log domain):
///
/// - forward: `inloss_q = L_q + sum_r w_rq * inloss_r` with predecessor
///   weights `w_rq = exp(log_alpha_r + log_score_q - log_alpha_q)`,
/// - backward: `outloss_q = sum_s w_qs * (L_s + outloss_s)` with successor
///   weights `w_qs = exp(log_score_s + log_beta_s - log_beta_q)`,
///
/// and `c_q = inloss_q + outloss_q`.
fn expected_loss_stats(lat: &Lattice, post: &PosteriorSet) -> Result<(Vec<f64>, f64)> {
    let n_arcs = lat.arcs().len();
    let losses: Vec<f64> = lat
        .arcs()
        .iter()
        .enumerate()
        .map(|(id, arc)| {
            arc.local_loss
                .ok_or_else(|| Error::data(format!("arc {id} is missing its local loss")))
        })
        .collect::<Result<_>>()?;

    let mut inloss = vec![0.0; n_arcs];
    for &a in &lat.topo_arcs {
        if post.log_alpha[a] == LOG_ZERO {
            continue;
        }
        let arc = lat.arc(a);
        let mut acc = losses[a];
        if arc.src != lat.start() {
            for &p in lat.in_arcs(arc.src) {
                if post.log_alpha[p] == LOG_ZERO {
                    continue;
                }
                let w = (post.log_alpha[p] + post.log_score[a] - post.log_alpha[a]).exp();
                acc += w * inloss[p];
            }
        }
        inloss[a] = acc;
    }

    let mut outloss = vec![0.0; n_arcs];
    for &a in lat.topo_arcs.iter().rev() {
        if post.log_beta[a] == LOG_ZERO {
            continue;
        }
        let arc = lat.arc(a);
        if arc.dst == lat.end() {
            continue;
        }
        let mut acc = 0.0;
        for &s in lat.out_arcs(arc.dst) {
            if post.log_beta[s] == LOG_ZERO {
                continue;
            }
            let w = (post.log_score[s] + post.log_beta[s] - post.log_beta[a]).exp();
            acc += w * (losses[s] + outloss[s]);
        }
        outloss[a] = acc;
    }

    let mut avg_loss = 0.0;
    for &a in lat.in_arcs(lat.end()) {
        if post.log_alpha[a] == LOG_ZERO {
            continue;
        }
        avg_loss += (post.log_alpha[a] - post.log_z).exp() * inloss[a];
    }

    let c: Vec<f64> = (0..n_arcs).map(|a| inloss[a] + outloss[a]).collect();
    Ok((c, avg_loss))
}

/// MBR for one utterance: expected total loss under the path posterior.
/// The activation gradient at frame `t`, state `i` is
/// `kappa * gamma_t(i) * (L̆_t(i) - c_avg)`.
pub fn mbr_utterance(
    example: &UtteranceExample,
    activations: &Mat,
    kappa: f64,
) -> Result<UtteranceCriterion> {
    let lat = &example.denominator;
    let post = forward_backward(lat, activations, kappa)?;
    let (c, avg_loss) = expected_loss_stats(lat, &post)?;

    let mut gamma_hat = Mat::zeros(lat.num_frames(), activations.cols());
    for (a, &c_a) in c.iter().enumerate() {
        let p = post.arc_posterior(a);
        if p == 0.0 {
            continue;
        }
        let t0 = lat.arc_start_time(a);
        let weighted = p * (c_a - avg_loss);
        for (k, &label) in lat.arc(a).labels.iter().enumerate() {
            gamma_hat[(t0 + k, label)] += weighted;
        }
    }
    let mut grad = gamma_hat.clone();
    for g in grad.data_mut() {
        *g *= kappa;
    }
    Ok(UtteranceCriterion {
        value: avg_loss,
        activation_gradient: grad,
        aux: CriterionAux {
            gamma: post.gamma,
            gamma_hat: Some(gamma_hat),
            avg_loss: Some(avg_loss),
            log_z: post.log_z,
        },
    })
}

/// Batch MBR criterion at the requested loss level; lattices must have been
/// annotated at that level.
pub fn mbr_criterion(
    batch: &[UtteranceExample],
    activations: &[&Mat],
    kappa: f64,
    level: LossLevel,
) -> Result<CriterionOutput> {
    if batch.is_empty() {
        return Err(Error::usage("mbr_criterion needs a non-empty batch"));
    }
    if batch.len() != activations.len() {
        return Err(Error::shape("one activation matrix per utterance required"));
    }
    for (i, example) in batch.iter().enumerate() {
        match example.denominator.loss_level() {
            Some(have) if have == level => {}
            Some(have) => {
                return Err(Error::data(format!(
                    "utterance {i} is annotated at {have} level, criterion requested {level}"
                )))
            }
            None => {
                return Err(Error::data(format!(
                    "utterance {i} has no local-loss annotation"
                )))
            }
        }
    }
    let r = batch.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    let mut auxes = Vec::with_capacity(batch.len());
    for (example, act) in batch.iter().zip(activations) {
        let mut one = mbr_utterance(example, act, kappa)?;
        value += one.value / r;
        for g in one.activation_gradient.data_mut() {
            *g /= r;
        }
        grads.push(one.activation_gradient);
        auxes.push(one.aux);
    }
    Ok(CriterionOutput {
        value,
        activation_gradient: grads,
        auxiliary: auxes,
    })
}
