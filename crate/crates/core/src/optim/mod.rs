//! The four optimizers — SGD, Hessian-Free, DSAG-HF and Natural Gradient —
//! built on one conjugate-gradient solver.
//!
//! All second-order methods share one update skeleton: evaluate the batch
//! loss and gradient, build a damped curvature operator on a per-update
//! curvature subsample, solve `B delta = -grad` with gradient-initialized
//! CG, adapt the damping by a Levenberg-Marquardt reduction-ratio rule, and
//! accept the step only if the batch criterion does not increase (halving
//! it up to `max_backtracks` times first). Rejected or aborted updates
//! leave the parameters untouched and are recorded as such, which makes
//! per-update monotonicity of the batch criterion an enforced property.
//!
//! MMI is a maximization criterion; the optimizers minimize its negation,
//! so `Objective` presents every criterion in minimization form.

mod cg;

pub use cg::{cg_solve, CgConfig, CgInit, CgResult};

use std::time::Instant;

use rand::rngs::StdRng;

use crate::curvature::{
    sample_curvature_batch, DampedCurvature, FisherOperator, GnOperator, LossHessianMode,
    FISHER_EPS_FLOOR,
};
use crate::error::{Error, Result};
use crate::lattice::{mbr_utterance, mmi_utterance, LossLevel, UtteranceExample};
use crate::math::{symmetric_eigen, Mat};
use crate::tensor_net::{backward, forward, Network, ParameterVector};

/// Which sequence criterion a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriterionKind {
    Mmi,
    Mpe,
    Smbr,
}

impl CriterionKind {
    /// Loss annotation level the criterion needs, if any.
    pub fn loss_level(self) -> Option<LossLevel> {
        match self {
            CriterionKind::Mmi => None,
            CriterionKind::Mpe => Some(LossLevel::Phone),
            CriterionKind::Smbr => Some(LossLevel::State),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Mmi => "mmi",
            CriterionKind::Mpe => "mpe",
            CriterionKind::Smbr => "smbr",
        }
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmi" => Ok(CriterionKind::Mmi),
            "mpe" => Ok(CriterionKind::Mpe),
            "smbr" => Ok(CriterionKind::Smbr),
            other => Err(Error::config(format!("unknown criterion `{other}`"))),
        }
    }
}

/// A sequence objective in minimization form over a fixed example pool.
/// Batch evaluations reduce over utterances in the given index order, so a
/// sorted index list gives reproducible sums.
pub struct Objective<'a> {
    examples: &'a [UtteranceExample],
    criterion: CriterionKind,
    kappa: f64,
}

impl<'a> Objective<'a> {
    pub fn new(
        examples: &'a [UtteranceExample],
        criterion: CriterionKind,
        kappa: f64,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::usage("objective needs at least one example"));
        }
        if kappa <= 0.0 {
            return Err(Error::config("kappa must be positive"));
        }
        if let Some(level) = criterion.loss_level() {
            for (i, example) in examples.iter().enumerate() {
                if example.denominator.loss_level() != Some(level) {
                    return Err(Error::data(format!(
                        "utterance {i} lacks {level}-level loss annotation required by {}",
                        criterion.name()
                    )));
                }
            }
        }
        Ok(Objective {
            examples,
            criterion,
            kappa,
        })
    }

    pub fn examples(&self) -> &[UtteranceExample] {
        self.examples
    }

    pub fn criterion(&self) -> CriterionKind {
        self.criterion
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::usage("batch index list is empty"));
        }
        if indices.iter().any(|&i| i >= self.examples.len()) {
            return Err(Error::usage("batch index out of range"));
        }
        Ok(())
    }

    /// Batch loss (minimization sign) averaged over the indexed utterances.
    pub fn batch_loss(
        &self,
        net: &Network,
        theta: &ParameterVector,
        indices: &[usize],
    ) -> Result<f64> {
        self.check_indices(indices)?;
        let r = indices.len() as f64;
        let mut total = 0.0;
        for &i in indices {
            let example = &self.examples[i];
            let record = forward(net, theta, &example.frames)?;
            let value = match self.criterion {
                CriterionKind::Mmi => -mmi_utterance(example, record.output(), self.kappa)?.value,
                CriterionKind::Mpe | CriterionKind::Smbr => {
                    mbr_utterance(example, record.output(), self.kappa)?.value
                }
            };
            total += value / r;
        }
        Ok(total)
    }

    /// Batch loss and its parameter-space gradient (minimization sign).
    pub fn batch_loss_and_gradient(
        &self,
        net: &Network,
        theta: &ParameterVector,
        indices: &[usize],
    ) -> Result<(f64, ParameterVector)> {
        self.check_indices(indices)?;
        let r = indices.len() as f64;
        let mut total = 0.0;
        let mut grad = ParameterVector::zeros(net.param_count());
        for &i in indices {
            let example = &self.examples[i];
            let record = forward(net, theta, &example.frames)?;
            let (value, mut act_grad) = match self.criterion {
                CriterionKind::Mmi => {
                    let crit = mmi_utterance(example, record.output(), self.kappa)?;
                    let mut g = crit.activation_gradient;
                    for v in g.data_mut() {
                        *v = -*v;
                    }
                    (-crit.value, g)
                }
                CriterionKind::Mpe | CriterionKind::Smbr => {
                    let crit = mbr_utterance(example, record.output(), self.kappa)?;
                    (crit.value, crit.activation_gradient)
                }
            };
            for v in act_grad.data_mut() {
                *v /= r;
            }
            total += value / r;
            let g = backward(net, theta, &record, &act_grad)?;
            grad.axpy(1.0, &g);
        }
        Ok((total, grad))
    }
}

/// Anything a second-order update needs from the function being minimized.
pub trait OptimizationProblem {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &ParameterVector) -> Result<f64>;
    fn loss_and_gradient(&self, theta: &ParameterVector) -> Result<(f64, ParameterVector)>;
    /// Builds the damped curvature operator at `theta` (sampling any
    /// curvature batch from `rng`).
    fn build_curvature(
        &self,
        theta: &ParameterVector,
        lambda: f64,
        rng: &mut StdRng,
    ) -> Result<Box<dyn DampedCurvature>>;
}

/// Which curvature backs the quadratic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureKind {
    GaussNewton,
    EmpiricalFisher,
}

/// A sequence-training batch as an optimization problem: the loss and
/// gradient come from `batch`, the curvature from a fresh per-update
/// subsample of the whole example pool.
pub struct SequenceProblem<'a> {
    pub net: &'a Network,
    pub objective: &'a Objective<'a>,
    pub batch: &'a [usize],
    pub curvature_kind: CurvatureKind,
    pub curvature_fraction: f64,
    pub curvature_floor: usize,
}

impl SequenceProblem<'_> {
    fn loss_hessian_mode(&self) -> LossHessianMode {
        match self.objective.criterion() {
            CriterionKind::Mmi => LossHessianMode::Mmi,
            CriterionKind::Mpe | CriterionKind::Smbr => LossHessianMode::Mbr,
        }
    }
}

impl OptimizationProblem for SequenceProblem<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn loss(&self, theta: &ParameterVector) -> Result<f64> {
        self.objective.batch_loss(self.net, theta, self.batch)
    }

    fn loss_and_gradient(&self, theta: &ParameterVector) -> Result<(f64, ParameterVector)> {
        self.objective
            .batch_loss_and_gradient(self.net, theta, self.batch)
    }

    fn build_curvature(
        &self,
        theta: &ParameterVector,
        lambda: f64,
        rng: &mut StdRng,
    ) -> Result<Box<dyn DampedCurvature>> {
        let picked = sample_curvature_batch(
            rng,
            self.objective.num_examples(),
            self.curvature_fraction,
            self.curvature_floor,
        )?;
        let refs: Vec<&UtteranceExample> = picked
            .iter()
            .map(|&i| &self.objective.examples()[i])
            .collect();
        match self.curvature_kind {
            CurvatureKind::GaussNewton => Ok(Box::new(GnOperator::build(
                self.net,
                theta,
                &refs,
                self.objective.kappa(),
                lambda,
                self.loss_hessian_mode(),
            )?)),
            CurvatureKind::EmpiricalFisher => Ok(Box::new(FisherOperator::build(
                self.net,
                theta,
                &refs,
                self.objective.kappa(),
                lambda,
                FISHER_EPS_FLOOR,
            )?)),
        }
    }
}

/// Configuration shared by the HF-family and NG updates.
#[derive(Debug, Clone)]
pub struct SecondOrderConfig {
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub cg_max_iters: usize,
    pub cg_residual_tol: f64,
    /// Gradient-batch size in utterances; 0 means "a quarter of the
    /// training set" (resolved by the harness).
    pub batch_size: usize,
    pub curvature_fraction: f64,
    pub curvature_floor: usize,
    pub max_backtracks: usize,
}

impl SecondOrderConfig {
    /// HF defaults: 5 CG iterations (more was not found to help).
    pub fn hf_default() -> Self {
        SecondOrderConfig {
            lambda_init: 1.0,
            lambda_min: 1e-8,
            lambda_max: 1e8,
            cg_max_iters: 5,
            cg_residual_tol: 1e-3,
            batch_size: 0,
            curvature_fraction: 0.01,
            curvature_floor: 4,
            max_backtracks: 3,
        }
    }

    /// NG defaults: a first-order direction needs slightly more CG work,
    /// and the trust region starts tight (large lambda) so the first steps
    /// are accepted; the reduction-ratio rule relaxes it from there. The
    /// curvature floor stays above the CG budget: the empirical Fisher has
    /// rank at most the curvature batch size, and once CG's Krylov space
    /// exhausts that rank the remaining iterations resolve the tiny
    /// identity floor exactly, blowing the step up along every direction
    /// the gradient sample never saw.
    pub fn ng_default() -> Self {
        SecondOrderConfig {
            cg_max_iters: 8,
            lambda_init: 100.0,
            curvature_floor: 16,
            ..SecondOrderConfig::hf_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_init < 0.0 || self.lambda_min < 0.0 || self.lambda_max < self.lambda_min {
            return Err(Error::config("bad lambda damping bounds"));
        }
        if self.cg_max_iters == 0 || self.cg_residual_tol <= 0.0 {
            return Err(Error::config("bad CG budget"));
        }
        if !(0.0..=1.0).contains(&self.curvature_fraction) {
            return Err(Error::config("curvature fraction must lie in [0, 1]"));
        }
        if self.curvature_floor == 0 {
            return Err(Error::config("curvature floor must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Per-layer gradient-block norm ceiling.
    pub clip_threshold: f64,
    /// Utterances per minibatch.
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn default_config() -> Self {
        SgdConfig {
            learning_rate: 1e-4,
            clip_threshold: 1.0,
            batch_size: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.clip_threshold <= 0.0 || self.batch_size == 0 {
            return Err(Error::config(
                "sgd rates, thresholds and batch size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DsagConfig {
    pub base: SecondOrderConfig,
    /// Blend weight on the previous gradient estimate.
    pub mu: f64,
}

impl DsagConfig {
    pub fn default_config() -> Self {
        DsagConfig {
            base: SecondOrderConfig::hf_default(),
            mu: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::config("dsag blend weight mu must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-method optimizer configuration; exactly the fields the chosen
/// method needs exist, by construction.
#[derive(Debug, Clone)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Hf(SecondOrderConfig),
    DsagHf(DsagConfig),
    Ng(SecondOrderConfig),
}

impl OptimizerConfig {
    pub fn method_name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd(_) => "sgd",
            OptimizerConfig::Hf(_) => "hf",
            OptimizerConfig::DsagHf(_) => "dsag_hf",
            OptimizerConfig::Ng(_) => "ng",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(cfg) => cfg.validate(),
            OptimizerConfig::Hf(cfg) | OptimizerConfig::Ng(cfg) => cfg.validate(),
            OptimizerConfig::DsagHf(cfg) => cfg.validate(),
        }
    }
}

/// One optimizer update's log entry.
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    pub update_index: usize,
    pub criterion_before: f64,
    pub criterion_after: f64,
    pub step_norm: f64,
    pub lambda: f64,
    pub cg_iterations: usize,
    pub predicted_decrease: f64,
    pub rho: f64,
    pub backtracks: usize,
    pub accepted: bool,
    pub curvature_batch_size: usize,
    /// Extra whole-batch criterion evaluations (trial and backtrack steps).
    pub loss_evals: usize,
    pub wall_clock_s: f64,
}

impl UpdateRecord {
    fn unchanged(loss: f64, lambda: f64) -> Self {
        UpdateRecord {
            update_index: 0,
            criterion_before: loss,
            criterion_after: loss,
            step_norm: 0.0,
            lambda,
            cg_iterations: 0,
            predicted_decrease: 0.0,
            rho: 0.0,
            backtracks: 0,
            accepted: true,
            curvature_batch_size: 0,
            loss_evals: 0,
            wall_clock_s: 0.0,
        }
    }
}

/// Levenberg-Marquardt damping state carried across updates.
#[derive(Debug, Clone)]
pub struct DampingState {
    pub lambda: f64,
}

impl DampingState {
    pub fn new(lambda: f64) -> Self {
        DampingState { lambda }
    }
}

/// DSAG gradient-blend buffer (an EMA of the CG right-hand sides), reset at
/// epoch boundaries.
#[derive(Debug, Clone, Default)]
pub struct DsagState {
    blend: Option<ParameterVector>,
}

impl DsagState {
    pub fn new() -> Self {
        DsagState { blend: None }
    }

    pub fn reset(&mut self) {
        self.blend = None;
    }

    pub fn blend(&self) -> Option<&ParameterVector> {
        self.blend.as_ref()
    }
}

const RHO_SHRINK_THRESHOLD: f64 = 0.25;
const RHO_EXPAND_THRESHOLD: f64 = 0.75;
const LAMBDA_ADAPT_FACTOR: f64 = 1.5;
const CG_ABORT_LAMBDA_FACTOR: f64 = 10.0;

/// Shared HF/NG/DSAG-HF update body. Returns the new parameters, the
/// record, and the CG right-hand side (`-grad`) for blend bookkeeping.
fn second_order_step(
    problem: &dyn OptimizationProblem,
    theta: &ParameterVector,
    cfg: &SecondOrderConfig,
    damping: &mut DampingState,
    blend: Option<(&ParameterVector, f64)>,
    rng: &mut StdRng,
) -> Result<(ParameterVector, UpdateRecord, Option<ParameterVector>)> {
    cfg.validate()?;
    let started = Instant::now();
    let (loss_before, grad) = problem.loss_and_gradient(theta)?;
    if !loss_before.is_finite() {
        return Err(Error::numeric("batch criterion is not finite"));
    }
    let mut rhs = grad;
    for v in rhs.as_mut_slice() {
        *v = -*v;
    }
    if rhs.norm() == 0.0 {
        let mut record = UpdateRecord::unchanged(loss_before, damping.lambda);
        record.wall_clock_s = started.elapsed().as_secs_f64();
        return Ok((theta.clone(), record, Some(rhs)));
    }

    let mut op = problem.build_curvature(theta, damping.lambda, rng)?;
    let init = match blend {
        Some((previous, mu)) => CgInit::Blended {
            previous: previous.clone(),
            mu,
        },
        None => CgInit::Gradient,
    };
    let cg_cfg = CgConfig::new(cfg.cg_max_iters, cfg.cg_residual_tol, init)?;

    // One retry with tenfold damping after a non-SPD abort; a second abort
    // skips the update.
    let lambda_used = damping.lambda;
    let solve = match cg_solve(op.as_ref(), &rhs, &cg_cfg) {
        Ok(res) => Ok(res),
        Err(Error::NonSpdCurvature { .. }) => {
            damping.lambda = (damping.lambda * CG_ABORT_LAMBDA_FACTOR).min(cfg.lambda_max);
            op.set_lambda(damping.lambda);
            cg_solve(op.as_ref(), &rhs, &cg_cfg)
        }
        Err(e) => return Err(e),
    };
    let result = match solve {
        Ok(res) => res,
        Err(Error::NonSpdCurvature { .. }) => {
            let mut record = UpdateRecord::unchanged(loss_before, lambda_used);
            record.accepted = false;
            record.curvature_batch_size = op.curvature_batch_size();
            record.wall_clock_s = started.elapsed().as_secs_f64();
            return Ok((theta.clone(), record, Some(rhs)));
        }
        Err(e) => return Err(e),
    };

    let mut delta = result.delta.clone();
    let predicted = result.predicted_decrease();
    let mut trial = theta.clone();
    trial.axpy(1.0, &delta);
    let mut loss_trial = problem.loss(&trial)?;
    let mut loss_evals = 1;

    let rho = if predicted > 0.0 {
        (loss_before - loss_trial) / predicted
    } else {
        0.0
    };
    if rho > RHO_EXPAND_THRESHOLD {
        damping.lambda = (damping.lambda / LAMBDA_ADAPT_FACTOR).max(cfg.lambda_min);
    } else if rho < RHO_SHRINK_THRESHOLD {
        damping.lambda = (damping.lambda * LAMBDA_ADAPT_FACTOR).min(cfg.lambda_max);
    }

    let mut backtracks = 0;
    while loss_trial > loss_before && backtracks < cfg.max_backtracks {
        delta.scale(0.5);
        trial = theta.clone();
        trial.axpy(1.0, &delta);
        loss_trial = problem.loss(&trial)?;
        loss_evals += 1;
        backtracks += 1;
    }

    let accepted = loss_trial <= loss_before;
    let (theta_next, criterion_after, step_norm) = if accepted {
        let norm = delta.norm();
        (trial, loss_trial, norm)
    } else {
        (theta.clone(), loss_before, 0.0)
    };

    let record = UpdateRecord {
        update_index: 0,
        criterion_before: loss_before,
        criterion_after,
        step_norm,
        lambda: lambda_used,
        cg_iterations: result.iterations,
        predicted_decrease: predicted,
        rho,
        backtracks,
        accepted,
        curvature_batch_size: op.curvature_batch_size(),
        loss_evals,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((theta_next, record, Some(rhs)))
}

/// Hessian-Free update: Gauss-Newton curvature, gradient-initialized CG.
pub fn hf_update(
    problem: &dyn OptimizationProblem,
    theta: &ParameterVector,
    cfg: &SecondOrderConfig,
    damping: &mut DampingState,
    rng: &mut StdRng,
) -> Result<(ParameterVector, UpdateRecord)> {
    let (next, record, _) = second_order_step(problem, theta, cfg, damping, None, rng)?;
    Ok((next, record))
}

/// Natural-gradient update: identical skeleton, with the problem supplying
/// the scaled empirical-Fisher operator (built from per-utterance MMI
/// gradients regardless of the training criterion).
pub fn ng_update(
    problem: &dyn OptimizationProblem,
    theta: &ParameterVector,
    cfg: &SecondOrderConfig,
    damping: &mut DampingState,
    rng: &mut StdRng,
) -> Result<(ParameterVector, UpdateRecord)> {
    let (next, record, _) = second_order_step(problem, theta, cfg, damping, None, rng)?;
    Ok((next, record))
}

/// DSAG-HF update: HF with CG initialized along an exponential blend of
/// the current and previous gradient estimates. An empty buffer degrades
/// to a plain HF update; the buffer is refreshed after every update.
pub fn dsag_hf_update(
    problem: &dyn OptimizationProblem,
    theta: &ParameterVector,
    cfg: &DsagConfig,
    damping: &mut DampingState,
    state: &mut DsagState,
    rng: &mut StdRng,
) -> Result<(ParameterVector, UpdateRecord)> {
    cfg.validate()?;
    let blend = state.blend.as_ref().map(|b| (b, cfg.mu));
    let (next, record, rhs) = second_order_step(problem, theta, &cfg.base, damping, blend, rng)?;
    if let Some(rhs) = rhs {
        let new_blend = match state.blend.take() {
            Some(previous) => {
                let mut mixed = previous.scaled(cfg.mu);
                mixed.axpy(1.0 - cfg.mu, &rhs);
                mixed
            }
            None => rhs,
        };
        state.blend = Some(new_blend);
    }
    Ok((next, record))
}

/// Rescales each layer block whose norm exceeds `threshold` down to the
/// threshold; other blocks are untouched. Returns the number of clipped
/// blocks.
pub fn clip_per_layer(net: &Network, grad: &mut ParameterVector, threshold: f64) -> usize {
    let mut clipped = 0;
    for l in 0..net.num_transitions() {
        let range = net.layer_range(l);
        let block = &mut grad.as_mut_slice()[range];
        let norm = crate::math::norm2(block);
        if norm > threshold {
            let scale = threshold / norm;
            for v in block.iter_mut() {
                *v *= scale;
            }
            clipped += 1;
        }
    }
    clipped
}

/// Plain SGD update over whole-utterance minibatches with per-layer
/// gradient clipping.
pub fn sgd_update(
    net: &Network,
    objective: &Objective<'_>,
    theta: &ParameterVector,
    minibatch: &[usize],
    cfg: &SgdConfig,
) -> Result<(ParameterVector, UpdateRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let (loss_before, mut grad) = objective.batch_loss_and_gradient(net, theta, minibatch)?;
    clip_per_layer(net, &mut grad, cfg.clip_threshold);
    let mut theta_next = theta.clone();
    theta_next.axpy(-cfg.learning_rate, &grad);
    let loss_after = objective.batch_loss(net, &theta_next, minibatch)?;
    Ok((
        theta_next,
        UpdateRecord {
            update_index: 0,
            criterion_before: loss_before,
            criterion_after: loss_after,
            step_norm: cfg.learning_rate * grad.norm(),
            lambda: 0.0,
            cg_iterations: 0,
            predicted_decrease: 0.0,
            rho: 0.0,
            backtracks: 0,
            accepted: true,
            curvature_batch_size: 0,
            loss_evals: 1,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Update reconstructed in the eigenbasis of an explicit curvature matrix:
/// `delta = sum_i (1/mu_i) (v_i . grad) v_i`, together with the spectrum.
/// Diagnostic for tiny problems; matches a fully converged CG solve.
#[derive(Debug, Clone)]
pub struct EigenDiagnostic {
    pub delta: ParameterVector,
    pub eigenvalues: Vec<f64>,
}

pub fn eigen_diagnostic(matrix: &Mat, grad: &ParameterVector) -> Result<EigenDiagnostic> {
    let n = matrix.rows();
    if matrix.cols() != n || grad.len() != n {
        return Err(Error::usage(
            "eigen_diagnostic expects a square matrix matching grad",
        ));
    }
    if n > 200 {
        return Err(Error::usage("eigen_diagnostic is limited to dimension 200"));
    }
    if matrix.asymmetry() > 1e-8 {
        return Err(Error::usage(format!(
            "eigen_diagnostic input asymmetry {:.3e} exceeds 1e-8",
            matrix.asymmetry()
        )));
    }
    let (eigenvalues, vectors) = symmetric_eigen(matrix)?;
    let scale = eigenvalues.first().map(|v| v.abs()).unwrap_or(0.0);
    if eigenvalues.iter().any(|&ev| ev <= 1e-12 * scale.max(1.0)) {
        return Err(Error::usage(
            "eigen_diagnostic needs a positive definite matrix",
        ));
    }
    let mut delta = ParameterVector::zeros(n);
    for (k, &ev) in eigenvalues.iter().enumerate() {
        let v: Vec<f64> = (0..n).map(|r| vectors[(r, k)]).collect();
        let coeff = crate::math::dot(&v, grad.as_slice()) / ev;
        crate::math::axpy(delta.as_mut_slice(), coeff, &v);
    }
    Ok(EigenDiagnostic { delta, eigenvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sample_standard_normal;
    use crate::oracle::DenseOperator;
    use rand::SeedableRng;

    /// `f(x) = x.Ax/2 - b.x` with the exact Hessian as curvature.
    struct QuadraticProblem {
        a: Mat,
        b: ParameterVector,
        /// When set, the reported gradient points the wrong way; used to
        /// exercise the backtracking/rejection path.
        lie_about_gradient: bool,
    }

    impl OptimizationProblem for QuadraticProblem {
        fn dim(&self) -> usize {
            self.b.len()
        }

        fn loss(&self, theta: &ParameterVector) -> Result<f64> {
            let ax = self.a.mat_vec(theta.as_slice());
            Ok(0.5 * crate::math::dot(theta.as_slice(), &ax) - self.b.dot(theta))
        }

        fn loss_and_gradient(&self, theta: &ParameterVector) -> Result<(f64, ParameterVector)> {
            let ax = self.a.mat_vec(theta.as_slice());
            let mut grad = ParameterVector::from_vec(ax);
            grad.axpy(-1.0, &self.b);
            if self.lie_about_gradient {
                grad.scale(-1.0);
            }
            Ok((self.loss(theta)?, grad))
        }

        fn build_curvature(
            &self,
            _theta: &ParameterVector,
            lambda: f64,
            _rng: &mut StdRng,
        ) -> Result<Box<dyn DampedCurvature>> {
            let mut op = DenseOperator::new(self.a.clone())?;
            op.set_lambda(lambda);
            Ok(Box::new(op))
        }
    }

    fn spd_matrix(rng: &mut StdRng, n: usize) -> Mat {
        crate::oracle::random_spd(rng, n, 0.5, 5.0).unwrap()
    }

    fn exact_cfg(n: usize) -> SecondOrderConfig {
        SecondOrderConfig {
            lambda_init: 0.0,
            lambda_min: 0.0,
            lambda_max: 1e8,
            cg_max_iters: n,
            cg_residual_tol: 1e-12,
            batch_size: 1,
            curvature_fraction: 1.0,
            curvature_floor: 1,
            max_backtracks: 3,
        }
    }

    #[test]
    fn newton_step_on_quadratic_reaches_optimum() {
        let mut rng = StdRng::seed_from_u64(41);
        let n = 6;
        let a = spd_matrix(&mut rng, n);
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let problem = QuadraticProblem {
            a: a.clone(),
            b: b.clone(),
            lie_about_gradient: false,
        };
        let theta0 = ParameterVector::zeros(n);
        let mut damping = DampingState::new(0.0);
        let cfg = SecondOrderConfig {
            lambda_init: 0.0,
            ..exact_cfg(n)
        };
        let (theta1, record) = hf_update(&problem, &theta0, &cfg, &mut damping, &mut rng).unwrap();
        assert!(record.accepted);
        let optimum = crate::math::cholesky_solve(&a, b.as_slice()).unwrap();
        for (x, o) in theta1.as_slice().iter().zip(&optimum) {
            assert!((x - o).abs() < 1e-8, "newton step missed the optimum");
        }
        // Exact quadratic model: reduction ratio is 1, so damping shrank.
        assert!(record.rho > 0.99 && record.rho < 1.01);
    }

    #[test]
    fn zero_gradient_leaves_theta_unchanged() {
        let n = 4;
        let a = Mat::identity(n);
        let b = ParameterVector::zeros(n);
        let problem = QuadraticProblem {
            a,
            b,
            lie_about_gradient: false,
        };
        let theta0 = ParameterVector::zeros(n);
        let mut damping = DampingState::new(1.0);
        let mut rng = StdRng::seed_from_u64(42);
        let (theta1, record) =
            hf_update(&problem, &theta0, &exact_cfg(n), &mut damping, &mut rng).unwrap();
        assert_eq!(theta1, theta0);
        assert_eq!(record.step_norm, 0.0);
        assert!(record.accepted);
    }

    #[test]
    fn uphill_step_is_rejected_after_backtracking() {
        let mut rng = StdRng::seed_from_u64(43);
        let n = 5;
        let a = spd_matrix(&mut rng, n);
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let problem = QuadraticProblem {
            a,
            b,
            lie_about_gradient: true,
        };
        // With the gradient sign flipped, the solved step points uphill
        // from the origin, so every halved trial still increases the loss.
        let theta0 = ParameterVector::zeros(n);
        let mut damping = DampingState::new(0.1);
        let (theta1, record) =
            hf_update(&problem, &theta0, &exact_cfg(n), &mut damping, &mut rng).unwrap();
        assert!(!record.accepted);
        assert_eq!(record.backtracks, 3);
        assert_eq!(theta1, theta0);
        assert_eq!(record.criterion_after, record.criterion_before);
    }

    #[test]
    fn lambda_adapts_with_reduction_ratio() {
        let mut rng = StdRng::seed_from_u64(44);
        let n = 4;
        let a = spd_matrix(&mut rng, n);
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let problem = QuadraticProblem {
            a,
            b,
            lie_about_gradient: false,
        };
        let theta0 = ParameterVector::zeros(n);
        let mut damping = DampingState::new(1.0);
        let cfg = SecondOrderConfig {
            lambda_init: 1.0,
            ..exact_cfg(n)
        };
        hf_update(&problem, &theta0, &cfg, &mut damping, &mut rng).unwrap();
        // On a quadratic with (A + I) model the step still decreases the true
        // loss by at least 75% of the prediction, so lambda shrinks.
        assert!(damping.lambda < 1.0);
    }

    #[test]
    fn dsag_cold_start_matches_hf() {
        let mut rng_a = StdRng::seed_from_u64(45);
        let mut rng_b = StdRng::seed_from_u64(45);
        let n = 5;
        let a = spd_matrix(&mut rng_a, n);
        let _ = spd_matrix(&mut rng_b, n); // keep the streams aligned
        let b = ParameterVector::from_vec(vec![1.0, -0.5, 2.0, 0.25, -1.0]);
        let problem = QuadraticProblem {
            a,
            b,
            lie_about_gradient: false,
        };
        let theta0 = ParameterVector::zeros(n);
        let cfg = exact_cfg(n);
        let mut damp_hf = DampingState::new(0.5);
        let (hf_theta, _) = hf_update(&problem, &theta0, &cfg, &mut damp_hf, &mut rng_a).unwrap();
        let dsag_cfg = DsagConfig { base: cfg, mu: 0.5 };
        let mut damp_dsag = DampingState::new(0.5);
        let mut state = DsagState::new();
        let (dsag_theta, _) = dsag_hf_update(
            &problem,
            &theta0,
            &dsag_cfg,
            &mut damp_dsag,
            &mut state,
            &mut rng_b,
        )
        .unwrap();
        assert_eq!(hf_theta, dsag_theta);
        assert!(state.blend().is_some());
    }

    #[test]
    fn dsag_with_zero_mu_tracks_hf_exactly() {
        // With mu = 0 the blend collapses to the current gradient, so
        // consecutive DSAG updates equal consecutive HF updates.
        let mut rng_a = StdRng::seed_from_u64(49);
        let n = 5;
        let a = spd_matrix(&mut rng_a, n);
        let b = ParameterVector::from_vec(vec![0.4, -1.1, 0.9, 0.2, -0.6]);
        let problem = QuadraticProblem {
            a,
            b,
            lie_about_gradient: false,
        };
        let cfg = SecondOrderConfig {
            cg_max_iters: 2,
            lambda_init: 0.5,
            ..exact_cfg(n)
        };
        let mut theta_hf = ParameterVector::zeros(n);
        let mut theta_dsag = ParameterVector::zeros(n);
        let mut damp_hf = DampingState::new(0.5);
        let mut damp_dsag = DampingState::new(0.5);
        let mut state = DsagState::new();
        let dsag_cfg = DsagConfig {
            base: cfg.clone(),
            mu: 0.0,
        };
        let mut rng_hf = StdRng::seed_from_u64(50);
        let mut rng_dsag = StdRng::seed_from_u64(50);
        for _ in 0..2 {
            let (next_hf, _) =
                hf_update(&problem, &theta_hf, &cfg, &mut damp_hf, &mut rng_hf).unwrap();
            let (next_dsag, _) = dsag_hf_update(
                &problem,
                &theta_dsag,
                &dsag_cfg,
                &mut damp_dsag,
                &mut state,
                &mut rng_dsag,
            )
            .unwrap();
            theta_hf = next_hf;
            theta_dsag = next_dsag;
            assert_eq!(theta_hf, theta_dsag);
        }
    }

    #[test]
    fn dsag_blend_speeds_cg_on_fixed_quadratic() {
        // Two consecutive updates on one quadratic: the second CG run,
        // initialized along the blend of the current and previous gradient
        // estimates, reaches the residual tolerance in no more iterations
        // than a zero-initialized run.
        let mut rng = StdRng::seed_from_u64(46);
        let n = 10;
        let a = spd_matrix(&mut rng, n);
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let op = DenseOperator::new(a.clone()).unwrap();
        // Previous gradient estimate: the rhs seen one partial step earlier.
        let first = cg_solve(&op, &b, &CgConfig::new(2, 1e-12, CgInit::Gradient).unwrap()).unwrap();
        let mut prev_rhs = b.clone();
        let moved = a.mat_vec(first.delta.as_slice());
        crate::math::axpy(prev_rhs.as_mut_slice(), -0.5, &moved);

        let tol = 1e-6;
        let zero_cfg = CgConfig::new(n, tol, CgInit::Zero).unwrap();
        let blended_cfg = CgConfig::new(
            n,
            tol,
            CgInit::Blended {
                previous: prev_rhs,
                mu: 0.5,
            },
        )
        .unwrap();
        let zero = cg_solve(&op, &b, &zero_cfg).unwrap();
        let blended = cg_solve(&op, &b, &blended_cfg).unwrap();
        assert!(
            blended.iterations <= zero.iterations,
            "blend init took {} iterations vs {} for zero init",
            blended.iterations,
            zero.iterations
        );
    }

    #[test]
    fn rank_one_fisher_solve_matches_dense_oracle() {
        // B = lambda g g^T + eps I with |g| = 1: the solution splits into
        // the component along g divided by (lambda + eps) and the
        // orthogonal component divided by eps alone.
        let n = 6;
        let mut rng = StdRng::seed_from_u64(48);
        let mut g =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        g.scale(1.0 / g.norm());
        let (lambda, eps) = (1.0, 1e-6);
        let op =
            crate::curvature::FisherOperator::from_gradients(vec![g.clone()], lambda, eps).unwrap();
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let cfg = CgConfig::new(n, 1e-14, CgInit::Gradient).unwrap();
        let solved = cg_solve(&op, &b, &cfg).unwrap();

        // Dense oracle solve of (lambda g g^T + eps I) x = b.
        let mut dense = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                dense[(i, j)] = lambda * g.as_slice()[i] * g.as_slice()[j];
            }
            dense[(i, i)] += eps;
        }
        let direct = crate::math::cholesky_solve(&dense, b.as_slice()).unwrap();
        for (x, d) in solved.delta.as_slice().iter().zip(&direct) {
            assert!(
                (x - d).abs() < 1e-6 * (1.0 + d.abs()),
                "cg {x} vs dense {d}"
            );
        }
        // Closed form: along-g component shrinks by lambda + eps, the
        // orthogonal remainder blows up by 1/eps.
        let along = g.dot(&b);
        for (i, d) in direct.iter().enumerate() {
            let expect = along * g.as_slice()[i] / (lambda + eps)
                + (b.as_slice()[i] - along * g.as_slice()[i]) / eps;
            assert!((d - expect).abs() < 1e-4 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn clipping_rescales_only_oversized_layers() {
        let net = Network::new(vec![1, 1, 1]).unwrap();
        // Layer blocks: [w0, b0] and [w1, b1].
        let mut grad = ParameterVector::from_vec(vec![6.0, 8.0, 0.3, 0.4]);
        let clipped = clip_per_layer(&net, &mut grad, 1.0);
        assert_eq!(clipped, 1);
        // First block had norm 10 -> scaled by 0.1.
        assert!((grad.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((grad.as_slice()[1] - 0.8).abs() < 1e-12);
        // Second block (norm 0.5) untouched.
        assert_eq!(grad.as_slice()[2], 0.3);
        assert_eq!(grad.as_slice()[3], 0.4);
    }

    #[test]
    fn eigen_diagnostic_identity_and_diagonal() {
        let g = ParameterVector::from_vec(vec![2.0, 1.0]);
        let out = eigen_diagnostic(&Mat::identity(2), &g).unwrap();
        assert!((out.delta.as_slice()[0] - 2.0).abs() < 1e-12);
        assert!((out.delta.as_slice()[1] - 1.0).abs() < 1e-12);

        let mut d = Mat::zeros(2, 2);
        d[(0, 0)] = 2.0;
        d[(1, 1)] = 1.0;
        let out = eigen_diagnostic(&d, &g).unwrap();
        assert!((out.delta.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!((out.delta.as_slice()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_diagnostic_matches_dense_solve() {
        let mut rng = StdRng::seed_from_u64(47);
        let n = 10;
        let a = spd_matrix(&mut rng, n);
        let g =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let direct = crate::math::cholesky_solve(&a, g.as_slice()).unwrap();
        let out = eigen_diagnostic(&a, &g).unwrap();
        for (x, d) in out.delta.as_slice().iter().zip(&direct) {
            assert!((x - d).abs() < 1e-10 * (1.0 + d.abs()));
        }
        assert_eq!(out.eigenvalues.len(), n);
    }

    #[test]
    fn eigen_diagnostic_rejects_asymmetric_input() {
        let mut m = Mat::identity(2);
        m[(0, 1)] = 0.5;
        let g = ParameterVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(eigen_diagnostic(&m, &g), Err(Error::Usage(_))));
    }
}
