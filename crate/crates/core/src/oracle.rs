//! Independent brute-force implementations used by tests, the `verify`
//! subcommand and diagnostics: dense curvature matrices, finite
//! differences, exhaustive lattice path enumeration and KL measurements.
//!
//! Oracles favor clarity over speed and carry hard size guards so an
//! accidental large-net call fails fast instead of running O(D^3) work.
//! Enumeration-based checks recompute occupancies and expected losses
//! directly from complete path lists, so they share no code with the
//! lattice forward-backward they verify. Parameter-space oracles lean only
//! on the network passes themselves (`forward`, and the R-operator which is
//! separately verified against finite differences of `forward`).

use rand::Rng as _;

use crate::curvature::{CurvatureOp, DampedCurvature, GnOperator, LossHessianMode};
use crate::error::{Error, Result};
use crate::lattice::{ArcId, Lattice, StateLabel, Symbol, UtteranceExample};
use crate::math::{log_sum_exp, Mat};
use crate::tensor_net::{forward, rop, Network, ParameterVector};

/// Hard ceiling on explicit-matrix work.
pub const MAX_DENSE_DIM: usize = 500;
/// Hard ceiling on exhaustive path enumeration.
pub const MAX_ENUMERATED_PATHS: usize = 10_000;

/// A dense symmetric operator with additive damping; the explicit stand-in
/// for the matrix-free curvature products on tiny problems.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Mat,
    lambda: f64,
}

impl DenseOperator {
    pub fn new(matrix: Mat) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::usage("dense operator must be square"));
        }
        if !matrix.is_finite() {
            return Err(Error::numeric("dense operator has non-finite entries"));
        }
        Ok(DenseOperator {
            matrix,
            lambda: 0.0,
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Numerical rank: eigenvalues above `tol * max|eigenvalue|`.
    pub fn rank(&self, tol: f64) -> Result<usize> {
        let (evals, _) = crate::math::symmetric_eigen(&self.matrix)?;
        let scale = evals.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Ok(0);
        }
        Ok(evals.iter().filter(|v| v.abs() > tol * scale).count())
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let (evals, _) = crate::math::symmetric_eigen(&self.matrix)?;
        Ok(evals.last().copied().unwrap_or(0.0))
    }

    /// Writes the matrix as plain text (`matrix R C` header then one row
    /// per line) for offline inspection.
    pub fn dump(&self, path: &std::path::Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut text = String::new();
        writeln!(text, "matrix {} {}", self.matrix.rows(), self.matrix.cols()).unwrap();
        for r in 0..self.matrix.rows() {
            let row: Vec<String> = self.matrix.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(text, "{}", row.join(" ")).unwrap();
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

impl CurvatureOp for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, v: &ParameterVector) -> Result<ParameterVector> {
        if v.len() != self.dim() {
            return Err(Error::shape("dense operator dimension mismatch"));
        }
        let mut out = ParameterVector::from_vec(self.matrix.mat_vec(v.as_slice()));
        out.axpy(self.lambda, v);
        Ok(out)
    }
}

impl DampedCurvature for DenseOperator {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }
}

fn guard_dense(dim: usize) -> Result<()> {
    if dim > MAX_DENSE_DIM {
        return Err(Error::usage(format!(
            "explicit-matrix oracle limited to {MAX_DENSE_DIM} parameters, got {dim}"
        )));
    }
    Ok(())
}

/// Dense `(1/R) sum_r g_r g_r^T` from a gradient list.
pub fn dense_from_outer_products(grads: &[ParameterVector]) -> Result<DenseOperator> {
    let dim = grads
        .first()
        .map(ParameterVector::len)
        .ok_or_else(|| Error::usage("need at least one gradient"))?;
    guard_dense(dim)?;
    let r = grads.len() as f64;
    let mut m = Mat::zeros(dim, dim);
    for g in grads {
        for i in 0..dim {
            let gi = g.as_slice()[i] / r;
            if gi == 0.0 {
                continue;
            }
            crate::math::axpy(m.row_mut(i), gi, g.as_slice());
        }
    }
    DenseOperator::new(m)
}

/// Explicit empirical Fisher matrix; rank is at most the batch size.
pub fn explicit_fisher(
    net: &Network,
    theta: &ParameterVector,
    batch: &[&UtteranceExample],
    kappa: f64,
) -> Result<DenseOperator> {
    guard_dense(net.param_count())?;
    let grads = crate::curvature::build_fisher_gradients(net, theta, batch, kappa)?;
    dense_from_outer_products(&grads)
}

/// Explicit Gauss-Newton matrix, built two independent ways and
/// cross-checked: (a) probing the matrix-free product with basis vectors,
/// and (b) assembling `sum_t J_t^T (∇²L_t) J_t` from an explicit per-frame
/// Jacobian and dense per-frame loss Hessians whose occupancy statistics
/// come from exhaustive path enumeration. The constructions must agree
/// within 1e-10 of the matrix scale.
pub fn explicit_gn(
    net: &Network,
    theta: &ParameterVector,
    batch: &[&UtteranceExample],
    kappa: f64,
    mode: LossHessianMode,
) -> Result<DenseOperator> {
    let dim = net.param_count();
    guard_dense(dim)?;

    let op = GnOperator::build(net, theta, batch, kappa, 0.0, mode)?;
    let mut probed = Mat::zeros(dim, dim);
    for j in 0..dim {
        let mut e = net.zero_params();
        e.as_mut_slice()[j] = 1.0;
        let col = op.apply(&e)?;
        for i in 0..dim {
            probed[(i, j)] = col.as_slice()[i];
        }
    }

    let assembled = assemble_gn(net, theta, batch, kappa, mode)?;
    let scale = assembled.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
    for i in 0..dim {
        for j in 0..dim {
            let diff = (probed[(i, j)] - assembled[(i, j)]).abs();
            if diff > 1e-10 * scale {
                return Err(Error::Numeric(format!(
                    "explicit GN constructions disagree at ({i},{j}) by {diff:.3e}"
                )));
            }
        }
    }
    if matches!(mode, LossHessianMode::MbrRaw) {
        // The raw form is intentionally asymmetric; skip the symmetry gate.
        return DenseOperator::new(assembled);
    }
    if assembled.asymmetry() > 1e-12 * scale {
        return Err(Error::numeric("assembled GN matrix is not symmetric"));
    }
    DenseOperator::new(assembled)
}

fn assemble_gn(
    net: &Network,
    theta: &ParameterVector,
    batch: &[&UtteranceExample],
    kappa: f64,
    mode: LossHessianMode,
) -> Result<Mat> {
    let dim = net.param_count();
    let d_out = net.output_dim();
    let total_frames: usize = batch.iter().map(|ex| ex.num_frames()).sum();
    let hessian_count = match mode {
        LossHessianMode::Ce => total_frames,
        _ => batch.len(),
    };
    let mut assembled = Mat::zeros(dim, dim);
    for example in batch {
        let record = forward(net, theta, &example.frames)?;
        let t_frames = record.num_frames();
        // Explicit Jacobian, one R-op per basis direction: (T*D_out) x dim.
        let mut jac = Mat::zeros(t_frames * d_out, dim);
        for j in 0..dim {
            let mut e = net.zero_params();
            e.as_mut_slice()[j] = 1.0;
            let col = rop(net, theta, &record, &e)?;
            for t in 0..t_frames {
                for o in 0..d_out {
                    jac[(t * d_out + o, j)] = col[(t, o)];
                }
            }
        }
        let hessians =
            per_frame_loss_hessians(example, record.output(), kappa, mode, hessian_count)?;
        for (t, m_t) in hessians.iter().enumerate() {
            // MJ = M_t * J_t (d_out x dim), then assembled += J_t^T * MJ.
            let mut mj = Mat::zeros(d_out, dim);
            for a in 0..d_out {
                for b in 0..d_out {
                    let w = m_t[(a, b)];
                    if w != 0.0 {
                        let src = jac.row(t * d_out + b).to_vec();
                        crate::math::axpy(mj.row_mut(a), w, &src);
                    }
                }
            }
            for a in 0..d_out {
                let j_row = jac.row(t * d_out + a).to_vec();
                let mj_row = mj.row(a).to_vec();
                for (i, &ji) in j_row.iter().enumerate() {
                    if ji != 0.0 {
                        crate::math::axpy(assembled.row_mut(i), ji, &mj_row);
                    }
                }
            }
        }
    }
    Ok(assembled)
}

/// Dense per-frame loss Hessians with occupancy and loss statistics
/// recomputed from exhaustive path enumeration (not from the lattice
/// forward-backward pass).
fn per_frame_loss_hessians(
    example: &UtteranceExample,
    activations: &Mat,
    kappa: f64,
    mode: LossHessianMode,
    hessian_count: usize,
) -> Result<Vec<Mat>> {
    let t_frames = activations.rows();
    let d_out = activations.cols();
    let scale = match mode {
        LossHessianMode::Ce => 1.0 / hessian_count as f64,
        _ => kappa * kappa / hessian_count as f64,
    };
    let mut out = Vec::with_capacity(t_frames);
    match mode {
        LossHessianMode::Identity => {
            for _ in 0..t_frames {
                out.push(Mat::identity(d_out));
            }
        }
        LossHessianMode::Ce => {
            for t in 0..t_frames {
                let mut y = activations.row(t).to_vec();
                crate::math::softmax_row(&mut y);
                let mut m = Mat::zeros(d_out, d_out);
                for a in 0..d_out {
                    for b in 0..d_out {
                        let v = if a == b { y[a] } else { 0.0 } - y[a] * y[b];
                        m[(a, b)] = scale * v;
                    }
                }
                out.push(m);
            }
        }
        LossHessianMode::Mmi | LossHessianMode::Mbr | LossHessianMode::MbrRaw => {
            let needs_loss = !matches!(mode, LossHessianMode::Mmi);
            let paths = enumerate_paths(&example.denominator, activations, kappa)?;
            let log_z = log_sum_exp(&paths.iter().map(|p| p.log_score).collect::<Vec<_>>());
            let probs: Vec<f64> = paths.iter().map(|p| (p.log_score - log_z).exp()).collect();
            let mut gamma = Mat::zeros(t_frames, d_out);
            for (path, &p) in paths.iter().zip(&probs) {
                for (t, &s) in path.frame_states.iter().enumerate() {
                    gamma[(t, s)] += p;
                }
            }
            let mut gamma_hat = gamma.clone();
            if needs_loss {
                let losses: Vec<f64> = paths
                    .iter()
                    .map(|p| {
                        p.loss
                            .ok_or_else(|| Error::data("enumerated path lacks loss annotation"))
                    })
                    .collect::<Result<_>>()?;
                let avg: f64 = probs.iter().zip(&losses).map(|(p, l)| p * l).sum();
                gamma_hat = Mat::zeros(t_frames, d_out);
                for ((path, &p), &l) in paths.iter().zip(&probs).zip(&losses) {
                    for (t, &s) in path.frame_states.iter().enumerate() {
                        gamma_hat[(t, s)] += p * (l - avg);
                    }
                }
            }
            for t in 0..t_frames {
                let g = gamma.row(t);
                let gh = gamma_hat.row(t);
                let mut m = Mat::zeros(d_out, d_out);
                for a in 0..d_out {
                    for b in 0..d_out {
                        let diag = if a == b { gh[a] } else { 0.0 };
                        let v = if matches!(mode, LossHessianMode::MbrRaw) {
                            diag - gh[a] * g[b]
                        } else {
                            diag - 0.5 * (gh[a] * g[b] + g[a] * gh[b])
                        };
                        m[(a, b)] = scale * v;
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// Random symmetric positive definite matrix with a controlled spectrum:
/// `Q diag(d) Q^T` with a Haar-ish orthogonal `Q` (Gram-Schmidt over a
/// Gaussian matrix) and eigenvalues log-uniform in `[eig_lo, eig_hi]`.
/// The bounded condition number keeps CG's n-step termination observable
/// in floating point.
pub fn random_spd(rng: &mut rand::rngs::StdRng, n: usize, eig_lo: f64, eig_hi: f64) -> Result<Mat> {
    if n == 0 || eig_lo <= 0.0 || eig_hi < eig_lo {
        return Err(Error::usage(
            "random_spd needs n >= 1 and 0 < eig_lo <= eig_hi",
        ));
    }
    guard_dense(n)?;
    // Orthonormalize a random Gaussian matrix column by column.
    let mut q = Mat::zeros(n, n);
    for c in 0..n {
        let mut col: Vec<f64> = (0..n)
            .map(|_| crate::math::sample_standard_normal(rng))
            .collect();
        for prev in 0..c {
            let proj: f64 = (0..n).map(|r| q[(r, prev)] * col[r]).sum();
            for (r, v) in col.iter_mut().enumerate() {
                *v -= proj * q[(r, prev)];
            }
        }
        let norm = crate::math::norm2(&col);
        for (r, v) in col.iter().enumerate() {
            q[(r, c)] = v / norm;
        }
    }
    let log_lo = eig_lo.ln();
    let log_hi = eig_hi.ln();
    let eigs: Vec<f64> = (0..n)
        .map(|_| (log_lo + (log_hi - log_lo) * rng.random::<f64>()).exp())
        .collect();
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += q[(i, k)] * eigs[k] * q[(j, k)];
            }
            a[(i, j)] = s;
        }
    }
    // Symmetrize away the last rounding crumbs.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    Ok(a)
}

/// Central-difference gradient of a scalar objective.
pub fn fd_gradient<F>(objective: F, theta: &ParameterVector, eps: f64) -> Result<ParameterVector>
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mut grad = ParameterVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.as_mut_slice()[i] += eps;
        let mut minus = theta.clone();
        minus.as_mut_slice()[i] -= eps;
        grad.as_mut_slice()[i] = (objective(&plus)? - objective(&minus)?) / (2.0 * eps);
    }
    Ok(grad)
}

/// Double-central-difference dense Hessian of a scalar objective.
pub fn fd_hessian<F>(objective: F, theta: &ParameterVector, eps: f64) -> Result<Mat>
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let n = theta.len();
    guard_dense(n)?;
    let mut h = Mat::zeros(n, n);
    let shifted = |i: usize, si: f64, j: usize, sj: f64| -> ParameterVector {
        let mut t = theta.clone();
        t.as_mut_slice()[i] += si * eps;
        t.as_mut_slice()[j] += sj * eps;
        t
    };
    for i in 0..n {
        for j in i..n {
            let pp = objective(&shifted(i, 1.0, j, 1.0))?;
            let pm = objective(&shifted(i, 1.0, j, -1.0))?;
            let mp = objective(&shifted(i, -1.0, j, 1.0))?;
            let mm = objective(&shifted(i, -1.0, j, -1.0))?;
            let v = (pp - pm - mp + mm) / (4.0 * eps * eps);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// One complete start-to-end path of a lattice.
#[derive(Debug, Clone)]
pub struct EnumeratedPath {
    pub arcs: Vec<ArcId>,
    /// `kappa`-scaled log score (transition weights and acoustics).
    pub log_score: f64,
    pub symbols: Vec<Symbol>,
    pub frame_states: Vec<StateLabel>,
    /// Sum of arc local losses, when every traversed arc is annotated.
    pub loss: Option<f64>,
}

/// Exhaustively enumerates every complete path with its `kappa`-scaled log
/// score. `log_sum_exp` over the scores reproduces the partition value.
pub fn enumerate_paths(
    lat: &Lattice,
    activations: &Mat,
    kappa: f64,
) -> Result<Vec<EnumeratedPath>> {
    if activations.rows() != lat.num_frames() {
        return Err(Error::shape("activations do not span the lattice frames"));
    }
    // Arc log scores straight from the definition.
    let arc_score = |a: ArcId| -> f64 {
        let arc = lat.arc(a);
        let t0 = lat.arc_start_time(a);
        let acoustic: f64 = arc
            .labels
            .iter()
            .enumerate()
            .map(|(k, &s)| activations[(t0 + k, s)])
            .sum();
        kappa * (arc.log_weight + acoustic)
    };

    let mut paths = Vec::new();
    let mut stack: Vec<(usize, Vec<ArcId>)> = vec![(lat.start(), Vec::new())];
    while let Some((node, prefix)) = stack.pop() {
        if node == lat.end() {
            let mut log_score = 0.0;
            let mut symbols = Vec::with_capacity(prefix.len());
            let mut frame_states = Vec::with_capacity(lat.num_frames());
            let mut loss = Some(0.0);
            for &a in &prefix {
                log_score += arc_score(a);
                let arc = lat.arc(a);
                symbols.push(arc.symbol);
                frame_states.extend_from_slice(&arc.labels);
                loss = match (loss, arc.local_loss) {
                    (Some(acc), Some(l)) => Some(acc + l),
                    _ => None,
                };
            }
            paths.push(EnumeratedPath {
                arcs: prefix,
                log_score,
                symbols,
                frame_states,
                loss,
            });
            if paths.len() > MAX_ENUMERATED_PATHS {
                return Err(Error::usage(format!(
                    "lattice exceeds the {MAX_ENUMERATED_PATHS}-path enumeration bound"
                )));
            }
            continue;
        }
        for &a in lat.out_arcs(node) {
            let mut next = prefix.clone();
            next.push(a);
            stack.push((lat.arc(a).dst, next));
        }
    }
    if paths.is_empty() {
        return Err(Error::data("no complete paths found during enumeration"));
    }
    // Deterministic order: lexicographic by arc ids.
    paths.sort_by(|x, y| x.arcs.cmp(&y.arcs));
    Ok(paths)
}

/// Result of the KL quadratic-expansion measurement.
#[derive(Debug, Clone)]
pub struct KlCheck {
    /// Exact `KL(p_theta || p_{theta+delta})`, averaged over the batch, by
    /// full hypothesis enumeration.
    pub exact_kl: f64,
    /// `delta^T I delta / 2` with the *exact* Fisher information (the
    /// expectation over enumerated hypotheses, not the empirical outer
    /// product), averaged over the batch.
    pub quadratic_form: f64,
    /// `exact_kl / quadratic_form` (NaN when both vanish).
    pub ratio: f64,
}

/// Measures how well the KL divergence between the path posteriors at
/// `theta` and `theta + delta` is captured by its quadratic Fisher model.
pub fn kl_quadratic_check(
    net: &Network,
    theta: &ParameterVector,
    delta: &ParameterVector,
    batch: &[&UtteranceExample],
    kappa: f64,
) -> Result<KlCheck> {
    if batch.is_empty() {
        return Err(Error::usage("kl_quadratic_check needs a batch"));
    }
    if delta.len() != theta.len() {
        return Err(Error::shape("delta length mismatch"));
    }
    let mut theta_moved = theta.clone();
    theta_moved.axpy(1.0, delta);

    let r = batch.len() as f64;
    let mut exact_kl = 0.0;
    let mut quadratic = 0.0;
    for example in batch {
        let record = forward(net, theta, &example.frames)?;
        let record_moved = forward(net, &theta_moved, &example.frames)?;
        let paths = enumerate_paths(&example.denominator, record.output(), kappa)?;
        let paths_moved = enumerate_paths(&example.denominator, record_moved.output(), kappa)?;
        let scores: Vec<f64> = paths.iter().map(|p| p.log_score).collect();
        let scores_moved: Vec<f64> = paths_moved.iter().map(|p| p.log_score).collect();
        let log_z = log_sum_exp(&scores);
        let log_z_moved = log_sum_exp(&scores_moved);

        // Exact per-utterance KL over the enumerated hypothesis space.
        for (s, s2) in scores.iter().zip(&scores_moved) {
            let p = (s - log_z).exp();
            if p > 0.0 {
                exact_kl += p * ((s - log_z) - (s2 - log_z_moved)) / r;
            }
        }

        // Exact Fisher quadratic form: E_p[(g_H . delta)^2] / 2 with
        // g_H . delta = kappa * (Jdelta along the path - E_gamma[Jdelta]).
        let jdelta = rop(net, theta, &record, delta)?;
        let t_frames = jdelta.rows();
        let d_out = jdelta.cols();
        let mut gamma = Mat::zeros(t_frames, d_out);
        for (path, s) in paths.iter().zip(&scores) {
            let p = (s - log_z).exp();
            for (t, &state) in path.frame_states.iter().enumerate() {
                gamma[(t, state)] += p;
            }
        }
        let mut mean_jdelta = 0.0;
        for t in 0..t_frames {
            mean_jdelta += crate::math::dot(gamma.row(t), jdelta.row(t));
        }
        for (path, s) in paths.iter().zip(&scores) {
            let p = (s - log_z).exp();
            if p == 0.0 {
                continue;
            }
            let mut along = 0.0;
            for (t, &state) in path.frame_states.iter().enumerate() {
                along += jdelta[(t, state)];
            }
            let g_dot = kappa * (along - mean_jdelta);
            quadratic += 0.5 * p * g_dot * g_dot / r;
        }
    }
    Ok(KlCheck {
        exact_kl,
        quadratic_form: quadratic,
        ratio: exact_kl / quadratic,
    })
}

/// Per-utterance MMI log posterior `log P(H^r|O^r)`; the scalar objective
/// the finite-difference suites differentiate.
pub fn mmi_log_posterior(
    net: &Network,
    theta: &ParameterVector,
    example: &UtteranceExample,
    kappa: f64,
) -> Result<f64> {
    let record = forward(net, theta, &example.frames)?;
    Ok(crate::lattice::mmi_utterance(example, record.output(), kappa)?.value)
}
