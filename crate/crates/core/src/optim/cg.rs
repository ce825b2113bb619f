//! Linear conjugate gradients over a matrix-free curvature operator.
//!
//! Solves `B x = b` for symmetric positive definite `B`, tracking the
//! quadratic model value `phi(x) = -b.x + x.Bx/2` per iteration (computed
//! as `-x.(b + r)/2`, which needs no extra operator apply). On an SPD
//! system `phi` is non-increasing across iterations; a violation beyond
//! floating-point slack indicates a broken operator.
//!
//! The solver can start from zero, from an exact line search along `b`
//! ("gradient initialization"), or from a line search along a blend of `b`
//! with a previous direction. Non-positive curvature `p.Bp <= 0` on any
//! probed direction aborts with [`Error::NonSpdCurvature`].

use crate::curvature::CurvatureOp;
use crate::error::{Error, Result};
use crate::tensor_net::ParameterVector;

/// How the CG iterate is initialized.
#[derive(Debug, Clone)]
pub enum CgInit {
    Zero,
    /// `x0 = (b.b / b.Bb) b`: the exact minimizer of the model along `b`.
    Gradient,
    /// `x0` is the exact model minimizer along
    /// `mu * previous + (1 - mu) * b`, rescaled to `|b|` first.
    Blended {
        previous: ParameterVector,
        mu: f64,
    },
}

#[derive(Debug, Clone)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative residual target: stop once `|r| <= residual_tol * |b|`.
    pub residual_tol: f64,
    pub init: CgInit,
}

impl CgConfig {
    pub fn new(max_iters: usize, residual_tol: f64, init: CgInit) -> Result<Self> {
        if max_iters == 0 {
            return Err(Error::config("cg max_iters must be at least 1"));
        }
        if residual_tol <= 0.0 {
            return Err(Error::config("cg residual_tol must be positive"));
        }
        if let CgInit::Blended { mu, .. } = &init {
            if !(0.0..=1.0).contains(mu) {
                return Err(Error::config("cg blend weight mu must lie in [0, 1]"));
            }
        }
        Ok(CgConfig {
            max_iters,
            residual_tol,
            init,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub delta: ParameterVector,
    /// Quadratic model values: entry 0 at the initial iterate, then one per
    /// iteration. Non-increasing on SPD systems.
    pub model_values: Vec<f64>,
    /// Final `|r| / |b|`.
    pub relative_residual: f64,
    pub iterations: usize,
}

impl CgResult {
    /// Model decrease `-phi(delta)` promised by the quadratic model.
    pub fn predicted_decrease(&self) -> f64 {
        -self.model_values.last().copied().unwrap_or(0.0)
    }
}

fn model_value(x: &ParameterVector, b: &ParameterVector, r: &ParameterVector) -> f64 {
    let mut s = 0.0;
    for ((xi, bi), ri) in x.as_slice().iter().zip(b.as_slice()).zip(r.as_slice()) {
        s += xi * (bi + ri);
    }
    -0.5 * s
}

pub fn cg_solve<B: CurvatureOp + ?Sized>(
    op: &B,
    b: &ParameterVector,
    cfg: &CgConfig,
) -> Result<CgResult> {
    if b.len() != op.dim() {
        return Err(Error::shape(format!(
            "cg rhs length {} does not match operator dimension {}",
            b.len(),
            op.dim()
        )));
    }
    if !b.is_finite() {
        return Err(Error::numeric("cg right-hand side is not finite"));
    }
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(CgResult {
            delta: ParameterVector::zeros(b.len()),
            model_values: vec![0.0],
            relative_residual: 0.0,
            iterations: 0,
        });
    }

    // Initial iterate and its residual.
    let (mut x, mut r) = match &cfg.init {
        CgInit::Zero => (ParameterVector::zeros(b.len()), b.clone()),
        CgInit::Gradient => line_search_start(op, b, b)?,
        CgInit::Blended { previous, mu } => {
            if previous.len() != b.len() {
                return Err(Error::shape("blend direction length mismatch"));
            }
            let mut d = previous.scaled(*mu);
            d.axpy(1.0 - mu, b);
            let d_norm = d.norm();
            if d_norm == 0.0 {
                line_search_start(op, b, b)?
            } else {
                d.scale(b_norm / d_norm);
                line_search_start(op, b, &d)?
            }
        }
    };

    let mut phi = vec![model_value(&x, b, &r)];
    let mut rs_old = r.dot(&r);
    let mut relative_residual = rs_old.sqrt() / b_norm;
    let mut p = r.clone();
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        if relative_residual <= cfg.residual_tol {
            break;
        }
        let bp = op.apply(&p)?;
        let p_bp = p.dot(&bp);
        if p_bp <= 0.0 {
            return Err(Error::NonSpdCurvature { curvature: p_bp });
        }
        let alpha = rs_old / p_bp;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &bp);
        iterations += 1;
        phi.push(model_value(&x, b, &r));
        let rs_new = r.dot(&r);
        relative_residual = rs_new.sqrt() / b_norm;
        if relative_residual <= cfg.residual_tol {
            break;
        }
        let beta = rs_new / rs_old;
        let mut p_next = r.clone();
        p_next.axpy(beta, &p);
        p = p_next;
        rs_old = rs_new;
    }

    debug_assert!(
        phi.windows(2)
            .all(|w| w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs())),
        "cg model value increased on an SPD system"
    );

    Ok(CgResult {
        delta: x,
        model_values: phi,
        relative_residual,
        iterations,
    })
}

/// Exact line search of the quadratic model along `d`, returning the start
/// iterate and its residual (reusing the single `B d` apply).
fn line_search_start<B: CurvatureOp + ?Sized>(
    op: &B,
    b: &ParameterVector,
    d: &ParameterVector,
) -> Result<(ParameterVector, ParameterVector)> {
    let bd = op.apply(d)?;
    let d_bd = d.dot(&bd);
    if d_bd <= 0.0 {
        return Err(Error::NonSpdCurvature { curvature: d_bd });
    }
    let alpha = d.dot(b) / d_bd;
    let x = d.scaled(alpha);
    let mut r = b.clone();
    r.axpy(-alpha, &bd);
    Ok((x, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{sample_standard_normal, Mat};
    use crate::oracle::DenseOperator;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn pv(vals: &[f64]) -> ParameterVector {
        ParameterVector::from_vec(vals.to_vec())
    }

    fn random_spd(rng: &mut StdRng, n: usize, _shift: f64) -> Mat {
        crate::oracle::random_spd(rng, n, 0.5, 5.0).unwrap()
    }

    #[test]
    fn identity_system_solves_in_one_iteration() {
        let op = DenseOperator::new(Mat::identity(4)).unwrap();
        let b = pv(&[1.0, -2.0, 3.0, 0.5]);
        let cfg = CgConfig::new(10, 1e-12, CgInit::Zero).unwrap();
        let out = cg_solve(&op, &b, &cfg).unwrap();
        assert_eq!(out.iterations, 1);
        for (x, e) in out.delta.as_slice().iter().zip(b.as_slice()) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_system_matches_reciprocals() {
        let mut m = Mat::zeros(3, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 2.0;
        m[(2, 2)] = 4.0;
        let op = DenseOperator::new(m).unwrap();
        let b = pv(&[1.0, 1.0, 1.0]);
        let cfg = CgConfig::new(3, 1e-14, CgInit::Zero).unwrap();
        let out = cg_solve(&op, &b, &cfg).unwrap();
        assert!(out.iterations <= 3);
        let expect = [1.0, 0.5, 0.25];
        for (x, e) in out.delta.as_slice().iter().zip(&expect) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn random_spd_matches_dense_factorization_in_n_iterations() {
        let mut rng = StdRng::seed_from_u64(31);
        let n = 20;
        let a = random_spd(&mut rng, n, 0.5);
        let b = pv(&(0..n)
            .map(|_| sample_standard_normal(&mut rng))
            .collect::<Vec<_>>());
        let direct = crate::math::cholesky_solve(&a, b.as_slice()).unwrap();
        let op = DenseOperator::new(a).unwrap();
        let cfg = CgConfig::new(n, 1e-10, CgInit::Zero).unwrap();
        let out = cg_solve(&op, &b, &cfg).unwrap();
        assert!(
            out.relative_residual < 1e-8,
            "residual {}",
            out.relative_residual
        );
        let err: f64 = out
            .delta
            .as_slice()
            .iter()
            .zip(&direct)
            .map(|(x, d)| (x - d) * (x - d))
            .sum::<f64>()
            .sqrt();
        let scale = crate::math::norm2(&direct).max(1e-12);
        assert!(err / scale < 1e-8, "relative error {}", err / scale);
    }

    #[test]
    fn model_value_is_monotone_nonincreasing() {
        let mut rng = StdRng::seed_from_u64(32);
        let n = 12;
        let a = random_spd(&mut rng, n, 0.1);
        let b = pv(&(0..n)
            .map(|_| sample_standard_normal(&mut rng))
            .collect::<Vec<_>>());
        let op = DenseOperator::new(a).unwrap();
        for init in [CgInit::Zero, CgInit::Gradient] {
            let cfg = CgConfig::new(n, 1e-12, init).unwrap();
            let out = cg_solve(&op, &b, &cfg).unwrap();
            for w in out.model_values.windows(2) {
                assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()));
            }
        }
    }

    #[test]
    fn gradient_init_starts_at_best_gradient_step() {
        let mut rng = StdRng::seed_from_u64(33);
        let n = 10;
        let a = random_spd(&mut rng, n, 0.2);
        let b = pv(&(0..n)
            .map(|_| sample_standard_normal(&mut rng))
            .collect::<Vec<_>>());
        let op = DenseOperator::new(a.clone()).unwrap();
        let cfg = CgConfig::new(3, 1e-14, CgInit::Gradient).unwrap();
        let out = cg_solve(&op, &b, &cfg).unwrap();
        // phi at the initial iterate equals the exact-line-search value
        // -(b.b)^2 / (2 b.Bb), and later iterates never exceed it.
        let bb = b.dot(&b);
        let ab = DenseOperator::new(a).unwrap().apply(&b).unwrap();
        let b_ab = b.dot(&ab);
        let expect = -0.5 * bb * bb / b_ab;
        assert!((out.model_values[0] - expect).abs() < 1e-10 * (1.0 + expect.abs()));
        assert!(out.predicted_decrease() >= -expect - 1e-12);
    }

    #[test]
    fn non_spd_direction_aborts_with_curvature() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = -1.0;
        let op = DenseOperator::new(m).unwrap();
        let b = pv(&[0.0, 1.0]);
        let cfg = CgConfig::new(5, 1e-10, CgInit::Zero).unwrap();
        match cg_solve(&op, &b, &cfg) {
            Err(Error::NonSpdCurvature { curvature }) => assert!(curvature <= 0.0),
            other => panic!("expected NonSpdCurvature, got {other:?}"),
        }
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let op = DenseOperator::new(Mat::identity(3)).unwrap();
        let cfg = CgConfig::new(5, 1e-10, CgInit::Gradient).unwrap();
        let out = cg_solve(&op, &pv(&[0.0, 0.0, 0.0]), &cfg).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.delta.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn blended_init_with_mu_zero_equals_gradient_init() {
        let mut rng = StdRng::seed_from_u64(34);
        let n = 8;
        let a = random_spd(&mut rng, n, 0.3);
        let b = pv(&(0..n)
            .map(|_| sample_standard_normal(&mut rng))
            .collect::<Vec<_>>());
        let prev = pv(&(0..n)
            .map(|_| sample_standard_normal(&mut rng))
            .collect::<Vec<_>>());
        let op = DenseOperator::new(a).unwrap();
        let grad_cfg = CgConfig::new(4, 1e-14, CgInit::Gradient).unwrap();
        let blend_cfg = CgConfig::new(
            4,
            1e-14,
            CgInit::Blended {
                previous: prev,
                mu: 0.0,
            },
        )
        .unwrap();
        let g = cg_solve(&op, &b, &grad_cfg).unwrap();
        let bl = cg_solve(&op, &b, &blend_cfg).unwrap();
        assert_eq!(g.delta, bl.delta);
    }
}
