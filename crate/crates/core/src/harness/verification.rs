//! The oracle property suite behind `seqtrain verify` and the acceptance
//! tests: every check pits an implementation path against an independent
//! brute-force oracle at a pinned tolerance and reports one pass/fail line.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::curvature::CurvatureOp;
use crate::curvature::{build_fisher_gradients, fisher_apply, GnOperator, LossHessianMode};
use crate::error::Result;
use crate::lattice::{forward_backward, mbr_utterance, mmi_utterance, LossLevel, UtteranceExample};
use crate::math::{log_sum_exp, sample_standard_normal, Mat};
use crate::optim::{cg_solve, eigen_diagnostic, CgConfig, CgInit, CriterionKind, Objective};
use crate::oracle::{
    enumerate_paths, explicit_fisher, explicit_gn, fd_gradient, fd_hessian, kl_quadratic_check,
    random_spd, DenseOperator,
};
use crate::tensor_net::{forward, Network, ParameterVector};

use super::{ce_loss, ce_loss_and_gradient, generate_task, train, RunConfig, SyntheticTaskConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult {
            name,
            passed,
            detail,
        }
    }
}

/// Scale knobs: `quick` for the CLI `verify` default, `full` for the
/// acceptance suite.
#[derive(Debug, Clone, Copy)]
pub struct VerificationConfig {
    pub gradient_seeds: usize,
    pub lattice_count: usize,
    pub kl_seeds: usize,
}

impl VerificationConfig {
    pub fn quick() -> Self {
        VerificationConfig {
            gradient_seeds: 3,
            lattice_count: 10,
            kl_seeds: 2,
        }
    }

    pub fn full() -> Self {
        VerificationConfig {
            gradient_seeds: 10,
            lattice_count: 50,
            kl_seeds: 5,
        }
    }
}

/// A tiny random scenario: a 3-5-4 network over a handful of short
/// utterances whose lattices stay enumerable.
fn tiny_scenario(
    seed: u64,
    level: Option<LossLevel>,
) -> Result<(Network, ParameterVector, Vec<UtteranceExample>)> {
    let task = SyntheticTaskConfig {
        num_states: 4,
        num_symbols: 2,
        feature_dim: 3,
        min_frames: 6,
        max_frames: 10,
        train_utterances: 3,
        val_utterances: 1,
        confusion: 0.5,
        feature_noise: 1.5,
        seed,
        max_paths: 32,
    };
    let dataset = generate_task(&task)?.annotated(level)?;
    let net = Network::new(vec![3, 5, 4])?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let theta = net.init_params(&mut rng);
    Ok((net, theta, dataset.train))
}

fn vector_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

/// Criterion gradients (CE, MMI, MPE, sMBR) against central finite
/// differences; max relative error must stay below 1e-5.
pub fn check_gradients(seeds: usize) -> CheckResult {
    let tolerance = 1e-5;
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_case = String::new();
    let mut run = || -> Result<()> {
        for seed in 0..seeds as u64 {
            for criterion in [
                None,
                Some(CriterionKind::Mmi),
                Some(CriterionKind::Mpe),
                Some(CriterionKind::Smbr),
            ] {
                let level = criterion.and_then(|c| c.loss_level());
                let (net, theta, examples) = tiny_scenario(seed, level)?;
                let indices: Vec<usize> = (0..examples.len()).collect();
                let (analytic, numeric) = match criterion {
                    None => {
                        let (_, g) = ce_loss_and_gradient(&net, &theta, &examples, &indices)?;
                        let fd =
                            fd_gradient(|t| ce_loss(&net, t, &examples, &indices), &theta, eps)?;
                        (g, fd)
                    }
                    Some(kind) => {
                        let objective = Objective::new(&examples, kind, 0.5)?;
                        let (_, g) = objective.batch_loss_and_gradient(&net, &theta, &indices)?;
                        let fd =
                            fd_gradient(|t| objective.batch_loss(&net, t, &indices), &theta, eps)?;
                        (g, fd)
                    }
                };
                let err = vector_relative_error(analytic.as_slice(), numeric.as_slice());
                if err > worst {
                    worst = err;
                    worst_case = format!(
                        "{} seed {seed}",
                        criterion.map(|c| c.name()).unwrap_or("ce")
                    );
                }
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => CheckResult::new(
            "gradient-fd",
            worst < tolerance,
            format!("max relative error {worst:.3e} ({worst_case}), tolerance {tolerance:.0e}"),
        ),
        Err(e) => CheckResult::new("gradient-fd", false, format!("error: {e}")),
    }
}

/// Matrix-free Fisher and Gauss-Newton products against explicit dense
/// matrices (20 random probes, 1e-10), the Fisher rank bound, and
/// Gauss-Newton as the exact Hessian on a zero-hidden-layer network (CE
/// loss, 1e-4 against double central differences).
pub fn check_curvature() -> CheckResult {
    let run = || -> Result<(f64, f64, usize, usize)> {
        let kappa = 0.5;
        let (net, theta, examples) = tiny_scenario(17, Some(LossLevel::State))?;
        let refs: Vec<&UtteranceExample> = examples.iter().collect();
        let mut rng = StdRng::seed_from_u64(1717);
        let dim = net.param_count();

        let dense_fisher = explicit_fisher(&net, &theta, &refs, kappa)?;
        let grads = build_fisher_gradients(&net, &theta, &refs, kappa)?;
        let dense_gn = explicit_gn(&net, &theta, &refs, kappa, LossHessianMode::Mbr)?;
        let gn_op = GnOperator::build(&net, &theta, &refs, kappa, 0.0, LossHessianMode::Mbr)?;
        let mut worst_probe: f64 = 0.0;
        for _ in 0..20 {
            let v = ParameterVector::from_vec(
                (0..dim).map(|_| sample_standard_normal(&mut rng)).collect(),
            );
            let fisher_free = fisher_apply(&grads, 0.0, &v)?;
            let fisher_dense = dense_fisher.apply(&v)?;
            worst_probe = worst_probe.max(probe_error(&fisher_free, &fisher_dense, &v));
            let gn_free = gn_op.apply(&v)?;
            let gn_dense = dense_gn.apply(&v)?;
            worst_probe = worst_probe.max(probe_error(&gn_free, &gn_dense, &v));
        }

        let rank = dense_fisher.rank(1e-10)?;

        // Zero-hidden-layer network: GN with the CE loss is the exact
        // Hessian.
        let (net_lin, theta_lin, examples_lin) = {
            let (_, _, examples) = tiny_scenario(23, None)?;
            let net = Network::new(vec![3, 4])?;
            let mut rng = StdRng::seed_from_u64(2323);
            let theta = net.init_params(&mut rng);
            (net, theta, examples)
        };
        let refs_lin: Vec<&UtteranceExample> = examples_lin.iter().collect();
        let indices: Vec<usize> = (0..examples_lin.len()).collect();
        let dense_gn_ce = explicit_gn(&net_lin, &theta_lin, &refs_lin, 1.0, LossHessianMode::Ce)?;
        let h_fd = fd_hessian(
            |t| ce_loss(&net_lin, t, &examples_lin, &indices),
            &theta_lin,
            1e-3,
        )?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in dense_gn_ce.matrix().data().iter().zip(h_fd.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        let hessian_err = num.sqrt() / den.sqrt().max(1e-12);
        Ok((worst_probe, hessian_err, rank, refs.len()))
    };
    match run() {
        Ok((probe, hessian_err, rank, batch)) => {
            let passed = probe < 1e-10 && hessian_err < 1e-4 && rank <= batch;
            CheckResult::new(
                "curvature-dense",
                passed,
                format!(
                    "probe error {probe:.3e} (tol 1e-10), GN-vs-FD-Hessian {hessian_err:.3e} (tol 1e-4), fisher rank {rank} <= {batch}"
                ),
            )
        }
        Err(e) => CheckResult::new("curvature-dense", false, format!("error: {e}")),
    }
}

fn probe_error(free: &ParameterVector, dense: &ParameterVector, v: &ParameterVector) -> f64 {
    let mut diff = 0.0;
    for (a, b) in free.as_slice().iter().zip(dense.as_slice()) {
        diff += (a - b) * (a - b);
    }
    let scale = dense.norm().max(1e-9 * v.norm()).max(1e-12);
    diff.sqrt() / scale
}

/// Lattice quantities (partition value, occupancies, MMI and MBR values)
/// against exhaustive path enumeration on random generated lattices.
pub fn check_lattice_enumeration(lattice_count: usize) -> CheckResult {
    let tolerance = 1e-10;
    let run = || -> Result<(f64, usize)> {
        let kappa = 0.5;
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        let mut seed = 100u64;
        while checked < lattice_count {
            let (net, theta, examples) = tiny_scenario(seed, Some(LossLevel::State))?;
            seed += 1;
            for example in &examples {
                if checked >= lattice_count {
                    break;
                }
                let record = forward(&net, &theta, &example.frames)?;
                let act = record.output();
                let post = forward_backward(&example.denominator, act, kappa)?;
                let paths = enumerate_paths(&example.denominator, act, kappa)?;
                let scores: Vec<f64> = paths.iter().map(|p| p.log_score).collect();
                let log_z = log_sum_exp(&scores);
                worst = worst.max((post.log_z - log_z).abs());

                // Occupancies from scratch.
                let mut gamma = Mat::zeros(example.num_frames(), act.cols());
                for (path, s) in paths.iter().zip(&scores) {
                    let p = (s - log_z).exp();
                    for (t, &state) in path.frame_states.iter().enumerate() {
                        gamma[(t, state)] += p;
                    }
                }
                for (a, b) in post.gamma.data().iter().zip(gamma.data()) {
                    worst = worst.max((a - b).abs());
                }
                for t in 0..example.num_frames() {
                    let sum: f64 = post.gamma.row(t).iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                }

                // MMI value vs enumeration.
                let mmi = mmi_utterance(example, act, kappa)?;
                let num_score: f64 = paths
                    .iter()
                    .zip(&scores)
                    .find(|(p, _)| p.arcs == example.numerator.arc_ids())
                    .map(|(_, &s)| s)
                    .expect("numerator path must be enumerated");
                worst = worst.max((mmi.value - (num_score - log_z)).abs());

                // MBR value vs enumeration.
                let mbr = mbr_utterance(example, act, kappa)?;
                let expected: f64 = paths
                    .iter()
                    .zip(&scores)
                    .map(|(p, &s)| (s - log_z).exp() * p.loss.expect("annotated"))
                    .sum();
                worst = worst.max((mbr.value - expected).abs());
                checked += 1;
            }
        }
        Ok((worst, checked))
    };
    match run() {
        Ok((worst, checked)) => CheckResult::new(
            "lattice-enumeration",
            worst < tolerance,
            format!("{checked} lattices, worst deviation {worst:.3e} (tol {tolerance:.0e})"),
        ),
        Err(e) => CheckResult::new("lattice-enumeration", false, format!("error: {e}")),
    }
}

/// CG exactness on a 20-dim SPD oracle (n iterations, residual < 1e-8),
/// model-value monotonicity, and the eigenbasis reconstruction of the
/// update against fully converged CG (1e-8).
pub fn check_cg() -> CheckResult {
    let run = || -> Result<(f64, bool, f64)> {
        let n = 20;
        let mut rng = StdRng::seed_from_u64(333);
        let a = random_spd(&mut rng, n, 0.5, 5.0)?;
        let b =
            ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(&mut rng)).collect());
        let op = DenseOperator::new(a.clone())?;
        let result = cg_solve(&op, &b, &CgConfig::new(n, 1e-10, CgInit::Zero)?)?;
        let monotone = result
            .model_values
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()));
        let eigen = eigen_diagnostic(&a, &b)?;
        let err = vector_relative_error(eigen.delta.as_slice(), result.delta.as_slice());
        Ok((result.relative_residual, monotone, err))
    };
    match run() {
        Ok((residual, monotone, eigen_err)) => CheckResult::new(
            "cg-exactness",
            residual < 1e-8 && monotone && eigen_err < 1e-8,
            format!(
                "residual {residual:.3e} (tol 1e-8), model monotone {monotone}, eigen-reconstruction error {eigen_err:.3e} (tol 1e-8)"
            ),
        ),
        Err(e) => CheckResult::new("cg-exactness", false, format!("error: {e}")),
    }
}

/// KL quadratic-expansion remainder: `|exact - quadratic| / |delta|^2`
/// must shrink at least fivefold when the step is scaled by 0.1.
pub fn check_kl_geometry(seeds: usize) -> CheckResult {
    let run = || -> Result<f64> {
        let mut worst_ratio = f64::INFINITY;
        for seed in 0..seeds as u64 {
            let (net, theta, examples) = tiny_scenario(40 + seed, None)?;
            let refs: Vec<&UtteranceExample> = examples.iter().collect();
            let mut rng = StdRng::seed_from_u64(4040 + seed);
            let mut delta = ParameterVector::from_vec(
                (0..net.param_count())
                    .map(|_| sample_standard_normal(&mut rng))
                    .collect(),
            );
            delta.scale(0.3 / delta.norm());
            let big = kl_quadratic_check(&net, &theta, &delta, &refs, 0.5)?;
            let small_step = delta.scaled(0.1);
            let small = kl_quadratic_check(&net, &theta, &small_step, &refs, 0.5)?;
            let rem_big = (big.exact_kl - big.quadratic_form).abs() / delta.norm().powi(2);
            let rem_small =
                (small.exact_kl - small.quadratic_form).abs() / small_step.norm().powi(2);
            worst_ratio = worst_ratio.min(rem_big / rem_small);
        }
        Ok(worst_ratio)
    };
    match run() {
        Ok(ratio) => CheckResult::new(
            "kl-quadratic",
            ratio >= 5.0,
            format!("worst remainder shrink factor {ratio:.2} (must be >= 5)"),
        ),
        Err(e) => CheckResult::new("kl-quadratic", false, format!("error: {e}")),
    }
}

/// Same seeded run twice: parameters bit-identical, deterministic log
/// fields byte-identical.
pub fn check_determinism() -> CheckResult {
    let run = || -> Result<bool> {
        let mut run_cfg = RunConfig::default_desk();
        run_cfg.task = SyntheticTaskConfig {
            train_utterances: 10,
            val_utterances: 4,
            min_frames: 8,
            max_frames: 12,
            ..SyntheticTaskConfig::default_desk()
        };
        run_cfg.ce_epochs = 2;
        run_cfg.epochs = 2;
        run_cfg.optimizer = crate::optim::OptimizerConfig::Hf(crate::optim::SecondOrderConfig {
            batch_size: 5,
            curvature_floor: 3,
            ..crate::optim::SecondOrderConfig::hf_default()
        });
        let a = train(&run_cfg)?;
        let b = train(&run_cfg)?;
        Ok(a.theta == b.theta && a.metrics.deterministic_csv() == b.metrics.deterministic_csv())
    };
    match run() {
        Ok(identical) => CheckResult::new(
            "determinism",
            identical,
            if identical {
                "repeated seeded run reproduced parameters and logs exactly".to_string()
            } else {
                "repeated seeded run diverged".to_string()
            },
        ),
        Err(e) => CheckResult::new("determinism", false, format!("error: {e}")),
    }
}

/// Runs the whole suite.
pub fn run_verification(cfg: &VerificationConfig) -> Vec<CheckResult> {
    vec![
        check_gradients(cfg.gradient_seeds),
        check_curvature(),
        check_lattice_enumeration(cfg.lattice_count),
        check_cg(),
        check_kl_geometry(cfg.kl_seeds),
        check_determinism(),
    ]
}
