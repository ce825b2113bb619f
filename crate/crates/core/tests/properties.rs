//! Cross-module property tests: structural invariants checked over
//! randomized nets, parameters and generated lattices.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

use seqtrain::harness::{generate_task, SyntheticTaskConfig};
use seqtrain::lattice::{forward_backward, levenshtein, mbr_utterance, LossLevel};
use seqtrain::math::{log_sum_exp, sample_standard_normal, Mat};
use seqtrain::oracle::{enumerate_paths, fd_gradient};
use seqtrain::tensor_net::{
    backward, forward, load_checkpoint, rop, save_checkpoint, FrameBatch, Network, ParameterVector,
};

fn random_net(rng: &mut StdRng, depth: usize) -> (Network, ParameterVector) {
    let mut dims = vec![2 + (rng.next_u64() % 3) as usize];
    for _ in 0..depth {
        dims.push(2 + (rng.next_u64() % 4) as usize);
    }
    dims.push(2 + (rng.next_u64() % 3) as usize);
    let net = Network::new(dims).unwrap();
    let theta = net.init_params(rng);
    (net, theta)
}

use rand::RngCore;

fn random_mat(rng: &mut StdRng, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = sample_standard_normal(rng);
    }
    m
}

fn random_pv(rng: &mut StdRng, n: usize) -> ParameterVector {
    ParameterVector::from_vec((0..n).map(|_| sample_standard_normal(rng)).collect())
}

fn small_task(seed: u64, confusion: f64) -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        num_states: 6,
        num_symbols: 3,
        feature_dim: 3,
        min_frames: 8,
        max_frames: 14,
        train_utterances: 4,
        val_utterances: 1,
        confusion,
        feature_noise: 1.2,
        seed,
        max_paths: 64,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// <u, Jv> = <J^T u, v> for random nets, batches and probes.
    #[test]
    fn adjoint_identity(seed in any::<u64>(), depth in 1usize..3) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, depth);
        let frames = random_mat(&mut rng, 1 + (seed % 3) as usize, net.input_dim());
        let batch = FrameBatch::new(frames, "p").unwrap();
        let record = forward(&net, &theta, &batch).unwrap();
        let v = random_pv(&mut rng, net.param_count());
        let u = random_mat(&mut rng, batch.num_frames(), net.output_dim());
        let jv = rop(&net, &theta, &record, &v).unwrap();
        let jtu = backward(&net, &theta, &record, &u).unwrap();
        let lhs: f64 = u.data().iter().zip(jv.data()).map(|(a, b)| a * b).sum();
        let rhs = jtu.dot(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    /// rop(a v1 + b v2) = a rop(v1) + b rop(v2).
    #[test]
    fn rop_linearity(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, 2);
        let frames = random_mat(&mut rng, 2, net.input_dim());
        let batch = FrameBatch::new(frames, "p").unwrap();
        let record = forward(&net, &theta, &batch).unwrap();
        let v1 = random_pv(&mut rng, net.param_count());
        let v2 = random_pv(&mut rng, net.param_count());
        let mut combo = v1.scaled(a);
        combo.axpy(b, &v2);
        let lhs = rop(&net, &theta, &record, &combo).unwrap();
        let j1 = rop(&net, &theta, &record, &v1).unwrap();
        let j2 = rop(&net, &theta, &record, &v2).unwrap();
        for (i, &l) in lhs.data().iter().enumerate() {
            let r = a * j1.data()[i] + b * j2.data()[i];
            prop_assert!((l - r).abs() <= 1e-13 * (1.0 + r.abs()));
        }
    }

    /// Reassembling the flat vector from its layer blocks is the identity,
    /// and the checkpoint container round-trips values exactly.
    #[test]
    fn parameter_layout_roundtrip(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (net, mut theta) = random_net(&mut rng, 2);
        for v in theta.as_mut_slice() {
            *v += sample_standard_normal(&mut rng);
        }
        let mut reassembled = vec![0.0; theta.len()];
        for l in 0..net.num_transitions() {
            let range = net.layer_range(l);
            reassembled[range.clone()].copy_from_slice(&theta.as_slice()[range]);
        }
        prop_assert_eq!(reassembled.as_slice(), theta.as_slice());

        let dir = std::env::temp_dir().join("seqtrain_prop_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{seed}.ckpt"));
        save_checkpoint(&path, &net, &theta).unwrap();
        let (net2, theta2) = load_checkpoint(&path).unwrap();
        let _ = std::fs::remove_file(&path);
        prop_assert_eq!(net.layer_dims(), net2.layer_dims());
        prop_assert_eq!(theta, theta2);
    }

    /// Per-frame occupancies sum to one, the partition value matches
    /// enumeration, MMI stays non-positive and MBR non-negative.
    #[test]
    fn lattice_invariants(seed in any::<u64>(), confusion in 0.1f64..0.8) {
        let dataset = generate_task(&small_task(seed, confusion)).unwrap();
        let net = Network::new(vec![3, 4, 6]).unwrap();
        let mut rng = StdRng::seed_from_u64(seed ^ 0xabc);
        let theta = net.init_params(&mut rng);
        for example in dataset.train.iter().take(2) {
            let record = forward(&net, &theta, &example.frames).unwrap();
            let act = record.output();
            let post = forward_backward(&example.denominator, act, 0.5).unwrap();
            for t in 0..example.num_frames() {
                let sum: f64 = post.gamma.row(t).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-10);
            }
            let paths = enumerate_paths(&example.denominator, act, 0.5).unwrap();
            let z = log_sum_exp(&paths.iter().map(|p| p.log_score).collect::<Vec<_>>());
            prop_assert!((z - post.log_z).abs() < 1e-10);

            let mmi = seqtrain::lattice::mmi_utterance(example, act, 0.5).unwrap();
            prop_assert!(mmi.value <= 1e-12);

            let annotated = example.annotated(LossLevel::State).unwrap();
            let mbr = mbr_utterance(&annotated, act, 0.5).unwrap();
            prop_assert!(mbr.value >= -1e-12);
        }
    }

    /// Levenshtein distance: symmetry, triangle inequality and bounds.
    #[test]
    fn levenshtein_properties(
        a in proptest::collection::vec(0u8..4, 0..10),
        b in proptest::collection::vec(0u8..4, 0..10),
        c in proptest::collection::vec(0u8..4, 0..10),
    ) {
        let dab = levenshtein(&a, &b);
        let dba = levenshtein(&b, &a);
        prop_assert_eq!(dab, dba);
        let dac = levenshtein(&a, &c);
        let dcb = levenshtein(&c, &b);
        prop_assert!(dab <= dac + dcb);
        prop_assert!(dab >= a.len().abs_diff(b.len()));
        prop_assert!(dab <= a.len().max(b.len()));
    }

    /// Lowering kappa strictly increases the entropy of the path posterior
    /// whenever scores are not all equal.
    #[test]
    fn kappa_monotone_entropy(seed in any::<u64>()) {
        let dataset = generate_task(&small_task(seed, 0.6)).unwrap();
        let net = Network::new(vec![3, 4, 6]).unwrap();
        let mut rng = StdRng::seed_from_u64(seed ^ 0xdef);
        let theta = net.init_params(&mut rng);
        let example = &dataset.train[0];
        let record = forward(&net, &theta, &example.frames).unwrap();
        // Raw (kappa = 1) scores; temper them for each kappa below.
        let paths = enumerate_paths(&example.denominator, record.output(), 1.0).unwrap();
        let raw: Vec<f64> = paths.iter().map(|p| p.log_score).collect();
        let spread = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - raw.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(raw.len() >= 2 && spread > 1e-9);
        let entropy = |kappa: f64| -> f64 {
            let scaled: Vec<f64> = raw.iter().map(|s| kappa * s).collect();
            let z = log_sum_exp(&scaled);
            -scaled
                .iter()
                .map(|s| {
                    let p = (s - z).exp();
                    if p > 0.0 { p * (s - z) } else { 0.0 }
                })
                .sum::<f64>()
        };
        let h1 = entropy(1.0);
        let h05 = entropy(0.5);
        let h01 = entropy(0.1);
        prop_assert!(h05 > h1, "entropy must increase when kappa drops to 0.5");
        prop_assert!(h01 > h05, "entropy must increase when kappa drops to 0.1");
    }

    /// A denominator that pins all mass on one path makes the MBR
    /// activation gradient vanish.
    #[test]
    fn mbr_stationary_at_certainty(seed in any::<u64>()) {
        let dataset = generate_task(&small_task(seed, 0.0)).unwrap();
        let net = Network::new(vec![3, 4, 6]).unwrap();
        let mut rng = StdRng::seed_from_u64(seed ^ 0x111);
        let theta = net.init_params(&mut rng);
        let example = dataset.train[0].annotated(LossLevel::State).unwrap();
        let record = forward(&net, &theta, &example.frames).unwrap();
        let out = mbr_utterance(&example, record.output(), 0.7).unwrap();
        for &g in out.activation_gradient.data() {
            prop_assert!(g.abs() < 1e-12);
        }
    }
}

/// Halving the finite-difference step shrinks the gradient-check error by
/// roughly 4x (central differences are second order).
#[test]
fn finite_difference_convergence_order() {
    let dataset = generate_task(&small_task(5, 0.5)).unwrap();
    let net = Network::new(vec![3, 4, 6]).unwrap();
    let mut rng = StdRng::seed_from_u64(55);
    let theta = net.init_params(&mut rng);
    let example = dataset.train[0].annotated(LossLevel::State).unwrap();

    let objective = |t: &ParameterVector| -> seqtrain::Result<f64> {
        let record = forward(&net, t, &example.frames)?;
        Ok(mbr_utterance(&example, record.output(), 0.5)?.value)
    };
    let record = forward(&net, &theta, &example.frames).unwrap();
    let crit = mbr_utterance(&example, record.output(), 0.5).unwrap();
    let analytic = backward(&net, &theta, &record, &crit.activation_gradient).unwrap();

    let error_at = |eps: f64| -> f64 {
        let fd = fd_gradient(objective, &theta, eps).unwrap();
        let mut num = 0.0;
        for (a, b) in analytic.as_slice().iter().zip(fd.as_slice()) {
            num += (a - b) * (a - b);
        }
        num.sqrt()
    };
    let e1 = error_at(2e-3);
    let e2 = error_at(1e-3);
    let ratio = e1 / e2;
    assert!(
        (2.5..6.0).contains(&ratio),
        "error ratio {ratio} should be near 4 for second-order convergence (e1={e1:.3e}, e2={e2:.3e})"
    );
}
