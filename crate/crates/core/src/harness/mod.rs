//! Synthetic tasks, CE pre-training, the sequence-training loop and the
//! metrics pipeline.
//!
//! The synthetic task stands in for real speech data at desk scale: each
//! utterance's ground-truth phone sequence comes from a small Markov chain,
//! every phone emits a short run of frames through its own output states,
//! features are state-dependent Gaussian bumps plus noise, and the
//! denominator lattice adds confusable same-span alternative arcs around
//! the reference path, with branching governed by a confusion parameter.
//! The reference path is embedded in the denominator lattice by
//! construction, so the MMI criterion is bounded above by zero.
//!
//! Compute is logged in gradient-equivalent units: a forward+backward over
//! one utterance costs 1, a criterion-only evaluation 0.5, and each
//! curvature-vector product (R-op plus transpose) 1 per curvature
//! utterance. This mirrors the cost split the second-order methods are
//! judged by (gradient accumulation vs CG work).

mod compare;
mod config;
pub mod verification;

pub use compare::{
    compare, default_method_matrix, median, CompareReport, MethodOutcome, MethodSpec,
};
pub use config::{parse_run_config, read_run_config, RunConfig};

use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{
    levenshtein, load_features, load_lattice, mbr_utterance, save_features, save_lattice,
    viterbi_decode, Lattice, LatticeArc, LatticeNode, LossLevel, ReferencePath, UtteranceExample,
};
use crate::math::{sample_standard_normal, softmax_row, Mat};
use crate::optim::{
    dsag_hf_update, hf_update, ng_update, sgd_update, CriterionKind, CurvatureKind, DampingState,
    DsagState, Objective, OptimizerConfig, SequenceProblem, UpdateRecord,
};

use crate::tensor_net::{backward, forward, Network, ParameterVector};

/// Scale of the per-state feature bumps (fixed; noise is configurable).
const FEATURE_BUMP_SCALE: f64 = 2.0;
/// Per-segment frame-duration range.
const SEGMENT_FRAMES: std::ops::RangeInclusive<usize> = 2..=4;
/// Transition log-weight jitter range. Deliberately large relative to the
/// per-arc acoustic score gaps: the weak "LM" misleads decoding until the
/// acoustic model learns margins wide enough to overrule it, which is the
/// headroom sequence training exploits over the CE baseline.
const LOG_WEIGHT_JITTER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    /// Output nodes (`D_out`); must be a multiple of `num_symbols`.
    pub num_states: usize,
    pub num_symbols: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub train_utterances: usize,
    pub val_utterances: usize,
    /// Lattice branching control in `[0, 1]`: 0 gives single-path lattices.
    pub confusion: f64,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
    pub seed: u64,
    /// Per-lattice cap on the number of complete paths (keeps every
    /// generated lattice enumerable by the oracles).
    pub max_paths: usize,
}

impl SyntheticTaskConfig {
    /// The default desk-scale task: 12 states over 6 symbols, 8-dim
    /// features, 256/64 train/validation utterances of 20-40 frames. The
    /// noise and confusion levels leave the CE baseline with a clearly
    /// imperfect token error rate, so sequence training has headroom.
    pub fn default_desk() -> Self {
        SyntheticTaskConfig {
            num_states: 12,
            num_symbols: 6,
            feature_dim: 8,
            min_frames: 20,
            max_frames: 40,
            train_utterances: 256,
            val_utterances: 64,
            confusion: 0.4,
            feature_noise: 3.0,
            seed: 7,
            max_paths: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0
            || self.num_symbols == 0
            || self.feature_dim == 0
            || self.train_utterances == 0
            || self.val_utterances == 0
        {
            return Err(Error::config("task counts must be positive"));
        }
        if !self.num_states.is_multiple_of(self.num_symbols) {
            return Err(Error::config(
                "num_states must be a multiple of num_symbols (states per phone)",
            ));
        }
        let states_per_symbol = self.num_states / self.num_symbols;
        if *SEGMENT_FRAMES.start() < states_per_symbol {
            return Err(Error::config(
                "segment duration floor is shorter than the states-per-phone chain",
            ));
        }
        if self.min_frames < *SEGMENT_FRAMES.end() || self.max_frames < self.min_frames {
            return Err(Error::config("bad utterance length range"));
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return Err(Error::config("confusion must lie in [0, 1]"));
        }
        if self.feature_noise < 0.0 {
            return Err(Error::config("feature noise must be non-negative"));
        }
        if self.max_paths < 1 {
            return Err(Error::config("max_paths must be at least 1"));
        }
        Ok(())
    }

    pub fn states_per_symbol(&self) -> usize {
        self.num_states / self.num_symbols
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<UtteranceExample>,
    pub validation: Vec<UtteranceExample>,
}

impl Dataset {
    /// Re-annotates every lattice at the given loss level (no-op lattices
    /// for MMI are left untouched by passing `None`).
    pub fn annotated(&self, level: Option<LossLevel>) -> Result<Dataset> {
        let map = |examples: &[UtteranceExample]| -> Result<Vec<UtteranceExample>> {
            examples
                .iter()
                .map(|example| match level {
                    Some(level) => example.annotated(level),
                    None => Ok(example.clone()),
                })
                .collect()
        };
        Ok(Dataset {
            train: map(&self.train)?,
            validation: map(&self.validation)?,
        })
    }
}

/// State chain of one phone segment: the symbol's states in order, each
/// holding a near-equal share of the duration.
fn segment_states(symbol: usize, duration: usize, states_per_symbol: usize) -> Vec<usize> {
    let base = symbol * states_per_symbol;
    let mut labels = Vec::with_capacity(duration);
    for k in 0..duration {
        // Evenly partition [0, duration) into states_per_symbol runs.
        let state_idx = k * states_per_symbol / duration;
        labels.push(base + state_idx);
    }
    labels
}

fn generate_utterance(
    cfg: &SyntheticTaskConfig,
    centers: &Mat,
    markov_start: usize,
    rng: &mut StdRng,
    utterance_id: String,
) -> Result<UtteranceExample> {
    let sps = cfg.states_per_symbol();
    let target_frames = rng.random_range(cfg.min_frames..=cfg.max_frames);

    // Ground-truth phone segments from a self-avoiding Markov chain.
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut symbol = markov_start;
    let mut total = 0usize;
    while total < target_frames {
        let mut duration = rng.random_range(SEGMENT_FRAMES);
        if target_frames - total < duration + *SEGMENT_FRAMES.start() {
            duration = target_frames - total;
        }
        if duration < sps {
            // Fold a too-short tail into the previous segment.
            if let Some(last) = segments.last_mut() {
                last.1 += duration;
                total += duration;
                continue;
            }
            duration = sps;
        }
        segments.push((symbol, duration));
        total += duration;
        let step = rng.random_range(1..cfg.num_symbols.max(2));
        symbol = (symbol + step) % cfg.num_symbols;
    }
    let num_frames = total;

    // Features: state-dependent bumps plus noise.
    let mut frame_states = Vec::with_capacity(num_frames);
    for &(sym, dur) in &segments {
        frame_states.extend(segment_states(sym, dur, sps));
    }
    let mut features = Mat::zeros(num_frames, cfg.feature_dim);
    for (t, &state) in frame_states.iter().enumerate() {
        for d in 0..cfg.feature_dim {
            features[(t, d)] =
                centers[(state, d)] + cfg.feature_noise * sample_standard_normal(rng);
        }
    }

    // Lattice: nodes at segment boundaries, reference arc plus confusable
    // alternatives per segment, path count capped for enumerability.
    let mut nodes = vec![LatticeNode { time: 0 }];
    let mut time = 0;
    for &(_, dur) in &segments {
        time += dur;
        nodes.push(LatticeNode { time });
    }
    let mut arcs: Vec<LatticeArc> = Vec::new();
    let mut numerator_arcs = Vec::with_capacity(segments.len());
    let mut path_count = 1usize;
    let alt_prob = (2.0 * cfg.confusion / (cfg.num_symbols.max(2) - 1) as f64).min(1.0);
    for (j, &(sym, dur)) in segments.iter().enumerate() {
        numerator_arcs.push(arcs.len());
        arcs.push(LatticeArc {
            src: j,
            dst: j + 1,
            symbol: sym,
            labels: segment_states(sym, dur, sps),
            log_weight: rng.random_range(-LOG_WEIGHT_JITTER..LOG_WEIGHT_JITTER),
            local_loss: None,
        });
        let mut alts = 0usize;
        for other in 0..cfg.num_symbols {
            if other == sym {
                continue;
            }
            let branch = rng.random::<f64>() < alt_prob;
            if branch && path_count * (alts + 2) <= cfg.max_paths {
                arcs.push(LatticeArc {
                    src: j,
                    dst: j + 1,
                    symbol: other,
                    labels: segment_states(other, dur, sps),
                    log_weight: rng.random_range(-LOG_WEIGHT_JITTER..LOG_WEIGHT_JITTER),
                    local_loss: None,
                });
                alts += 1;
            }
        }
        path_count *= alts + 1;
    }
    let end = nodes.len() - 1;
    let lattice = Lattice::new(nodes, arcs, 0, end)?;
    let numerator = ReferencePath::from_arcs(&lattice, numerator_arcs)?;
    let frames = crate::tensor_net::FrameBatch::new(features, utterance_id)?;
    UtteranceExample::new(frames, numerator, lattice)
}

/// Generates the train and validation sets; same seed, same bytes.
pub fn generate_task(cfg: &SyntheticTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut centers = Mat::zeros(cfg.num_states, cfg.feature_dim);
    for v in centers.data_mut() {
        *v = FEATURE_BUMP_SCALE * sample_standard_normal(&mut rng);
    }
    let make = |count: usize, prefix: &str, rng: &mut StdRng| -> Result<Vec<UtteranceExample>> {
        (0..count)
            .map(|i| {
                let start = rng.random_range(0..cfg.num_symbols);
                generate_utterance(cfg, &centers, start, rng, format!("{prefix}{i:04}"))
            })
            .collect()
    };
    let train = make(cfg.train_utterances, "train", &mut rng)?;
    let validation = make(cfg.val_utterances, "val", &mut rng)?;
    Ok(Dataset { train, validation })
}

/// Writes a dataset as one `.lat` + `.feat` pair per utterance under
/// `dir/train` and `dir/validation`. Lattices are saved unannotated; the
/// loss level is chosen at training time.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for (sub, examples) in [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
    ] {
        let subdir = dir.join(sub);
        std::fs::create_dir_all(&subdir)?;
        for (i, example) in examples.iter().enumerate() {
            save_lattice(
                &subdir.join(format!("utt{i:04}.lat")),
                &example.denominator,
                Some(&example.numerator),
            )?;
            save_features(&subdir.join(format!("utt{i:04}.feat")), &example.frames)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut out = Vec::new();
    for sub in ["train", "validation"] {
        let subdir = dir.join(sub);
        let mut stems: Vec<String> = std::fs::read_dir(&subdir)?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                name.strip_suffix(".lat").map(str::to_string)
            })
            .collect();
        stems.sort();
        let mut examples = Vec::with_capacity(stems.len());
        for stem in stems {
            let (lattice, numerator_ids) = load_lattice(&subdir.join(format!("{stem}.lat")))?;
            let numerator_ids = numerator_ids
                .ok_or_else(|| Error::data(format!("{stem}.lat carries no numerator path")))?;
            let numerator = ReferencePath::from_arcs(&lattice, numerator_ids)?;
            let frames = load_features(&subdir.join(format!("{stem}.feat")))?;
            examples.push(UtteranceExample::new(frames, numerator, lattice)?);
        }
        out.push(examples);
    }
    let validation = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Dataset { train, validation })
}

/// Frame-level cross-entropy of `softmax(a_t)` against the reference
/// states, averaged over all frames of the indexed utterances.
pub fn ce_loss(
    net: &Network,
    theta: &ParameterVector,
    examples: &[UtteranceExample],
    indices: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for &i in indices {
        let example = &examples[i];
        let record = forward(net, theta, &example.frames)?;
        for t in 0..example.num_frames() {
            let mut y = record.output().row(t).to_vec();
            softmax_row(&mut y);
            let target = example.numerator.frame_states()[t];
            total -= y[target].max(f64::MIN_POSITIVE).ln();
        }
        frames += example.num_frames();
    }
    Ok(total / frames as f64)
}

pub fn ce_loss_and_gradient(
    net: &Network,
    theta: &ParameterVector,
    examples: &[UtteranceExample],
    indices: &[usize],
) -> Result<(f64, ParameterVector)> {
    let total_frames: usize = indices.iter().map(|&i| examples[i].num_frames()).sum();
    let mut loss = 0.0;
    let mut grad = ParameterVector::zeros(net.param_count());
    for &i in indices {
        let example = &examples[i];
        let record = forward(net, theta, &example.frames)?;
        let t_frames = example.num_frames();
        let mut df = Mat::zeros(t_frames, net.output_dim());
        for t in 0..t_frames {
            let mut y = record.output().row(t).to_vec();
            softmax_row(&mut y);
            let target = example.numerator.frame_states()[t];
            loss -= y[target].max(f64::MIN_POSITIVE).ln();
            for (o, &p) in y.iter().enumerate() {
                df[(t, o)] = (p - if o == target { 1.0 } else { 0.0 }) / total_frames as f64;
            }
        }
        grad.axpy(1.0, &backward(net, theta, &record, &df)?);
    }
    Ok((loss / total_frames as f64, grad))
}

/// Fraction of frames whose arg-max output activation hits the reference
/// state.
pub fn frame_accuracy(
    net: &Network,
    theta: &ParameterVector,
    examples: &[UtteranceExample],
) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for example in examples {
        let record = forward(net, theta, &example.frames)?;
        for t in 0..example.num_frames() {
            let row = record.output().row(t);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == example.numerator.frame_states()[t] {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone)]
pub struct CeReport {
    pub epochs_run: usize,
    pub final_train_ce: f64,
    pub val_frame_accuracy: f64,
}

/// Frame-level CE pre-training with plain utterance-minibatch SGD.
pub fn ce_pretrain(
    net: &Network,
    theta0: &ParameterVector,
    dataset: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut StdRng,
) -> Result<(ParameterVector, CeReport)> {
    if learning_rate <= 0.0 || batch_size == 0 {
        return Err(Error::config(
            "ce pre-training needs a positive rate and batch size",
        ));
    }
    let mut theta = theta0.clone();
    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_train_ce = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let (loss, grad) = ce_loss_and_gradient(net, &theta, &dataset.train, &batch)?;
            if !loss.is_finite() {
                return Err(Error::numeric("CE pre-training diverged (non-finite loss)"));
            }
            theta.axpy(-learning_rate, &grad);
            final_train_ce = loss;
        }
    }
    let val_frame_accuracy = frame_accuracy(net, &theta, &dataset.validation)?;
    Ok((
        theta,
        CeReport {
            epochs_run: epochs,
            final_train_ce,
            val_frame_accuracy,
        },
    ))
}

/// Criterion value (minimization form) and its normalized accuracy over a
/// whole example list.
///
/// MBR accuracy is `1 - total expected loss / total reference units`
/// (units: numerator arcs for the phone level, frames for the state
/// level). For MMI, where no unit normalizer exists, accuracy is the
/// geometric-mean reference posterior `exp(mean log P(H^r|O^r))`.
pub fn criterion_metrics(
    net: &Network,
    theta: &ParameterVector,
    examples: &[UtteranceExample],
    criterion: CriterionKind,
    kappa: f64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut unit_sum = 0.0;
    for example in examples {
        let record = forward(net, theta, &example.frames)?;
        match criterion {
            CriterionKind::Mmi => {
                let value = crate::lattice::mmi_utterance(example, record.output(), kappa)?.value;
                loss_sum += -value;
                unit_sum += 1.0;
            }
            CriterionKind::Mpe | CriterionKind::Smbr => {
                let value = mbr_utterance(example, record.output(), kappa)?.value;
                loss_sum += value;
                unit_sum += match criterion {
                    CriterionKind::Mpe => example.numerator.symbols().len() as f64,
                    _ => example.num_frames() as f64,
                };
            }
        }
    }
    let r = examples.len() as f64;
    let value = loss_sum / r;
    let accuracy = match criterion {
        CriterionKind::Mmi => (-value).exp(),
        _ => 1.0 - loss_sum / unit_sum,
    };
    Ok((value, accuracy))
}

/// Validation token error rate: Viterbi decode of each lattice against the
/// reference symbol sequence, Levenshtein-normalized by reference length.
pub fn token_error_rate(
    net: &Network,
    theta: &ParameterVector,
    examples: &[UtteranceExample],
    kappa: f64,
) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for example in examples {
        let record = forward(net, theta, &example.frames)?;
        let decoded = viterbi_decode(&example.denominator, record.output(), kappa)?;
        edits += levenshtein(&decoded.symbols, example.numerator.symbols());
        ref_len += example.numerator.symbols().len();
    }
    Ok(edits as f64 / ref_len as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateRow {
    pub update_index: usize,
    pub epoch: usize,
    pub criterion_before: f64,
    pub criterion_after: f64,
    pub step_norm: f64,
    pub lambda: f64,
    pub cg_iterations: usize,
    pub backtracks: usize,
    pub accepted: bool,
    pub curvature_batch: usize,
    pub grad_equiv: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub updates_done: usize,
    pub train_criterion: f64,
    pub train_accuracy: f64,
    pub val_criterion: f64,
    pub val_accuracy: f64,
    pub val_token_error_rate: f64,
    pub cumulative_grad_equiv: f64,
    pub wall_clock_s: f64,
}

/// Final summary row in the method/epochs/updates/accuracy/TER schema.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub method: String,
    pub criterion: String,
    pub epochs: usize,
    pub updates: usize,
    pub train_criterion: f64,
    pub train_accuracy: f64,
    pub val_criterion: f64,
    pub val_accuracy: f64,
    pub val_token_error_rate: f64,
    pub ce_val_frame_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsLog {
    pub update_rows: Vec<UpdateRow>,
    pub epoch_rows: Vec<EpochRow>,
    pub summary: Summary,
}

/// Renders the metrics CSV: one `kind` column holding both row types, with
/// each epoch row following that epoch's updates. Wall-clock columns are
/// the only non-deterministic fields. Also used to flush partial logs when
/// a run aborts mid-training.
pub fn render_metrics_csv(update_rows: &[UpdateRow], epoch_rows: &[EpochRow]) -> String {
    let mut text = String::new();
    writeln!(
        text,
        "kind,epoch,update,criterion_before,criterion_after,step_norm,lambda,cg_iterations,backtracks,accepted,curvature_batch,train_criterion,train_accuracy,val_criterion,val_accuracy,val_token_error_rate,grad_equiv,wall_clock_s"
    )
    .unwrap();
    let mut updates = update_rows.iter().peekable();
    let write_update = |text: &mut String, u: &UpdateRow| {
        writeln!(
            text,
            "update,{},{},{},{},{},{},{},{},{},{},,,,,,{},{}",
            u.epoch,
            u.update_index,
            u.criterion_before,
            u.criterion_after,
            u.step_norm,
            u.lambda,
            u.cg_iterations,
            u.backtracks,
            u.accepted,
            u.curvature_batch,
            u.grad_equiv,
            u.wall_clock_s
        )
        .unwrap();
    };
    for epoch_row in epoch_rows {
        while let Some(u) = updates.peek() {
            if u.epoch > epoch_row.epoch {
                break;
            }
            let u = updates.next().unwrap();
            write_update(&mut text, u);
        }
        writeln!(
            text,
            "epoch,{},{},,,,,,,,,{},{},{},{},{},{},{}",
            epoch_row.epoch,
            epoch_row.updates_done,
            epoch_row.train_criterion,
            epoch_row.train_accuracy,
            epoch_row.val_criterion,
            epoch_row.val_accuracy,
            epoch_row.val_token_error_rate,
            epoch_row.cumulative_grad_equiv,
            epoch_row.wall_clock_s
        )
        .unwrap();
    }
    // Updates from an epoch whose summary row never landed (aborted run).
    for u in updates {
        write_update(&mut text, u);
    }
    text
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        render_metrics_csv(&self.update_rows, &self.epoch_rows)
    }

    /// CSV with wall-clock columns blanked; byte-identical across reruns of
    /// the same seeded configuration.
    pub fn deterministic_csv(&self) -> String {
        let csv = self.to_csv();
        let mut out = String::with_capacity(csv.len());
        for (i, line) in csv.lines().enumerate() {
            if i == 0 {
                out.push_str(line);
            } else {
                let cut = line.rfind(',').unwrap();
                out.push_str(&line[..=cut]);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: MetricsLog,
    pub theta: ParameterVector,
    pub net: Network,
    pub ce_report: CeReport,
}

/// Dataset, network and CE starting point shared by every method under a
/// given run configuration.
pub struct Prepared {
    pub dataset: Dataset,
    pub net: Network,
    pub theta_ce: ParameterVector,
    pub ce_report: CeReport,
}

pub(crate) fn subseed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generates the task, annotates lattices for the criterion and runs CE
/// pre-training.
pub fn prepare(run: &RunConfig) -> Result<Prepared> {
    run.validate()?;
    let dataset = generate_task(&run.task)?.annotated(run.criterion.loss_level())?;
    let net = Network::new(run.network_dims())?;
    let mut ce_rng = StdRng::seed_from_u64(subseed(run.seed, "ce"));
    let theta0 = net.init_params(&mut ce_rng);
    let (theta_ce, ce_report) = ce_pretrain(
        &net,
        &theta0,
        &dataset,
        run.ce_epochs,
        run.ce_learning_rate,
        run.ce_batch_size,
        &mut ce_rng,
    )?;
    Ok(Prepared {
        dataset,
        net,
        theta_ce,
        ce_report,
    })
}

#[allow(clippy::too_many_arguments)]
fn epoch_metrics(
    epoch: usize,
    updates_done: usize,
    net: &Network,
    theta: &ParameterVector,
    dataset: &Dataset,
    criterion: CriterionKind,
    kappa: f64,
    cumulative_grad_equiv: f64,
    wall_clock_s: f64,
) -> Result<EpochRow> {
    let (train_criterion, train_accuracy) =
        criterion_metrics(net, theta, &dataset.train, criterion, kappa)?;
    let (val_criterion, val_accuracy) =
        criterion_metrics(net, theta, &dataset.validation, criterion, kappa)?;
    let val_ter = token_error_rate(net, theta, &dataset.validation, kappa)?;
    Ok(EpochRow {
        epoch,
        updates_done,
        train_criterion,
        train_accuracy,
        val_criterion,
        val_accuracy,
        val_token_error_rate: val_ter,
        cumulative_grad_equiv,
        wall_clock_s,
    })
}

fn record_to_row(record: &UpdateRecord, epoch: usize, grad_equiv: f64) -> UpdateRow {
    UpdateRow {
        update_index: record.update_index,
        epoch,
        criterion_before: record.criterion_before,
        criterion_after: record.criterion_after,
        step_norm: record.step_norm,
        lambda: record.lambda,
        cg_iterations: record.cg_iterations,
        backtracks: record.backtracks,
        accepted: record.accepted,
        curvature_batch: record.curvature_batch_size,
        grad_equiv,
        wall_clock_s: record.wall_clock_s,
    }
}

/// Gradient-equivalent cost of one update (documented in the module docs).
fn update_grad_equiv(record: &UpdateRecord, batch_size: usize) -> f64 {
    let gradient = batch_size as f64;
    let cg = (record.cg_iterations as f64 + 1.0) * record.curvature_batch_size as f64;
    let evals = 0.5 * record.loss_evals as f64 * batch_size as f64;
    gradient + cg + evals
}

/// The training loop body; on error the rows gathered so far stay in the
/// caller's vectors so a partial log can be flushed.
fn sequence_train_inner(
    prepared: &Prepared,
    run: &RunConfig,
    update_rows: &mut Vec<UpdateRow>,
    epoch_rows: &mut Vec<EpochRow>,
) -> Result<ParameterVector> {
    let started = std::time::Instant::now();
    let net = &prepared.net;
    let dataset = &prepared.dataset;
    let objective = Objective::new(&dataset.train, run.criterion, run.kappa)?;
    let mut theta = prepared.theta_ce.clone();
    let mut rng = StdRng::seed_from_u64(subseed(run.seed, "sequence"));

    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cumulative_grad_equiv = 0.0;
    let mut update_index = 0usize;

    // Epoch 0: the CE baseline row.
    epoch_rows.push(epoch_metrics(
        0,
        0,
        net,
        &theta,
        dataset,
        run.criterion,
        run.kappa,
        0.0,
        started.elapsed().as_secs_f64(),
    )?);

    let mut damping = DampingState::new(match &run.optimizer {
        OptimizerConfig::Hf(cfg) | OptimizerConfig::Ng(cfg) => cfg.lambda_init,
        OptimizerConfig::DsagHf(cfg) => cfg.base.lambda_init,
        OptimizerConfig::Sgd(_) => 0.0,
    });
    let mut dsag_state = DsagState::new();

    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        dsag_state.reset();
        let batch_size = run.resolved_batch_size(n);
        for chunk in order.chunks(batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let (next, mut record) = match &run.optimizer {
                OptimizerConfig::Sgd(cfg) => sgd_update(net, &objective, &theta, &batch, cfg)?,
                OptimizerConfig::Hf(cfg) => {
                    let problem = SequenceProblem {
                        net,
                        objective: &objective,
                        batch: &batch,
                        curvature_kind: CurvatureKind::GaussNewton,
                        curvature_fraction: cfg.curvature_fraction,
                        curvature_floor: cfg.curvature_floor,
                    };
                    hf_update(&problem, &theta, cfg, &mut damping, &mut rng)?
                }
                OptimizerConfig::Ng(cfg) => {
                    let problem = SequenceProblem {
                        net,
                        objective: &objective,
                        batch: &batch,
                        curvature_kind: CurvatureKind::EmpiricalFisher,
                        curvature_fraction: cfg.curvature_fraction,
                        curvature_floor: cfg.curvature_floor,
                    };
                    ng_update(&problem, &theta, cfg, &mut damping, &mut rng)?
                }
                OptimizerConfig::DsagHf(cfg) => {
                    let problem = SequenceProblem {
                        net,
                        objective: &objective,
                        batch: &batch,
                        curvature_kind: CurvatureKind::GaussNewton,
                        curvature_fraction: cfg.base.curvature_fraction,
                        curvature_floor: cfg.base.curvature_floor,
                    };
                    dsag_hf_update(
                        &problem,
                        &theta,
                        cfg,
                        &mut damping,
                        &mut dsag_state,
                        &mut rng,
                    )?
                }
            };
            theta = next;
            update_index += 1;
            record.update_index = update_index;
            let cost = update_grad_equiv(&record, batch.len());
            cumulative_grad_equiv += cost;
            update_rows.push(record_to_row(&record, epoch, cost));
        }
        epoch_rows.push(epoch_metrics(
            epoch,
            update_index,
            net,
            &theta,
            dataset,
            run.criterion,
            run.kappa,
            cumulative_grad_equiv,
            started.elapsed().as_secs_f64(),
        )?);
    }
    Ok(theta)
}

fn assemble_output(
    prepared: &Prepared,
    run: &RunConfig,
    theta: ParameterVector,
    update_rows: Vec<UpdateRow>,
    epoch_rows: Vec<EpochRow>,
) -> TrainOutput {
    let last = epoch_rows.last().unwrap();
    let summary = Summary {
        method: run.optimizer.method_name().to_string(),
        criterion: run.criterion.name().to_string(),
        epochs: run.epochs,
        updates: update_rows.len(),
        train_criterion: last.train_criterion,
        train_accuracy: last.train_accuracy,
        val_criterion: last.val_criterion,
        val_accuracy: last.val_accuracy,
        val_token_error_rate: last.val_token_error_rate,
        ce_val_frame_accuracy: prepared.ce_report.val_frame_accuracy,
    };
    TrainOutput {
        metrics: MetricsLog {
            update_rows,
            epoch_rows,
            summary,
        },
        theta,
        net: prepared.net.clone(),
        ce_report: prepared.ce_report.clone(),
    }
}

/// Sequence training from a prepared CE starting point.
pub fn sequence_train(prepared: &Prepared, run: &RunConfig) -> Result<TrainOutput> {
    let mut update_rows = Vec::new();
    let mut epoch_rows = Vec::new();
    let theta = sequence_train_inner(prepared, run, &mut update_rows, &mut epoch_rows)?;
    Ok(assemble_output(
        prepared,
        run,
        theta,
        update_rows,
        epoch_rows,
    ))
}

/// Full training run: task generation, CE pre-training, sequence training.
pub fn train(run: &RunConfig) -> Result<TrainOutput> {
    let prepared = prepare(run)?;
    sequence_train(&prepared, run)
}

/// Full training run that writes `metrics.csv`, `summary.json` and
/// `checkpoint.ckpt` under `out_dir`. If the optimizer aborts mid-run the
/// partial metrics log is still flushed before the error propagates.
pub fn train_to_dir(run: &RunConfig, out_dir: &Path) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let prepared = prepare(run)?;
    let mut update_rows = Vec::new();
    let mut epoch_rows = Vec::new();
    match sequence_train_inner(&prepared, run, &mut update_rows, &mut epoch_rows) {
        Ok(theta) => {
            let out = assemble_output(&prepared, run, theta, update_rows, epoch_rows);
            std::fs::write(out_dir.join("metrics.csv"), out.metrics.to_csv())?;
            let json = serde_json::to_string_pretty(&out.metrics.summary)
                .expect("summary serialization cannot fail");
            std::fs::write(out_dir.join("summary.json"), json)?;
            crate::tensor_net::save_checkpoint(
                &out_dir.join("checkpoint.ckpt"),
                &out.net,
                &out.theta,
            )?;
            Ok(out)
        }
        Err(e) => {
            let _ = std::fs::write(
                out_dir.join("metrics.csv"),
                render_metrics_csv(&update_rows, &epoch_rows),
            );
            Err(e)
        }
    }
}
