//! Hypothesis lattices and the sequence-discriminative criteria.
//!
//! A lattice is a DAG of timed arcs. Nodes carry frame times (number of
//! frames consumed so far); an arc from a node at time `t0` to a node at
//! time `t1 > t0` spans frames `t0..t1` and carries one output-state label
//! per spanned frame, a log transition weight, and (after annotation) a
//! local loss. Because spans are induced by node times, the arcs along any
//! start-to-end path tile the full frame range exactly once.
//!
//! The per-frame acoustic log-score of state `i` at frame `t` is the
//! network's linear output activation `a_t(i)`; an arc's acoustic score is
//! the sum over its span. Forward-backward, the criteria and decoding all
//! raise both transition weights and acoustic scores to the acoustic scale
//! `kappa` and work entirely in the log domain.

mod criteria;
mod format;

pub use criteria::{mbr_criterion, mbr_utterance, mmi_criterion, mmi_utterance};
pub use format::{load_features, load_lattice, save_features, save_lattice};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, Mat, LOG_ZERO};
use crate::tensor_net::FrameBatch;

pub type NodeId = usize;
pub type ArcId = usize;
pub type StateLabel = usize;
pub type Symbol = usize;

/// Granularity of the local loss annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossLevel {
    /// One loss per arc unit: 0 if the arc's symbol matches the
    /// time-overlapping reference symbol for more than half its span, else 1.
    Phone,
    /// Per-frame 0/1 state mismatch count over the arc's span.
    State,
}

impl std::fmt::Display for LossLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossLevel::Phone => write!(f, "phone"),
            LossLevel::State => write!(f, "state"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeNode {
    /// Frames consumed on any path reaching this node (start = 0, end = T).
    pub time: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeArc {
    pub src: NodeId,
    pub dst: NodeId,
    pub symbol: Symbol,
    /// Output-state label per spanned frame; length equals the span.
    pub labels: Vec<StateLabel>,
    /// Log transition weight `log t_q`.
    pub log_weight: f64,
    /// Local loss `L(q, q^r)`; present only after annotation.
    pub local_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Lattice {
    nodes: Vec<LatticeNode>,
    arcs: Vec<LatticeArc>,
    start: NodeId,
    end: NodeId,
    num_frames: usize,
    out_arcs: Vec<Vec<ArcId>>,
    in_arcs: Vec<Vec<ArcId>>,
    /// Arc ids sorted by source-node time (a topological order on arcs).
    topo_arcs: Vec<ArcId>,
    loss_level: Option<LossLevel>,
}

impl Lattice {
    pub fn new(
        nodes: Vec<LatticeNode>,
        arcs: Vec<LatticeArc>,
        start: NodeId,
        end: NodeId,
    ) -> Result<Self> {
        if nodes.is_empty() || arcs.is_empty() {
            return Err(Error::usage("lattice must have nodes and arcs"));
        }
        if start >= nodes.len() || end >= nodes.len() {
            return Err(Error::data("start/end node id out of range"));
        }
        if nodes[start].time != 0 {
            return Err(Error::data("start node must have time 0"));
        }
        let num_frames = nodes[end].time;
        if num_frames == 0 {
            return Err(Error::data("end node must have positive time"));
        }
        let mut out_arcs = vec![Vec::new(); nodes.len()];
        let mut in_arcs = vec![Vec::new(); nodes.len()];
        for (id, arc) in arcs.iter().enumerate() {
            if arc.src >= nodes.len() || arc.dst >= nodes.len() {
                return Err(Error::data(format!("arc {id} references missing node")));
            }
            let t0 = nodes[arc.src].time;
            let t1 = nodes[arc.dst].time;
            if t1 <= t0 {
                return Err(Error::data(format!(
                    "arc {id} does not advance time ({t0} -> {t1})"
                )));
            }
            if arc.labels.len() != t1 - t0 {
                return Err(Error::data(format!(
                    "arc {id} carries {} labels for a span of {}",
                    arc.labels.len(),
                    t1 - t0
                )));
            }
            if !arc.log_weight.is_finite() {
                return Err(Error::numeric(format!("arc {id} has non-finite weight")));
            }
            if let Some(loss) = arc.local_loss {
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("arc {id} has non-finite loss")));
                }
            }
            out_arcs[arc.src].push(id);
            in_arcs[arc.dst].push(id);
        }
        // At least one complete start-to-end path must exist. Times increase
        // strictly along arcs, so the graph is a DAG and reachability is a
        // simple sweep.
        let mut reach = vec![false; nodes.len()];
        reach[start] = true;
        let mut order: Vec<NodeId> = (0..nodes.len()).collect();
        order.sort_by_key(|&n| nodes[n].time);
        for &n in &order {
            if !reach[n] {
                continue;
            }
            for &a in &out_arcs[n] {
                reach[arcs[a].dst] = true;
            }
        }
        if !reach[end] {
            return Err(Error::data("no complete start-to-end path in lattice"));
        }
        let mut topo_arcs: Vec<ArcId> = (0..arcs.len()).collect();
        topo_arcs.sort_by_key(|&a| (nodes[arcs[a].src].time, a));
        Ok(Lattice {
            nodes,
            arcs,
            start,
            end,
            num_frames,
            out_arcs,
            in_arcs,
            topo_arcs,
            loss_level: None,
        })
    }

    /// Marks the lattice as annotated at `level`; every arc must carry a loss.
    pub fn assume_loss_level(mut self, level: LossLevel) -> Result<Self> {
        if self.arcs.iter().any(|a| a.local_loss.is_none()) {
            return Err(Error::data(
                "cannot assume a loss level: some arcs are unannotated",
            ));
        }
        self.loss_level = Some(level);
        Ok(self)
    }

    pub fn nodes(&self) -> &[LatticeNode] {
        &self.nodes
    }

    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }

    pub fn arc(&self, id: ArcId) -> &LatticeArc {
        &self.arcs[id]
    }

    pub fn start(&self) -> NodeId {
        self.start
    }

    pub fn end(&self) -> NodeId {
        self.end
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn loss_level(&self) -> Option<LossLevel> {
        self.loss_level
    }

    pub fn out_arcs(&self, n: NodeId) -> &[ArcId] {
        &self.out_arcs[n]
    }

    pub fn in_arcs(&self, n: NodeId) -> &[ArcId] {
        &self.in_arcs[n]
    }

    /// Frame index at which arc `id` starts.
    pub fn arc_start_time(&self, id: ArcId) -> usize {
        self.nodes[self.arcs[id].src].time
    }

    /// `kappa`-scaled log score of one arc: `kappa * (log t_q + acoustic)`.
    fn arc_log_score(&self, id: ArcId, activations: &Mat, kappa: f64) -> f64 {
        let arc = &self.arcs[id];
        let t0 = self.nodes[arc.src].time;
        let mut acoustic = 0.0;
        for (k, &label) in arc.labels.iter().enumerate() {
            acoustic += activations[(t0 + k, label)];
        }
        kappa * (arc.log_weight + acoustic)
    }

    fn check_activations(&self, activations: &Mat, kappa: f64) -> Result<()> {
        if kappa <= 0.0 {
            return Err(Error::usage("acoustic scale kappa must be positive"));
        }
        if activations.rows() != self.num_frames {
            return Err(Error::shape(format!(
                "activations have {} frames, lattice spans {}",
                activations.rows(),
                self.num_frames
            )));
        }
        if !activations.is_finite() {
            return Err(Error::numeric("activations contain non-finite values"));
        }
        for (id, arc) in self.arcs.iter().enumerate() {
            if arc.labels.iter().any(|&l| l >= activations.cols()) {
                return Err(Error::data(format!(
                    "arc {id} labels exceed output dimension {}",
                    activations.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Per-arc forward/backward log scores, the log partition value and the
/// per-frame state occupancies of one lattice under given activations.
#[derive(Debug, Clone)]
pub struct PosteriorSet {
    /// Per-arc forward log score (includes the arc's own score).
    pub log_alpha: Vec<f64>,
    /// Per-arc backward log score (completions after the arc).
    pub log_beta: Vec<f64>,
    /// Log partition value over all complete paths.
    pub log_z: f64,
    /// Per-frame, per-output-state occupancy, `T x D_out`.
    pub gamma: Mat,
    /// Per-arc `kappa`-scaled log scores (cached for downstream passes).
    pub log_score: Vec<f64>,
}

impl PosteriorSet {
    /// Posterior probability of traversing arc `id`.
    pub fn arc_posterior(&self, id: ArcId) -> f64 {
        let l = self.log_alpha[id] + self.log_beta[id] - self.log_z;
        if l == LOG_ZERO {
            0.0
        } else {
            l.exp()
        }
    }
}

/// Forward-backward over the lattice with both transition weights and
/// acoustic scores raised to `kappa`.
pub fn forward_backward(lat: &Lattice, activations: &Mat, kappa: f64) -> Result<PosteriorSet> {
    lat.check_activations(activations, kappa)?;
    let n_arcs = lat.arcs().len();
    let log_score: Vec<f64> = (0..n_arcs)
        .map(|a| lat.arc_log_score(a, activations, kappa))
        .collect();

    let mut log_alpha = vec![LOG_ZERO; n_arcs];
    for &a in &lat.topo_arcs {
        let arc = lat.arc(a);
        let from_preds = if arc.src == lat.start() {
            0.0
        } else {
            let terms: Vec<f64> = lat.in_arcs(arc.src).iter().map(|&p| log_alpha[p]).collect();
            log_sum_exp(&terms)
        };
        log_alpha[a] = log_score[a] + from_preds;
    }

    let mut log_beta = vec![LOG_ZERO; n_arcs];
    for &a in lat.topo_arcs.iter().rev() {
        let arc = lat.arc(a);
        log_beta[a] = if arc.dst == lat.end() {
            0.0
        } else {
            let terms: Vec<f64> = lat
                .out_arcs(arc.dst)
                .iter()
                .map(|&s| log_score[s] + log_beta[s])
                .collect();
            log_sum_exp(&terms)
        };
    }

    let final_terms: Vec<f64> = lat
        .in_arcs(lat.end())
        .iter()
        .map(|&a| log_alpha[a])
        .collect();
    let log_z = log_sum_exp(&final_terms);
    if !log_z.is_finite() {
        return Err(Error::numeric("lattice partition value is not finite"));
    }
    let initial_terms: Vec<f64> = lat
        .out_arcs(lat.start())
        .iter()
        .map(|&a| log_score[a] + log_beta[a])
        .collect();
    let log_z_rev = log_sum_exp(&initial_terms);
    debug_assert!(
        (log_z - log_z_rev).abs() <= 1e-9 * (1.0 + log_z.abs()),
        "forward/backward partition mismatch: {log_z} vs {log_z_rev}"
    );

    let mut gamma = Mat::zeros(lat.num_frames(), activations.cols());
    for a in 0..n_arcs {
        let l = log_alpha[a] + log_beta[a] - log_z;
        if l == LOG_ZERO {
            continue;
        }
        let p = l.exp();
        let t0 = lat.arc_start_time(a);
        for (k, &label) in lat.arc(a).labels.iter().enumerate() {
            gamma[(t0 + k, label)] += p;
        }
    }

    Ok(PosteriorSet {
        log_alpha,
        log_beta,
        log_z,
        gamma,
        log_score,
    })
}

/// The reference (numerator) path of an utterance, pinned to arcs of its
/// denominator lattice so the numerator score uses the same transition
/// weights as the competing hypotheses.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    arc_ids: Vec<ArcId>,
    symbols: Vec<Symbol>,
    frame_states: Vec<StateLabel>,
    frame_symbols: Vec<Symbol>,
}

impl ReferencePath {
    pub fn from_arcs(lat: &Lattice, arc_ids: Vec<ArcId>) -> Result<Self> {
        if arc_ids.is_empty() {
            return Err(Error::data("reference path has no arcs"));
        }
        let mut at = lat.start();
        let mut symbols = Vec::with_capacity(arc_ids.len());
        let mut frame_states = Vec::with_capacity(lat.num_frames());
        let mut frame_symbols = Vec::with_capacity(lat.num_frames());
        for &a in &arc_ids {
            if a >= lat.arcs().len() {
                return Err(Error::data(format!("reference arc {a} out of range")));
            }
            let arc = lat.arc(a);
            if arc.src != at {
                return Err(Error::data(
                    "reference arcs do not form a connected path from the start node",
                ));
            }
            symbols.push(arc.symbol);
            for &l in &arc.labels {
                frame_states.push(l);
                frame_symbols.push(arc.symbol);
            }
            at = arc.dst;
        }
        if at != lat.end() {
            return Err(Error::data("reference path does not reach the end node"));
        }
        Ok(ReferencePath {
            arc_ids,
            symbols,
            frame_states,
            frame_symbols,
        })
    }

    pub fn arc_ids(&self) -> &[ArcId] {
        &self.arc_ids
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn frame_states(&self) -> &[StateLabel] {
        &self.frame_states
    }

    pub fn frame_symbols(&self) -> &[Symbol] {
        &self.frame_symbols
    }
}

/// One training utterance: features, reference path and competing lattice.
#[derive(Debug, Clone)]
pub struct UtteranceExample {
    pub frames: FrameBatch,
    pub numerator: ReferencePath,
    pub denominator: Lattice,
}

impl UtteranceExample {
    pub fn new(frames: FrameBatch, numerator: ReferencePath, denominator: Lattice) -> Result<Self> {
        if frames.num_frames() != denominator.num_frames() {
            return Err(Error::data(format!(
                "features span {} frames, lattice {}",
                frames.num_frames(),
                denominator.num_frames()
            )));
        }
        // The constructor of ReferencePath already pinned the path to this
        // lattice's arcs; re-verify the ids still make sense.
        if numerator
            .arc_ids()
            .iter()
            .any(|&a| a >= denominator.arcs().len())
        {
            return Err(Error::data(
                "numerator path references arcs outside the lattice",
            ));
        }
        Ok(UtteranceExample {
            frames,
            numerator,
            denominator,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.num_frames()
    }

    /// Re-annotates the denominator lattice's local losses at `level`.
    pub fn annotated(&self, level: LossLevel) -> Result<UtteranceExample> {
        let lat = annotate_local_loss(&self.denominator, &self.numerator, level)?;
        Ok(UtteranceExample {
            frames: self.frames.clone(),
            numerator: self.numerator.clone(),
            denominator: lat,
        })
    }
}

/// Annotates every arc of `lat` with its local loss against the reference,
/// at the requested granularity. Losses are computed once from the fixed
/// reference alignment; training never recomputes them.
pub fn annotate_local_loss(
    lat: &Lattice,
    reference: &ReferencePath,
    level: LossLevel,
) -> Result<Lattice> {
    if reference.frame_states().len() != lat.num_frames() {
        return Err(Error::data(format!(
            "reference spans {} frames, lattice {}",
            reference.frame_states().len(),
            lat.num_frames()
        )));
    }
    let mut arcs = lat.arcs().to_vec();
    for (id, arc) in arcs.iter_mut().enumerate() {
        let t0 = lat.arc_start_time(id);
        let loss = match level {
            LossLevel::State => {
                let mismatches = arc
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(k, &l)| l != reference.frame_states()[t0 + k])
                    .count();
                mismatches as f64
            }
            LossLevel::Phone => {
                let overlap = (0..arc.labels.len())
                    .filter(|&k| reference.frame_symbols()[t0 + k] == arc.symbol)
                    .count();
                if 2 * overlap > arc.labels.len() {
                    0.0
                } else {
                    1.0
                }
            }
        };
        arc.local_loss = Some(loss);
    }
    Lattice::new(lat.nodes().to_vec(), arcs, lat.start(), lat.end())?.assume_loss_level(level)
}

/// Minimal edit distance with unit insert/delete/substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best complete path under `kappa`-scaled scores.
#[derive(Debug, Clone)]
pub struct DecodedPath {
    pub arc_ids: Vec<ArcId>,
    pub symbols: Vec<Symbol>,
    pub log_score: f64,
}

/// Max-score start-to-end path (Viterbi over arcs). Ties break toward the
/// lowest arc id, so decoding is deterministic.
pub fn viterbi_decode(lat: &Lattice, activations: &Mat, kappa: f64) -> Result<DecodedPath> {
    lat.check_activations(activations, kappa)?;
    let n_arcs = lat.arcs().len();
    let mut best = vec![LOG_ZERO; n_arcs];
    let mut back: Vec<Option<ArcId>> = vec![None; n_arcs];
    for &a in &lat.topo_arcs {
        let arc = lat.arc(a);
        let score = lat.arc_log_score(a, activations, kappa);
        if arc.src == lat.start() {
            best[a] = score;
        } else {
            let mut best_pred = LOG_ZERO;
            let mut best_id = None;
            for &p in lat.in_arcs(arc.src) {
                if best[p] > best_pred {
                    best_pred = best[p];
                    best_id = Some(p);
                }
            }
            if best_id.is_some() {
                best[a] = score + best_pred;
                back[a] = best_id;
            }
        }
    }
    let mut final_best = LOG_ZERO;
    let mut final_arc = None;
    for &a in lat.in_arcs(lat.end()) {
        if best[a] > final_best {
            final_best = best[a];
            final_arc = Some(a);
        }
    }
    let mut arc_ids = Vec::new();
    let mut cur = final_arc.ok_or_else(|| Error::data("no complete path found in decode"))?;
    loop {
        arc_ids.push(cur);
        match back[cur] {
            Some(p) => cur = p,
            None => break,
        }
    }
    arc_ids.reverse();
    let symbols = arc_ids.iter().map(|&a| lat.arc(a).symbol).collect();
    Ok(DecodedPath {
        arc_ids,
        symbols,
        log_score: final_best,
    })
}


#[cfg(test)]
mod tests {
    use super::test_lattices::*;
    use super::*;

    #[test]
    fn construction_rejects_bad_lattices() {
        // Label count must equal span.
        let bad = Lattice::new(vec![node(0), node(2)], vec![arc(0, 1, 0, &[0], 0.0)], 0, 1);
        assert!(bad.is_err());
        // No path start->end.
        let bad = Lattice::new(
            vec![node(0), node(1), node(1)],
            vec![arc(0, 1, 0, &[0], 0.0)],
            0,
            2,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn single_path_posterior_is_one() {
        let lat = single_path();
        let act = uniform_activations(2, 2);
        let post = forward_backward(&lat, &act, 1.0).unwrap();
        for a in 0..2 {
            assert!((post.arc_posterior(a) - 1.0).abs() < 1e-12);
        }
        // Z equals the single path score: kappa * (0.1 - 0.2) with zero acoustics.
        assert!((post.log_z - (0.1 - 0.2)).abs() < 1e-12);
        // Occupancies are one-hot per frame.
        assert!((post.gamma[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((post.gamma[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_equal_arcs_split_posterior() {
        let lat = two_parallel_equal();
        let act = uniform_activations(1, 2);
        let post = forward_backward(&lat, &act, 1.0).unwrap();
        assert!((post.arc_posterior(0) - 0.5).abs() < 1e-12);
        assert!((post.arc_posterior(1) - 0.5).abs() < 1e-12);
        assert!((post.gamma[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gamma_rows_sum_to_one() {
        let lat = three_paths();
        let mut act = Mat::zeros(2, 3);
        act[(0, 0)] = 0.7;
        act[(0, 2)] = -0.4;
        act[(1, 0)] = 0.9;
        act[(1, 1)] = 0.2;
        let post = forward_backward(&lat, &act, 0.5).unwrap();
        for t in 0..2 {
            let sum: f64 = post.gamma.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "frame {t} sums to {sum}");
        }
    }

    #[test]
    fn kappa_must_be_positive() {
        let lat = single_path();
        let act = uniform_activations(2, 2);
        assert!(forward_backward(&lat, &act, 0.0).is_err());
    }

    #[test]
    fn nan_activations_rejected() {
        let lat = single_path();
        let mut act = uniform_activations(2, 2);
        act[(0, 0)] = f64::NAN;
        assert!(matches!(
            forward_backward(&lat, &act, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn annotate_state_level_counts_mismatches() {
        let lat = three_paths();
        let reference = ReferencePath::from_arcs(&lat, vec![0, 2]).unwrap();
        let annotated = annotate_local_loss(&lat, &reference, LossLevel::State).unwrap();
        // Reference arcs have zero loss.
        assert_eq!(annotated.arc(0).local_loss, Some(0.0));
        assert_eq!(annotated.arc(2).local_loss, Some(0.0));
        // a1 mismatches frame 0 (state 1 vs 0).
        assert_eq!(annotated.arc(1).local_loss, Some(1.0));
        // a3 spans both frames: labels [2,1] vs reference [0,0] -> 2 mismatches.
        assert_eq!(annotated.arc(3).local_loss, Some(2.0));
        assert_eq!(annotated.loss_level(), Some(LossLevel::State));
    }

    #[test]
    fn annotate_phone_level_uses_majority_overlap() {
        // Arc spanning 3 frames where the reference symbol matches 2 of them.
        let lat = Lattice::new(
            vec![node(0), node(2), node(3)],
            vec![
                arc(0, 1, 5, &[0, 0], 0.0),
                arc(1, 2, 6, &[1], 0.0),
                arc(0, 2, 5, &[0, 0, 0], 0.0),
            ],
            0,
            2,
        )
        .unwrap();
        let reference = ReferencePath::from_arcs(&lat, vec![0, 1]).unwrap();
        let annotated = annotate_local_loss(&lat, &reference, LossLevel::Phone).unwrap();
        assert_eq!(annotated.arc(0).local_loss, Some(0.0));
        assert_eq!(annotated.arc(1).local_loss, Some(0.0));
        // Long arc: symbol 5 overlaps the reference symbols (5,5,6) on 2 of 3
        // frames -> majority match -> loss 0.
        assert_eq!(annotated.arc(2).local_loss, Some(0.0));
    }

    #[test]
    fn path_loss_equals_frame_mismatch_recount() {
        // For every path of a small lattice, the sum of state-level arc
        // losses equals a direct frame-by-frame recount.
        let lat = three_paths();
        let reference = ReferencePath::from_arcs(&lat, vec![0, 2]).unwrap();
        let annotated = annotate_local_loss(&lat, &reference, LossLevel::State).unwrap();
        let paths: Vec<Vec<ArcId>> = vec![vec![0, 2], vec![1, 2], vec![3]];
        for arcs in paths {
            let loss_sum: f64 = arcs
                .iter()
                .map(|&a| annotated.arc(a).local_loss.unwrap())
                .sum();
            let mut frame_labels = Vec::new();
            for &a in &arcs {
                frame_labels.extend_from_slice(&annotated.arc(a).labels);
            }
            let recount = frame_labels
                .iter()
                .zip(reference.frame_states())
                .filter(|(a, b)| a != b)
                .count() as f64;
            assert_eq!(loss_sum, recount);
        }
    }

    #[test]
    fn reference_must_connect_start_to_end() {
        let lat = three_paths();
        assert!(ReferencePath::from_arcs(&lat, vec![0]).is_err());
        assert!(ReferencePath::from_arcs(&lat, vec![2]).is_err());
        assert!(ReferencePath::from_arcs(&lat, vec![0, 2]).is_ok());
        assert!(ReferencePath::from_arcs(&lat, vec![3]).is_ok());
    }

    #[test]
    fn levenshtein_basics() {
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&kitten, &kitten), 0);
        assert_eq!(levenshtein::<char>(&[], &sitting), 7);
        assert_eq!(levenshtein(&kitten, &sitting), 3);
        // Symmetry.
        assert_eq!(levenshtein(&sitting, &kitten), 3);
    }

    #[test]
    fn viterbi_picks_single_and_dominant_paths() {
        let lat = single_path();
        let act = uniform_activations(2, 2);
        let decoded = viterbi_decode(&lat, &act, 1.0).unwrap();
        assert_eq!(decoded.arc_ids, vec![0, 1]);
        assert_eq!(decoded.symbols, vec![0, 1]);

        let lat = two_parallel_equal();
        let mut act = uniform_activations(1, 2);
        act[(0, 1)] = 1.0;
        let decoded = viterbi_decode(&lat, &act, 1.0).unwrap();
        assert_eq!(decoded.arc_ids, vec![1]);
    }
}
