//! Line-oriented text formats for lattices and feature matrices.
//!
//! Lattice grammar (whitespace-separated tokens, one record per line):
//!
//! ```text
//! lattice v1
//! header <num_nodes> <num_arcs> <num_frames>
//! losses <phone|state>                          # optional; iff arcs carry a loss
//! node <id> <frame-time>                        # num_nodes lines, ids 0..n-1
//! arc <src> <dst> <symbol> <log_weight> <label_1> ... <label_k> [<loss>]
//! numerator <arc_id> <arc_id> ...               # optional reference path
//! ```
//!
//! An arc's label count `k` is implied by the node times
//! (`time[dst] - time[src]`), which makes the optional trailing loss value
//! unambiguous. The start node is the unique node at time 0 and the end
//! node the unique node at time `num_frames`. Floats are written with
//! Rust's shortest round-trip formatting, so save/load is value-exact.
//!
//! Feature grammar:
//!
//! ```text
//! features v1
//! utterance <id>
//! size <T> <D>
//! <D floats>                                    # T lines
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::tensor_net::FrameBatch;

use super::{ArcId, Lattice, LatticeArc, LatticeNode, LossLevel, ReferencePath};

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        context: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn save_lattice(path: &Path, lat: &Lattice, numerator: Option<&ReferencePath>) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "lattice v1").unwrap();
    writeln!(
        text,
        "header {} {} {}",
        lat.nodes().len(),
        lat.arcs().len(),
        lat.num_frames()
    )
    .unwrap();
    if let Some(level) = lat.loss_level() {
        writeln!(text, "losses {level}").unwrap();
    }
    for (id, node) in lat.nodes().iter().enumerate() {
        writeln!(text, "node {id} {}", node.time).unwrap();
    }
    for arc in lat.arcs() {
        write!(
            text,
            "arc {} {} {} {}",
            arc.src, arc.dst, arc.symbol, arc.log_weight
        )
        .unwrap();
        for &label in &arc.labels {
            write!(text, " {label}").unwrap();
        }
        if lat.loss_level().is_some() {
            write!(text, " {}", arc.local_loss.unwrap_or(0.0)).unwrap();
        }
        writeln!(text).unwrap();
    }
    if let Some(reference) = numerator {
        let ids: Vec<String> = reference.arc_ids().iter().map(|a| a.to_string()).collect();
        writeln!(text, "numerator {}", ids.join(" ")).unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a lattice and, when present, the numerator arc-id list.
pub fn load_lattice(path: &Path) -> Result<(Lattice, Option<Vec<ArcId>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();

    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "empty lattice file"))?;
    if header.trim() != "lattice v1" {
        return Err(parse_error(path, ln + 1, "expected `lattice v1` header"));
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| parse_error(path, 2, "missing header line"))?;
    let tok: Vec<&str> = counts.split_whitespace().collect();
    if tok.len() != 4 || tok[0] != "header" {
        return Err(parse_error(
            path,
            ln + 1,
            "expected `header <nodes> <arcs> <frames>`",
        ));
    }
    let num_nodes: usize = tok[1]
        .parse()
        .map_err(|_| parse_error(path, ln + 1, "bad node count"))?;
    let num_arcs: usize = tok[2]
        .parse()
        .map_err(|_| parse_error(path, ln + 1, "bad arc count"))?;
    let num_frames: usize = tok[3]
        .parse()
        .map_err(|_| parse_error(path, ln + 1, "bad frame count"))?;

    let mut loss_level = None;
    if let Some(&(_, line)) = lines.peek() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.first() == Some(&"losses") {
            let (ln, _) = lines.next().unwrap();
            loss_level = Some(match tok.get(1) {
                Some(&"phone") => LossLevel::Phone,
                Some(&"state") => LossLevel::State,
                _ => {
                    return Err(parse_error(
                        path,
                        ln + 1,
                        "losses level must be phone or state",
                    ))
                }
            });
        }
    }

    let mut node_times: Vec<Option<usize>> = vec![None; num_nodes];
    for _ in 0..num_nodes {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_error(path, 0, "unexpected end of file in node section"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 || tok[0] != "node" {
            return Err(parse_error(path, ln + 1, "expected `node <id> <time>`"));
        }
        let id: usize = tok[1]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad node id"))?;
        let time: usize = tok[2]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad node time"))?;
        if id >= num_nodes {
            return Err(parse_error(path, ln + 1, "node id exceeds declared count"));
        }
        if node_times[id].is_some() {
            return Err(parse_error(path, ln + 1, "duplicate node id"));
        }
        node_times[id] = Some(time);
    }
    let nodes: Vec<LatticeNode> = node_times
        .into_iter()
        .enumerate()
        .map(|(id, t)| {
            t.map(|time| LatticeNode { time })
                .ok_or_else(|| Error::data(format!("node {id} missing from lattice file")))
        })
        .collect::<Result<_>>()?;

    let start_candidates: Vec<usize> = (0..num_nodes).filter(|&n| nodes[n].time == 0).collect();
    let end_candidates: Vec<usize> = (0..num_nodes)
        .filter(|&n| nodes[n].time == num_frames)
        .collect();
    if start_candidates.len() != 1 || end_candidates.len() != 1 {
        return Err(Error::data(format!(
            "{}: expected exactly one node at time 0 and one at time {num_frames}",
            path.display()
        )));
    }
    let (start, end) = (start_candidates[0], end_candidates[0]);

    let mut arcs = Vec::with_capacity(num_arcs);
    for _ in 0..num_arcs {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_error(path, 0, "unexpected end of file in arc section"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 || tok[0] != "arc" {
            return Err(parse_error(
                path,
                ln + 1,
                "expected `arc <src> <dst> <symbol> <logw> <labels...>`",
            ));
        }
        let src: usize = tok[1]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad src node"))?;
        let dst: usize = tok[2]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad dst node"))?;
        let symbol: usize = tok[3]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad symbol"))?;
        let log_weight: f64 = tok[4]
            .parse()
            .map_err(|_| parse_error(path, ln + 1, "bad log weight"))?;
        if src >= num_nodes || dst >= num_nodes {
            return Err(parse_error(path, ln + 1, "arc references missing node"));
        }
        let span = nodes[dst]
            .time
            .checked_sub(nodes[src].time)
            .filter(|&s| s > 0)
            .ok_or_else(|| parse_error(path, ln + 1, "arc does not advance time"))?;
        let expected = 5 + span + usize::from(loss_level.is_some());
        if tok.len() != expected {
            return Err(parse_error(
                path,
                ln + 1,
                format!(
                    "expected {} tokens for a span-{} arc, found {}",
                    expected,
                    span,
                    tok.len()
                ),
            ));
        }
        let labels: Vec<usize> = tok[5..5 + span]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(path, ln + 1, "bad state label"))?;
        let local_loss = if loss_level.is_some() {
            Some(
                tok[5 + span]
                    .parse::<f64>()
                    .map_err(|_| parse_error(path, ln + 1, "bad local loss"))?,
            )
        } else {
            None
        };
        arcs.push(LatticeArc {
            src,
            dst,
            symbol,
            labels,
            log_weight,
            local_loss,
        });
    }

    let mut numerator = None;
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok[0] != "numerator" {
            return Err(parse_error(path, ln + 1, "unexpected trailing content"));
        }
        let ids: Vec<ArcId> = tok[1..]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(path, ln + 1, "bad numerator arc id"))?;
        numerator = Some(ids);
    }

    let mut lat = Lattice::new(nodes, arcs, start, end)?;
    if let Some(level) = loss_level {
        lat = lat.assume_loss_level(level)?;
    }
    Ok((lat, numerator))
}

pub fn save_features(path: &Path, batch: &FrameBatch) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "features v1").unwrap();
    writeln!(text, "utterance {}", batch.utterance_id()).unwrap();
    writeln!(text, "size {} {}", batch.num_frames(), batch.dim()).unwrap();
    for t in 0..batch.num_frames() {
        let row: Vec<String> = batch
            .frames()
            .row(t)
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(text, "{}", row.join(" ")).unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FrameBatch> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "empty feature file"))?;
    if header.trim() != "features v1" {
        return Err(parse_error(path, ln + 1, "expected `features v1` header"));
    }
    let (ln, utt) = lines
        .next()
        .ok_or_else(|| parse_error(path, 2, "missing utterance line"))?;
    let utt_id = utt
        .strip_prefix("utterance ")
        .ok_or_else(|| parse_error(path, ln + 1, "expected `utterance <id>`"))?
        .trim()
        .to_string();
    let (ln, size) = lines
        .next()
        .ok_or_else(|| parse_error(path, 3, "missing size line"))?;
    let tok: Vec<&str> = size.split_whitespace().collect();
    if tok.len() != 3 || tok[0] != "size" {
        return Err(parse_error(path, ln + 1, "expected `size <T> <D>`"));
    }
    let rows: usize = tok[1]
        .parse()
        .map_err(|_| parse_error(path, ln + 1, "bad frame count"))?;
    let cols: usize = tok[2]
        .parse()
        .map_err(|_| parse_error(path, ln + 1, "bad feature dim"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_error(path, ln + 1, "bad feature value"))?;
            data.push(v);
        }
    }
    if data.len() != rows * cols {
        return Err(Error::data(format!(
            "{}: feature matrix has {} values, expected {}",
            path.display(),
            data.len(),
            rows * cols
        )));
    }
    FrameBatch::new(Mat::from_vec(rows, cols, data)?, utt_id)
}
