//! Method-matrix comparison runs and their trend statistics.
//!
//! `compare` trains every method of a matrix from the same CE starting
//! point per seed (task and initialization both keyed off the seed) and
//! aggregates the Table-style summary rows plus the trend quantities the
//! acceptance gate checks: whether each sequence-trained method beats the
//! CE baseline's validation token error rate, how NG's final validation
//! criterion accuracy compares with HF's, and how many updates NG needs to
//! reach HF's final training criterion value.
//!
//! The default matrix runs the batch methods at two updates per epoch
//! (half the training set each) with matched update budgets across the HF
//! family and NG, plus an utterance-level SGD baseline whose learning rate
//! was tuned on this task. Large batches keep the gradient estimates quiet
//! enough for the few-updates-per-epoch regime these methods live in.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::{DsagConfig, OptimizerConfig, SecondOrderConfig, SgdConfig};

use super::{
    criterion_metrics, prepare, sequence_train, subseed, token_error_rate, EpochRow, RunConfig,
    Summary,
};

/// One column of the comparison matrix.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
}

/// The default desk-scale matrix: SGD, HF, DSAG-HF and NG, with matched
/// update budgets for the batch methods.
pub fn default_method_matrix(train_size: usize) -> Vec<MethodSpec> {
    let half_batch = (train_size / 2).max(1);
    let second_order_epochs = 24;
    let hf = SecondOrderConfig {
        batch_size: half_batch,
        curvature_floor: 16,
        ..SecondOrderConfig::hf_default()
    };
    let ng = SecondOrderConfig {
        batch_size: half_batch,
        ..SecondOrderConfig::ng_default()
    };
    vec![
        MethodSpec {
            optimizer: OptimizerConfig::Sgd(SgdConfig {
                learning_rate: 3e-2,
                clip_threshold: 1.0,
                batch_size: 1,
            }),
            epochs: 8,
        },
        MethodSpec {
            optimizer: OptimizerConfig::Hf(hf.clone()),
            epochs: second_order_epochs,
        },
        MethodSpec {
            optimizer: OptimizerConfig::DsagHf(DsagConfig { base: hf, mu: 0.5 }),
            epochs: second_order_epochs,
        },
        MethodSpec {
            optimizer: OptimizerConfig::Ng(ng),
            epochs: second_order_epochs,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub seed: u64,
    pub summary: Summary,
    pub epoch_rows: Vec<EpochRow>,
    /// Updates whose batch criterion increased (must stay 0 for the
    /// second-order methods with backtracking enabled).
    pub stability_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    /// CE baseline summary per seed (epochs = 0).
    pub ce_rows: Vec<Summary>,
    pub outcomes: Vec<MethodOutcome>,
    /// Median-aggregated Table-style rows: CE first, then one per method.
    pub table: Vec<Summary>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

impl CompareReport {
    pub fn methods(&self) -> Vec<String> {
        let mut names = Vec::new();
        for outcome in &self.outcomes {
            if !names.contains(&outcome.method) {
                names.push(outcome.method.clone());
            }
        }
        names
    }

    fn per_seed(&self, method: &str, f: impl Fn(&MethodOutcome) -> f64) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter(|o| o.method == method)
            .map(f)
            .collect()
    }

    pub fn median_final_ter(&self, method: &str) -> f64 {
        median(&self.per_seed(method, |o| o.summary.val_token_error_rate))
    }

    pub fn median_val_accuracy(&self, method: &str) -> f64 {
        median(&self.per_seed(method, |o| o.summary.val_accuracy))
    }

    pub fn median_train_criterion(&self, method: &str) -> f64 {
        median(&self.per_seed(method, |o| o.summary.train_criterion))
    }

    pub fn ce_median_ter(&self) -> f64 {
        median(
            &self
                .ce_rows
                .iter()
                .map(|s| s.val_token_error_rate)
                .collect::<Vec<_>>(),
        )
    }

    /// Per-seed fraction of `reference`'s update budget that `method`
    /// needed to first reach `reference`'s final training criterion value
    /// (measured at epoch granularity; infinity when never reached).
    pub fn updates_to_reach_final_of(&self, method: &str, reference: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|&seed| {
                let target = self
                    .outcomes
                    .iter()
                    .find(|o| o.method == reference && o.seed == seed);
                let chaser = self
                    .outcomes
                    .iter()
                    .find(|o| o.method == method && o.seed == seed);
                match (target, chaser) {
                    (Some(t), Some(c)) => {
                        let target_value = t.summary.train_criterion;
                        let budget = t.summary.updates.max(1) as f64;
                        c.epoch_rows
                            .iter()
                            .find(|row| row.train_criterion <= target_value)
                            .map(|row| row.updates_done as f64 / budget)
                            .unwrap_or(f64::INFINITY)
                    }
                    _ => f64::INFINITY,
                }
            })
            .collect()
    }

    pub fn total_stability_violations(&self) -> usize {
        self.outcomes.iter().map(|o| o.stability_violations).sum()
    }

    /// Plain-text summary table in the method/epochs/updates/accuracy/TER
    /// schema (median over seeds).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<8} {:>6} {:>8} {:>11} {:>11} {:>8}",
            "method", "epochs", "updates", "train acc.", "val acc.", "val TER"
        )
        .unwrap();
        for row in &self.table {
            writeln!(
                out,
                "{:<8} {:>6} {:>8} {:>11.4} {:>11.4} {:>8.4}",
                row.method,
                row.epochs,
                row.updates,
                row.train_accuracy,
                row.val_accuracy,
                row.val_token_error_rate
            )
            .unwrap();
        }
        out
    }

    /// Stable textual digest (no wall-clock fields) for determinism checks.
    pub fn deterministic_digest(&self) -> String {
        let mut out = self.render_table();
        for outcome in &self.outcomes {
            writeln!(
                out,
                "{} seed {}: train {:.12} val {:.12} ter {:.12} updates {}",
                outcome.method,
                outcome.seed,
                outcome.summary.train_criterion,
                outcome.summary.val_accuracy,
                outcome.summary.val_token_error_rate,
                outcome.summary.updates
            )
            .unwrap();
        }
        out
    }
}

fn median_summary(method: &str, rows: &[&Summary]) -> Summary {
    let get = |f: fn(&Summary) -> f64| median(&rows.iter().map(|s| f(s)).collect::<Vec<_>>());
    Summary {
        method: method.to_string(),
        criterion: rows[0].criterion.clone(),
        epochs: rows[0].epochs,
        updates: rows[0].updates,
        train_criterion: get(|s| s.train_criterion),
        train_accuracy: get(|s| s.train_accuracy),
        val_criterion: get(|s| s.val_criterion),
        val_accuracy: get(|s| s.val_accuracy),
        val_token_error_rate: get(|s| s.val_token_error_rate),
        ce_val_frame_accuracy: get(|s| s.ce_val_frame_accuracy),
    }
}

/// Runs the full method matrix over the seeds. Each seed regenerates the
/// task and the CE starting point; every method of that seed starts from
/// the same CE parameters.
pub fn compare(base: &RunConfig, methods: &[MethodSpec], seeds: &[u64]) -> Result<CompareReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::usage(
            "compare needs at least one method and one seed",
        ));
    }
    let mut ce_rows = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let mut run = base.clone();
        run.seed = seed;
        run.task.seed = subseed(seed, "task");
        let prepared = prepare(&run)?;

        let (ce_train_criterion, ce_train_accuracy) = criterion_metrics(
            &prepared.net,
            &prepared.theta_ce,
            &prepared.dataset.train,
            run.criterion,
            run.kappa,
        )?;
        let (ce_val_criterion, ce_val_accuracy) = criterion_metrics(
            &prepared.net,
            &prepared.theta_ce,
            &prepared.dataset.validation,
            run.criterion,
            run.kappa,
        )?;
        let ce_ter = token_error_rate(
            &prepared.net,
            &prepared.theta_ce,
            &prepared.dataset.validation,
            run.kappa,
        )?;
        ce_rows.push(Summary {
            method: "ce".to_string(),
            criterion: run.criterion.name().to_string(),
            epochs: 0,
            updates: 0,
            train_criterion: ce_train_criterion,
            train_accuracy: ce_train_accuracy,
            val_criterion: ce_val_criterion,
            val_accuracy: ce_val_accuracy,
            val_token_error_rate: ce_ter,
            ce_val_frame_accuracy: prepared.ce_report.val_frame_accuracy,
        });

        for spec in methods {
            let mut method_run = run.clone();
            method_run.optimizer = spec.optimizer.clone();
            method_run.epochs = spec.epochs;
            let out = sequence_train(&prepared, &method_run)?;
            let stability_violations = out
                .metrics
                .update_rows
                .iter()
                .filter(|u| {
                    u.criterion_after
                        > u.criterion_before + 1e-12 * (1.0 + u.criterion_before.abs())
                })
                .count();
            outcomes.push(MethodOutcome {
                method: spec.optimizer.method_name().to_string(),
                seed,
                summary: out.metrics.summary.clone(),
                epoch_rows: out.metrics.epoch_rows.clone(),
                stability_violations,
            });
        }
    }

    let mut table = Vec::new();
    table.push(median_summary(
        "ce",
        &ce_rows.iter().collect::<Vec<&Summary>>(),
    ));
    let mut names = Vec::new();
    for outcome in &outcomes {
        if !names.contains(&outcome.method) {
            names.push(outcome.method.clone());
        }
    }
    for name in &names {
        let rows: Vec<&Summary> = outcomes
            .iter()
            .filter(|o| &o.method == name)
            .map(|o| &o.summary)
            .collect();
        table.push(median_summary(name, &rows));
    }

    Ok(CompareReport {
        seeds: seeds.to_vec(),
        ce_rows,
        outcomes,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SyntheticTaskConfig;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn compare_emits_one_table_row_per_method_plus_ce() {
        let mut base = RunConfig::default_desk();
        base.task = SyntheticTaskConfig {
            train_utterances: 12,
            val_utterances: 4,
            min_frames: 8,
            max_frames: 12,
            ..SyntheticTaskConfig::default_desk()
        };
        base.ce_epochs = 2;
        let methods = vec![
            MethodSpec {
                optimizer: OptimizerConfig::Hf(SecondOrderConfig {
                    batch_size: 6,
                    curvature_floor: 4,
                    ..SecondOrderConfig::hf_default()
                }),
                epochs: 2,
            },
            MethodSpec {
                optimizer: OptimizerConfig::Ng(SecondOrderConfig {
                    batch_size: 6,
                    curvature_floor: 4,
                    cg_max_iters: 3,
                    ..SecondOrderConfig::ng_default()
                }),
                epochs: 2,
            },
        ];
        let report = compare(&base, &methods, &[1, 2]).unwrap();
        assert_eq!(report.table.len(), 3);
        assert_eq!(report.table[0].method, "ce");
        assert_eq!(report.outcomes.len(), 4);
        let digest_a = report.deterministic_digest();
        let report_b = compare(&base, &methods, &[1, 2]).unwrap();
        assert_eq!(digest_a, report_b.deterministic_digest());
    }
}
