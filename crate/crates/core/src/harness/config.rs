//! Run configuration and its key-value config-file format.
//!
//! The format is flat INI-style sections with `key = value` lines and `#`
//! comments:
//!
//! ```text
//! [task]
//! num_states = 12
//! num_symbols = 6
//! feature_dim = 8
//! min_frames = 20
//! max_frames = 40
//! train_utterances = 256
//! val_utterances = 64
//! confusion = 0.2
//! feature_noise = 1.0
//! seed = 7
//! max_paths = 96
//!
//! [net]
//! hidden_dims = 32 32
//!
//! [train]
//! criterion = mpe            # mmi | mpe | smbr
//! kappa = 0.5
//! epochs = 12
//! ce_epochs = 12
//! ce_learning_rate = 0.5
//! ce_batch_size = 8
//! seed = 1
//!
//! [optimizer]
//! method = ng                # sgd | hf | dsag_hf | ng
//! batch_size = 0             # utterances; 0 = quarter of the training set
//! learning_rate = 1e-4       # sgd only
//! clip_threshold = 1.0       # sgd only
//! lambda_init = 1.0          # second-order methods
//! lambda_min = 1e-8
//! lambda_max = 1e8
//! cg_max_iters = 8
//! cg_residual_tol = 1e-3
//! curvature_fraction = 0.01
//! curvature_floor = 16
//! max_backtracks = 3
//! mu = 0.5                   # dsag_hf only
//! ```
//!
//! Every section and key is optional; omitted keys fall back to the
//! desk-scale defaults. Unknown sections or keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{CriterionKind, DsagConfig, OptimizerConfig, SecondOrderConfig, SgdConfig};

use super::SyntheticTaskConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: SyntheticTaskConfig,
    pub hidden_dims: Vec<usize>,
    pub criterion: CriterionKind,
    pub kappa: f64,
    pub epochs: usize,
    pub ce_epochs: usize,
    pub ce_learning_rate: f64,
    pub ce_batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl RunConfig {
    /// Desk-scale defaults: the 8-32-32-12 network on the default task with
    /// MPE as the training criterion and an acoustic scale of 0.5.
    pub fn default_desk() -> Self {
        RunConfig {
            task: SyntheticTaskConfig::default_desk(),
            hidden_dims: vec![32, 32],
            criterion: CriterionKind::Mpe,
            kappa: 0.5,
            epochs: 12,
            ce_epochs: 10,
            ce_learning_rate: 0.5,
            ce_batch_size: 8,
            seed: 1,
            optimizer: OptimizerConfig::Hf(SecondOrderConfig::hf_default()),
        }
    }

    pub fn network_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.task.feature_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.task.num_states);
        dims
    }

    /// Gradient-batch size for one update: configured value, or a quarter
    /// of the training set when left at 0.
    pub fn resolved_batch_size(&self, train_size: usize) -> usize {
        let configured = match &self.optimizer {
            OptimizerConfig::Sgd(cfg) => cfg.batch_size,
            OptimizerConfig::Hf(cfg) | OptimizerConfig::Ng(cfg) => cfg.batch_size,
            OptimizerConfig::DsagHf(cfg) => cfg.base.batch_size,
        };
        if configured == 0 {
            (train_size / 4).max(1)
        } else {
            configured.min(train_size).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.kappa <= 0.0 || self.kappa > 1.0 {
            return Err(Error::config("kappa must lie in (0, 1]"));
        }
        self.optimizer.validate()?;
        if self.ce_epochs > 0 && (self.ce_learning_rate <= 0.0 || self.ce_batch_size == 0) {
            return Err(Error::config(
                "CE pre-training needs a positive rate and batch size",
            ));
        }
        Ok(())
    }
}

/// Parsed INI document with consumption tracking for unknown-key errors.
struct IniDoc {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
    consumed: std::cell::RefCell<BTreeMap<String, Vec<String>>>,
    context: String,
}

impl IniDoc {
    fn parse(text: &str, context: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: context.to_string(),
                line: idx + 1,
                message: "expected `key = value`".to_string(),
            })?;
            if current.is_empty() {
                return Err(Error::Parse {
                    context: context.to_string(),
                    line: idx + 1,
                    message: "key outside of any [section]".to_string(),
                });
            }
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), (value.trim().to_string(), idx + 1));
        }
        Ok(IniDoc {
            sections,
            consumed: std::cell::RefCell::new(BTreeMap::new()),
            context: context.to_string(),
        })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        let value = self
            .sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(v, _)| v.as_str());
        if value.is_some() {
            self.consumed
                .borrow_mut()
                .entry(section.to_string())
                .or_default()
                .push(key.to_string());
        }
        value
    }

    fn parse_key<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        into: &mut T,
    ) -> Result<()> {
        if let Some(raw) = self.get(section, key) {
            *into = raw.parse::<T>().map_err(|_| {
                let line = self.sections[section][key].1;
                Error::Parse {
                    context: self.context.clone(),
                    line,
                    message: format!("bad value for {section}.{key}: `{raw}`"),
                }
            })?;
        }
        Ok(())
    }

    fn check_fully_consumed(&self, known_sections: &[&str]) -> Result<()> {
        for (section, keys) in &self.sections {
            if !known_sections.contains(&section.as_str()) {
                return Err(Error::config(format!("unknown config section [{section}]")));
            }
            let consumed = self.consumed.borrow();
            let used = consumed.get(section.as_str());
            for key in keys.keys() {
                if !used.is_some_and(|u| u.contains(key)) {
                    return Err(Error::config(format!(
                        "unknown or inapplicable key `{key}` in [{section}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses a run configuration from config-file text; missing keys take the
/// desk-scale defaults.
pub fn parse_run_config(text: &str, context: &str) -> Result<RunConfig> {
    let doc = IniDoc::parse(text, context)?;
    let mut run = RunConfig::default_desk();

    doc.parse_key("task", "num_states", &mut run.task.num_states)?;
    doc.parse_key("task", "num_symbols", &mut run.task.num_symbols)?;
    doc.parse_key("task", "feature_dim", &mut run.task.feature_dim)?;
    doc.parse_key("task", "min_frames", &mut run.task.min_frames)?;
    doc.parse_key("task", "max_frames", &mut run.task.max_frames)?;
    doc.parse_key("task", "train_utterances", &mut run.task.train_utterances)?;
    doc.parse_key("task", "val_utterances", &mut run.task.val_utterances)?;
    doc.parse_key("task", "confusion", &mut run.task.confusion)?;
    doc.parse_key("task", "feature_noise", &mut run.task.feature_noise)?;
    doc.parse_key("task", "seed", &mut run.task.seed)?;
    doc.parse_key("task", "max_paths", &mut run.task.max_paths)?;

    if let Some(dims) = doc.get("net", "hidden_dims") {
        run.hidden_dims = dims
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::config(format!("bad hidden dim `{d}`")))
            })
            .collect::<Result<_>>()?;
    }

    doc.parse_key("train", "criterion", &mut run.criterion)?;
    doc.parse_key("train", "kappa", &mut run.kappa)?;
    doc.parse_key("train", "epochs", &mut run.epochs)?;
    doc.parse_key("train", "ce_epochs", &mut run.ce_epochs)?;
    doc.parse_key("train", "ce_learning_rate", &mut run.ce_learning_rate)?;
    doc.parse_key("train", "ce_batch_size", &mut run.ce_batch_size)?;
    doc.parse_key("train", "seed", &mut run.seed)?;

    let mut method = "hf".to_string();
    doc.parse_key("optimizer", "method", &mut method)?;
    run.optimizer = match method.as_str() {
        "sgd" => {
            let mut cfg = SgdConfig::default_config();
            doc.parse_key("optimizer", "learning_rate", &mut cfg.learning_rate)?;
            doc.parse_key("optimizer", "clip_threshold", &mut cfg.clip_threshold)?;
            doc.parse_key("optimizer", "batch_size", &mut cfg.batch_size)?;
            OptimizerConfig::Sgd(cfg)
        }
        "hf" | "ng" | "dsag_hf" => {
            let mut cfg = if method == "ng" {
                SecondOrderConfig::ng_default()
            } else {
                SecondOrderConfig::hf_default()
            };
            doc.parse_key("optimizer", "batch_size", &mut cfg.batch_size)?;
            doc.parse_key("optimizer", "lambda_init", &mut cfg.lambda_init)?;
            doc.parse_key("optimizer", "lambda_min", &mut cfg.lambda_min)?;
            doc.parse_key("optimizer", "lambda_max", &mut cfg.lambda_max)?;
            doc.parse_key("optimizer", "cg_max_iters", &mut cfg.cg_max_iters)?;
            doc.parse_key("optimizer", "cg_residual_tol", &mut cfg.cg_residual_tol)?;
            doc.parse_key(
                "optimizer",
                "curvature_fraction",
                &mut cfg.curvature_fraction,
            )?;
            doc.parse_key("optimizer", "curvature_floor", &mut cfg.curvature_floor)?;
            doc.parse_key("optimizer", "max_backtracks", &mut cfg.max_backtracks)?;
            match method.as_str() {
                "hf" => OptimizerConfig::Hf(cfg),
                "ng" => OptimizerConfig::Ng(cfg),
                _ => {
                    let mut mu = 0.5;
                    doc.parse_key("optimizer", "mu", &mut mu)?;
                    OptimizerConfig::DsagHf(DsagConfig { base: cfg, mu })
                }
            }
        }
        other => return Err(Error::config(format!("unknown optimizer method `{other}`"))),
    };

    doc.check_fully_consumed(&["task", "net", "train", "optimizer"])?;
    run.validate()?;
    Ok(run)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let run = parse_run_config("", "test").unwrap();
        assert_eq!(run.task.num_states, 12);
        assert_eq!(run.network_dims(), vec![8, 32, 32, 12]);
        assert_eq!(run.optimizer.method_name(), "hf");
    }

    #[test]
    fn full_config_round_trips_values() {
        let text = r#"
[task]
num_states = 6
num_symbols = 3
feature_dim = 4
train_utterances = 32
val_utterances = 8
seed = 42

[net]
hidden_dims = 16

[train]
criterion = smbr
kappa = 0.8
epochs = 3
seed = 9

[optimizer]
method = ng
cg_max_iters = 6
lambda_init = 2.0
curvature_floor = 8
"#;
        let run = parse_run_config(text, "test").unwrap();
        assert_eq!(run.task.num_states, 6);
        assert_eq!(run.network_dims(), vec![4, 16, 6]);
        assert_eq!(run.criterion, CriterionKind::Smbr);
        assert_eq!(run.kappa, 0.8);
        assert_eq!(run.seed, 9);
        match &run.optimizer {
            OptimizerConfig::Ng(cfg) => {
                assert_eq!(cfg.cg_max_iters, 6);
                assert_eq!(cfg.lambda_init, 2.0);
                assert_eq!(cfg.curvature_floor, 8);
            }
            other => panic!("expected ng, got {}", other.method_name()),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_run_config("[task]\nnum_stats = 3\n", "test");
        assert!(err.is_err());
        let err = parse_run_config("[optimizer]\nmethod = sgd\nlambda_init = 1.0\n", "test");
        assert!(err.is_err(), "sgd must not accept second-order keys");
    }

    #[test]
    fn sgd_method_parses_its_fields() {
        let text = "[optimizer]\nmethod = sgd\nlearning_rate = 1e-4\nclip_threshold = 2.0\nbatch_size = 4\n";
        let run = parse_run_config(text, "test").unwrap();
        match &run.optimizer {
            OptimizerConfig::Sgd(cfg) => {
                assert_eq!(cfg.learning_rate, 1e-4);
                assert_eq!(cfg.clip_threshold, 2.0);
                assert_eq!(cfg.batch_size, 4);
            }
            other => panic!("expected sgd, got {}", other.method_name()),
        }
    }

    #[test]
    fn batch_size_zero_resolves_to_quarter() {
        let run = RunConfig::default_desk();
        assert_eq!(run.resolved_batch_size(256), 64);
        assert_eq!(run.resolved_batch_size(3), 1);
    }

    #[test]
    fn bad_kappa_is_rejected() {
        let err = parse_run_config("[train]\nkappa = 1.5\n", "test");
        assert!(err.is_err());
    }
}
