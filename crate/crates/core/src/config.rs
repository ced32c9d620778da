//! Experiment configuration shared by every command.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::constraints::ConstraintKind;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RECALL_KS;
use crate::mof::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reranker {
    /// Retrieval only.
    None,
    Qe,
    Dba,
    Superglobal,
    Adaptive,
    #[default]
    Mof,
}

impl Reranker {
    pub const ALL: [Reranker; 6] = [
        Reranker::None,
        Reranker::Qe,
        Reranker::Dba,
        Reranker::Superglobal,
        Reranker::Adaptive,
        Reranker::Mof,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reranker::None => "none",
            Reranker::Qe => "qe",
            Reranker::Dba => "dba",
            Reranker::Superglobal => "superglobal",
            Reranker::Adaptive => "adaptive",
            Reranker::Mof => "mof",
        }
    }
}

impl fmt::Display for Reranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reranker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Reranker::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown reranker {s:?}")))
    }
}

/// Everything a run needs. Paths name bundle directories (see
/// [`crate::runner::Bundle`]) unless stated otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub db: PathBuf,
    pub queries: PathBuf,
    pub train_queries: Option<PathBuf>,
    /// Defaults to the training queries.
    pub val_queries: Option<PathBuf>,
    /// CSV of pairwise match statistics; needed by the matching constraint.
    pub match_stats: Option<PathBuf>,
    /// Pretrained weight file. When set, training is skipped.
    pub weights: Option<PathBuf>,
    pub out: PathBuf,

    pub constraint: ConstraintKind,
    /// GPS neighbor radius in meters.
    pub epsilon: f64,
    /// Timestamp neighbor window in seconds.
    pub t: f64,
    pub t_margin: f64,
    pub sigma: f64,
    pub delta: f64,
    /// Radius in meters that makes a database row a positive for a query.
    pub gt_epsilon: f64,

    pub k: usize,
    pub l: usize,
    pub reranker: Reranker,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub recall_ks: Vec<usize>,
    pub seed: u64,
    /// Worker threads; machine parallelism when unset.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            db: PathBuf::new(),
            queries: PathBuf::new(),
            train_queries: None,
            val_queries: None,
            match_stats: None,
            weights: None,
            out: PathBuf::new(),
            constraint: ConstraintKind::Gps,
            epsilon: 25.0,
            t: 1.0,
            t_margin: 0.0,
            sigma: 0.5,
            delta: 0.9,
            gt_epsilon: 25.0,
            k: 10,
            l: 8,
            reranker: Reranker::Mof,
            baseline: BaselineConfig::default(),
            train: TrainConfig::default(),
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            seed: 0,
            threads: None,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl RunConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.db);
        fix(&mut self.queries);
        fix(&mut self.out);
        for p in [
            &mut self.train_queries,
            &mut self.val_queries,
            &mut self.match_stats,
            &mut self.weights,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks every value without touching the file system.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.l == 0 {
            return bad(format!("k and l must be at least 1, got k = {} and l = {}", self.k, self.l));
        }
        non_negative("epsilon", self.epsilon)?;
        non_negative("t_margin", self.t_margin)?;
        non_negative("gt_epsilon", self.gt_epsilon)?;
        if !(self.t > 0.0 && self.t.is_finite()) {
            return bad(format!("t must be positive, got {}", self.t));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad(format!("sigma must lie in (0, 1), got {}", self.sigma));
        }
        if !(self.delta > -1.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (-1, 1), got {}", self.delta));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return bad("recall_ks must be a non-empty list of positive cut-offs".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        self.baseline.validate()?;
        self.train.validate()?;
        if self.constraint == ConstraintKind::Matching && self.match_stats.is_none() {
            return bad("the matching constraint needs match_stats".into());
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the inputs a full run requires.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        for (name, p) in [("db", &self.db), ("queries", &self.queries), ("out", &self.out)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{name} path is required")));
            }
        }
        if self.reranker == Reranker::Mof && self.weights.is_none() && self.train_queries.is_none() {
            return Err(Error::Config(
                "the mof reranker needs either weights or train_queries".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn out_of_range_sigma_is_a_config_error() {
        let cfg = RunConfig {
            sigma: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("sigma")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"k": 5, "kk": 1}"#).unwrap_err();
        assert!(err.to_string().contains("kk"));
        let cfg: RunConfig = serde_json::from_str(r#"{"k": 5, "reranker": "dba"}"#).unwrap();
        assert_eq!((cfg.k, cfg.l, cfg.reranker), (5, 8, Reranker::Dba));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            db: "db".into(),
            out: "/abs/out".into(),
            weights: Some("w.epmw".into()),
            ..RunConfig::default()
        };
        let path = dir.path().join("run.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.db, dir.path().join("db"));
        assert_eq!(back.out, PathBuf::from("/abs/out"));
        assert_eq!(back.weights, Some(dir.path().join("w.epmw")));
        assert_eq!(back.queries, PathBuf::new());
    }

    #[test]
    fn reranker_names_round_trip() {
        for r in Reranker::ALL {
            assert_eq!(r.to_string().parse::<Reranker>().unwrap(), r);
        }
        assert!("bogus".parse::<Reranker>().is_err());
    }

    #[test]
    fn mof_needs_a_weight_source() {
        let cfg = RunConfig {
            db: "a".into(),
            queries: "b".into(),
            out: "c".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate_for_run().is_err());
        let cfg = RunConfig {
            reranker: Reranker::None,
            ..cfg
        };
        cfg.validate_for_run().unwrap();
    }
}
