//! Experiment configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::DecodeSchedule;
use crate::encoder::{EncoderConfig, PretrainSchedule};
use crate::error::{Error, Result};
use crate::evalbench::{SearchSpace, TrainBudget, DEFAULT_VIEWS, RANDOM_SEARCH_MODELS};
use crate::policyspace::{default_classifier_candidates, default_encoder_candidates, PolicyCandidate, DEFAULT_TAU};
use crate::search::SearchConfig;
use crate::tasks::{DatasetSpec, EpisodeShape};

fn default_tau() -> f64 {
    DEFAULT_TAU
}

/// Candidate roster offered at every encoder stage and at the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRoster {
    pub encoder: Vec<PolicyCandidate>,
    pub classifier: Vec<PolicyCandidate>,
}

impl Default for CandidateRoster {
    fn default() -> Self {
        Self { encoder: default_encoder_candidates(), classifier: default_classifier_candidates() }
    }
}

impl CandidateRoster {
    pub fn space(&self) -> SearchSpace {
        SearchSpace { encoder: self.encoder.clone(), classifier: self.classifier.clone() }
    }
}

/// Outer-loop settings; episode geometry and seed come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub episodes_total: usize,
    pub outer_lr_theta: f64,
    pub outer_lr_alpha: f64,
    pub clip_norm: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            episodes_total: d.episodes_total,
            outer_lr_theta: d.outer_lr_theta,
            outer_lr_alpha: d.outer_lr_alpha,
            clip_norm: d.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Test episodes per evaluation.
    pub episodes: usize,
    /// Views averaged when multi-crop is requested.
    pub multicrop_views: usize,
    /// Validation episodes used to pick a preset's inner learning rate.
    pub preset_val_episodes: usize,
    pub random_models: usize,
    /// Outer iterations given to each trained baseline; defaults to the
    /// final fine-tuning budget.
    pub baseline_train_episodes: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 600,
            multicrop_views: DEFAULT_VIEWS,
            preset_val_episodes: 50,
            random_models: RANDOM_SEARCH_MODELS,
            baseline_train_episodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    /// Target-domain dataset; its validation classes feed Step 2 and its
    /// test classes the evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DatasetSpec>,
    pub encoder: EncoderConfig,
    pub episode: EpisodeShape,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub candidates: CandidateRoster,
    #[serde(default)]
    pub pretrain: PretrainSchedule,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub decode: DecodeSchedule,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.input_shape != self.dataset.input_shape {
            return Err(Error::Config(format!(
                "encoder input shape {:?} differs from dataset shape {:?}",
                self.encoder.input_shape, self.dataset.input_shape
            )));
        }
        let ep = self.episode;
        if ep.n_way < 2 || ep.k_shot < 1 || ep.q_per_class < 1 {
            return Err(Error::Config("episodes need n_way >= 2, k_shot >= 1 and q_per_class >= 1".into()));
        }
        let (tr, va, te) = self.dataset.splits()?.sizes();
        let (va, te) = match &self.target {
            Some(t) => {
                let (_, tv, tt) = t.splits()?.sizes();
                (tv, tt)
            }
            None => (va, te),
        };
        if tr.min(va).min(te) < ep.n_way {
            return Err(Error::Config(format!("n_way {} exceeds a split (train {tr}, val {va}, test {te})", ep.n_way)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.candidates.encoder.is_empty() || self.candidates.classifier.is_empty() {
            return Err(Error::Config("candidate rosters must be non-empty".into()));
        }
        for c in &self.candidates.encoder {
            c.validate()?;
            if !c.kind.is_encoder() {
                return Err(Error::Config(format!("{} is not an encoder policy", c.kind)));
            }
        }
        for c in &self.candidates.classifier {
            c.validate()?;
            if c.kind.is_encoder() {
                return Err(Error::Config(format!("{} is not a classifier policy", c.kind)));
            }
        }
        self.search_config().validate()?;
        if self.eval.episodes == 0 || self.eval.multicrop_views == 0 {
            return Err(Error::Config("eval episodes and views must be positive".into()));
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            episodes_total: self.search.episodes_total,
            outer_lr_theta: self.search.outer_lr_theta,
            outer_lr_alpha: self.search.outer_lr_alpha,
            n_way: self.episode.n_way,
            k_shot: self.episode.k_shot,
            q_per_class: self.episode.q_per_class,
            clip_norm: self.search.clip_norm,
            seed: self.seed,
        }
    }

    pub fn train_budget(&self) -> TrainBudget {
        TrainBudget {
            iterations: self.eval.baseline_train_episodes.unwrap_or(self.decode.final_episodes),
            outer_lr: self.search.outer_lr_theta,
            clip_norm: self.search.clip_norm,
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys), output directory
    /// excluded so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 3
output_dir = "runs/x"

[dataset]
input_shape = [8]
min_examples_per_class = 20

[dataset.source]
type = "synthetic"
domain = "source"

[dataset.source.family]
kind = "gaussian-clusters"
dim = 8
class_pool_size = 30
noise_scale = 0.5
seed = 1

[dataset.class_splits]
train = ["class_000", "class_001", "class_002", "class_003", "class_004", "class_005", "class_006", "class_007", "class_008", "class_009"]
val = ["class_010", "class_011", "class_012", "class_013", "class_014"]
test = ["class_015", "class_016", "class_017", "class_018", "class_019"]

[encoder]
block_family = "dense"
input_shape = [8]
widths = [8, 8]

[episode]
n_way = 5
k_shot = 1
q_per_class = 5
"#;

    #[test]
    fn roundtrip_keeps_hash() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.search.episodes_total, 1000);
        assert_eq!(cfg.decode, DecodeSchedule::default());
        assert_eq!(cfg.eval.episodes, 600);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        let mut moved = cfg.clone();
        moved.output_dir = "elsewhere".into();
        assert_eq!(moved.hash(), cfg.hash());
        moved.seed = 4;
        assert_ne!(moved.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        for (needle, repl) in [
            ("seed = 3", "seed = 3\nsede = 4"),
            ("k_shot = 1", "k_shot = 1\nk_shots = 2"),
            ("noise_scale = 0.5", "noise_scale = 0.5\nnoise = 1.0"),
            ("widths = [8, 8]", "widths = [8, 8]\nwidht = 3"),
        ] {
            let text = SAMPLE.replacen(needle, repl, 1);
            let err = ExperimentConfig::from_toml(&text).unwrap_err();
            assert!(matches!(&err, Error::Config(m) if m.contains("unknown field")), "{err}");
        }
        let text = format!("{SAMPLE}\n[search]\nepisode_total = 3\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = SAMPLE.replacen("k_shot = 1", "k_shot = \"one\"", 1);
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let text = SAMPLE.replacen("n_way = 5", "n_way = 6", 1);
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = SAMPLE.replacen("input_shape = [8]\nwidths", "input_shape = [7]\nwidths", 1);
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{SAMPLE}\n[candidates]\nencoder = [{{ kind = \"PL_DI\", strength = \"fixed\" }}]\nclassifier = [{{ kind = \"PL_DI\", strength = \"fixed\" }}]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../configs/synthetic.toml"), include_str!("../../../configs/shifted.toml")] {
            ExperimentConfig::from_toml(text).unwrap();
        }
        let shifted = ExperimentConfig::from_toml(include_str!("../../../configs/shifted.toml")).unwrap();
        assert!(shifted.target.is_some());
        assert_eq!(shifted.episode.k_shot, 10);
    }
}
