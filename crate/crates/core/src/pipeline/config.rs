use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, TapToken};
use crate::selector::{Method, Metric, DEFAULT_K_CANDIDATES};
use crate::simenv::{Perturbation, TaskSpec};
use crate::trainer::{FinetuneSpec, TrainConfig};

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "HEADSTEER_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain_tasks: Vec<String>,
    pub pretrain_demos: usize,
    /// Held-out task used for selection, finetuning and evaluation.
    pub task: String,
    pub demos: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_tasks: vec!["reach-red".into(), "push-blue".into()],
            pretrain_demos: 100,
            task: "pick-place-red".into(),
            demos: 20,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub method: Method,
    pub metric: Metric,
    /// Candidate neighbour counts; the best is kept.
    pub k: Vec<usize>,
    pub m: usize,
    pub stride: usize,
    pub token: TapToken,
    pub cma_repeats: usize,
    pub reinforce_iters: usize,
    pub reinforce_lr: f64,
    /// Task whose demos form the negative class for centroid selection.
    pub negative_task: String,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            method: Method::Knn,
            metric: Metric::Cosine,
            k: DEFAULT_K_CANDIDATES.to_vec(),
            m: 4,
            stride: 1,
            token: TapToken::State,
            cma_repeats: 1,
            reinforce_iters: 200,
            reinforce_lr: 0.5,
            negative_task: "reach-red".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid_seed: u64,
    pub perturbations: Vec<Perturbation>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_seed: 7,
            perturbations: Perturbation::ALL.to_vec(),
        }
    }
}

/// Artifact locations. Unset entries fall back to a fixed file name inside
/// `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub analysis: Option<PathBuf>,
}

/// Everything one pipeline run depends on. Loaded from TOML; every field
/// can also be set by a command-line flag, which wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed. Overwrites the seeds inside `policy`, `pretrain` and
    /// `finetune`.
    pub seed: u64,
    pub policy: PolicyConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub data: DataConfig,
    pub select: SelectConfig,
    pub adapt: FinetuneSpec,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            policy: PolicyConfig::default(),
            pretrain: TrainConfig {
                total_steps: 3000,
                batch_size: 32,
                ..Default::default()
            },
            finetune: TrainConfig {
                total_steps: 2000,
                ..Default::default()
            },
            data: DataConfig::default(),
            select: SelectConfig::default(),
            adapt: FinetuneSpec::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Field name and path of each artifact default.
const DEFAULT_NAMES: [(&str, &str); 7] = [
    ("demos", "demos.hsdm"),
    ("base", "base.hsck"),
    ("cache", "cache.hsac"),
    ("selection", "selection.json"),
    ("finetuned", "finetuned.hsck"),
    ("report", "report.json"),
    ("analysis", "analysis.csv"),
];

impl PipelineConfig {
    /// Parses TOML text. A seed in the file beats `env_seed`.
    pub fn from_toml(text: &str, env_seed: Option<u64>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        let has_seed = table.contains_key("seed");
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        if !has_seed {
            if let Some(s) = env_seed {
                cfg.seed = s;
            }
        }
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise starts from defaults, then applies
    /// the seed from the environment at lowest precedence.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?),
            Err(_) => None,
        };
        match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingInput(p.to_path_buf()));
                }
                Self::from_toml(&std::fs::read_to_string(p)?, env_seed)
            }
            None => {
                let mut cfg = Self::default();
                if let Some(s) = env_seed {
                    cfg.seed = s;
                }
                Ok(cfg)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Pushes the master seed and the policy's loss kind into the sub-configs
    /// and checks everything that can be checked without touching files.
    pub fn resolve(mut self) -> Result<Self> {
        self.policy.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.pretrain.loss = self.policy.action_head;
        self.finetune.loss = self.policy.action_head;
        self.policy.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        for t in self
            .data
            .pretrain_tasks
            .iter()
            .chain([&self.data.task, &self.select.negative_task])
        {
            TaskSpec::preset(t)?;
        }
        if self.data.pretrain_tasks.is_empty() {
            return Err(Error::Config("no pretraining tasks".into()));
        }
        if self.data.demos < 2 || self.data.pretrain_demos == 0 {
            return Err(Error::Config(
                "need at least 2 finetuning demos and 1 pretraining demo".into(),
            ));
        }
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(Error::Config(
                "demo noise must be finite and non-negative".into(),
            ));
        }
        let heads = self.policy.n_layers * self.policy.n_heads;
        if self.select.m == 0 || self.select.m > heads {
            return Err(Error::Config(format!("m must lie in 1..={heads}")));
        }
        if self.select.k.is_empty() || self.select.k.contains(&0) {
            return Err(Error::Config(
                "k candidates must be a non-empty list of positive values".into(),
            ));
        }
        if self.select.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.adapt.rank == 0 || !(self.adapt.alpha > 0.0) {
            return Err(Error::Config(
                "adapter rank and alpha must be positive".into(),
            ));
        }
        Ok(self)
    }

    /// Location of a named artifact.
    pub fn path(&self, name: &str) -> PathBuf {
        let set = match name {
            "demos" => &self.paths.demos,
            "base" => &self.paths.base,
            "cache" => &self.paths.cache,
            "selection" => &self.paths.selection,
            "finetuned" => &self.paths.finetuned,
            "report" => &self.paths.report,
            "analysis" => &self.paths.analysis,
            other => panic!("unknown artifact {other}"),
        };
        set.clone().unwrap_or_else(|| {
            let file = DEFAULT_NAMES
                .iter()
                .find(|(n, _)| *n == name)
                .expect("listed")
                .1;
            self.out_dir().join(file)
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("run"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml(), None).unwrap();
        assert_eq!(back, cfg);

        let partial = PipelineConfig::from_toml("[select]\nm = 6\nk = [5]\n", None).unwrap();
        assert_eq!(partial.select.m, 6);
        assert_eq!(partial.select.k, vec![5]);
        assert_eq!(partial.finetune, cfg.finetune);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(PipelineConfig::from_toml("", Some(9)).unwrap().seed, 9);
        assert_eq!(
            PipelineConfig::from_toml("seed = 3", Some(9)).unwrap().seed,
            3
        );
        assert_eq!(PipelineConfig::from_toml("", None).unwrap().seed, 0);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["seed = \"x\"", "[select]\nbogus = 1", "not toml ["] {
            assert!(
                matches!(PipelineConfig::from_toml(text, None), Err(Error::Config(_))),
                "{text}"
            );
        }
        let mut cfg = PipelineConfig::default();
        cfg.select.m = 99;
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn resolve_spreads_seed() {
        let cfg = PipelineConfig {
            seed: 11,
            ..Default::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(
            (r.policy.seed, r.pretrain.seed, r.finetune.seed),
            (11, 11, 11)
        );
        assert_eq!(r.path("cache"), PathBuf::from("run/cache.hsac"));
    }
}
