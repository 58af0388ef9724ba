//! End-to-end orchestration: each stage reads artifacts, writes artifacts,
//! and is recorded in a manifest that `repro` can replay.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{consistency_study, ConsistencyOptions, OverlapMatrix};
use crate::error::{Error, Result};
use crate::lora::MaskVariant;
use crate::selector::{
    centroid_select, cma_score, extract_cache, reinforce_select, search_k, select_top_m,
    CmaOptions, ExtractOptions, Method, ReinforceOptions, SelectionResult,
};
use crate::simenv::{eval_grid, gen_demos, EvalGrid, NeuralPolicy, TaskSpec};
use crate::store::{
    read_cache, read_checkpoint, read_demos, read_selection, write_cache, write_checkpoint,
    write_demos, write_reports, write_selection, Checkpoint,
};
use crate::trainer::{finetune, pretrain_multitask, samples_from};

pub use config::{DataConfig, EvalConfig, PathsConfig, PipelineConfig, SelectConfig, SEED_ENV};

/// One unit of work with explicit input and output paths. Hyperparameters
/// come from the [`PipelineConfig`] it runs under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Stage {
    GenDemos {
        task: String,
        n: usize,
        noise: f64,
        seed: u64,
        out: PathBuf,
    },
    Pretrain {
        demos: Vec<PathBuf>,
        out: PathBuf,
    },
    CacheActs {
        checkpoint: PathBuf,
        demos: PathBuf,
        out: PathBuf,
    },
    SelectHeads {
        cache: PathBuf,
        /// Policy and demos, needed by the ablation-based methods.
        checkpoint: Option<PathBuf>,
        demos: Option<PathBuf>,
        /// Negative-class cache for centroid selection.
        negative: Option<PathBuf>,
        out: PathBuf,
    },
    Finetune {
        checkpoint: PathBuf,
        demos: PathBuf,
        selection: Option<PathBuf>,
        out: PathBuf,
    },
    Eval {
        checkpoint: PathBuf,
        task: String,
        out: PathBuf,
    },
    Analyze {
        selections: Vec<PathBuf>,
        cache: Option<PathBuf>,
        out: PathBuf,
    },
}

/// Training log written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenDemos { .. } => "gen-demos",
            Stage::Pretrain { .. } => "pretrain",
            Stage::CacheActs { .. } => "cache-acts",
            Stage::SelectHeads { .. } => "select-heads",
            Stage::Finetune { .. } => "finetune",
            Stage::Eval { .. } => "eval",
            Stage::Analyze { .. } => "analyze",
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Stage::GenDemos { .. } => vec![],
            Stage::Pretrain { demos, .. } => demos.clone(),
            Stage::CacheActs {
                checkpoint, demos, ..
            } => vec![checkpoint.clone(), demos.clone()],
            Stage::SelectHeads {
                cache,
                checkpoint,
                demos,
                negative,
                ..
            } => std::iter::once(cache.clone())
                .chain(checkpoint.clone())
                .chain(demos.clone())
                .chain(negative.clone())
                .collect(),
            Stage::Finetune {
                checkpoint,
                demos,
                selection,
                ..
            } => [checkpoint.clone(), demos.clone()]
                .into_iter()
                .chain(selection.clone())
                .collect(),
            Stage::Eval { checkpoint, .. } => vec![checkpoint.clone()],
            Stage::Analyze {
                selections, cache, ..
            } => selections.iter().cloned().chain(cache.clone()).collect(),
        }
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Stage::Pretrain { out, .. } | Stage::Finetune { out, .. } => {
                vec![out.clone(), log_path(out)]
            }
            Stage::GenDemos { out, .. }
            | Stage::CacheActs { out, .. }
            | Stage::SelectHeads { out, .. }
            | Stage::Eval { out, .. }
            | Stage::Analyze { out, .. } => vec![out.clone()],
        }
    }

    /// Applies precedence rules that depend on the config. The full-head
    /// baseline does not use a selection, so one passed to it is dropped
    /// with a warning.
    pub fn normalize(self, cfg: &PipelineConfig) -> Stage {
        match self {
            Stage::Finetune {
                checkpoint,
                demos,
                selection: Some(sel),
                out,
            } if cfg.adapt.variant == MaskVariant::FullHeadBaseline => {
                log::warn!(
                    "full_head_baseline trains every head; ignoring selection file {}",
                    sel.display()
                );
                Stage::Finetune {
                    checkpoint,
                    demos,
                    selection: None,
                    out,
                }
            }
            other => other,
        }
    }

    fn with_outputs_in(&self, dir: &Path) -> Stage {
        let mv = |p: &PathBuf| dir.join(p.file_name().unwrap_or(p.as_os_str()));
        let mut s = self.clone();
        match &mut s {
            Stage::GenDemos { out, .. }
            | Stage::Pretrain { out, .. }
            | Stage::CacheActs { out, .. }
            | Stage::SelectHeads { out, .. }
            | Stage::Finetune { out, .. }
            | Stage::Eval { out, .. }
            | Stage::Analyze { out, .. } => *out = mv(out),
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn hash_all(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Machine-readable record of a run. Wall-clock fields live only here, never
/// in the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| {
            Error::format(
                crate::error::FormatErrorKind::Shape,
                format!("manifest: {e}"),
            )
        })
    }
}

/// Default manifest location for a single stage.
pub fn manifest_path(stage: &Stage) -> PathBuf {
    let out = stage.outputs().remove(0);
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn load_params(path: &Path) -> Result<crate::policy::PolicyParams> {
    read_checkpoint(path)?.params()
}

/// Does the work of one stage, without hashing or manifests.
pub fn execute(stage: &Stage, cfg: &PipelineConfig) -> Result<()> {
    for p in stage.inputs() {
        if !p.exists() {
            return Err(Error::MissingInput(p));
        }
    }
    for p in stage.outputs() {
        ensure_parent(&p)?;
    }
    match stage {
        Stage::GenDemos {
            task,
            n,
            noise,
            seed,
            out,
        } => {
            let demos = gen_demos(&TaskSpec::preset(task)?, *n, *noise, *seed)?;
            write_demos(out, &demos)
        }
        Stage::Pretrain { demos, out } => {
            let sets = demos.iter().map(read_demos).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = sets.iter().collect();
            let (params, log) = pretrain_multitask(&cfg.policy, &refs, &cfg.pretrain)?;
            write_checkpoint(out, &Checkpoint::from_params(&params, None))?;
            std::fs::write(log_path(out), log.to_csv())?;
            Ok(())
        }
        Stage::CacheActs {
            checkpoint,
            demos,
            out,
        } => {
            let params = load_params(checkpoint)?;
            let opts = ExtractOptions {
                stride: cfg.select.stride,
                token: cfg.select.token,
            };
            write_cache(out, &extract_cache(&params, &read_demos(demos)?, opts)?)
        }
        Stage::SelectHeads {
            cache,
            checkpoint,
            demos,
            negative,
            out,
        } => {
            let sel = select(
                cfg,
                cache,
                checkpoint.as_deref(),
                demos.as_deref(),
                negative.as_deref(),
            )?;
            write_selection(out, &sel)
        }
        Stage::Finetune {
            checkpoint,
            demos,
            selection,
            out,
        } => {
            let base = load_params(checkpoint)?;
            let heads: BTreeSet<_> = match (cfg.adapt.variant, selection) {
                (MaskVariant::FullHeadBaseline, _) => BTreeSet::new(),
                (_, Some(p)) => read_selection(p)?.head_set(),
                (_, None) => {
                    return Err(Error::Contract(format!(
                        "finetune with {:?} needs a selection file",
                        cfg.adapt.variant
                    )))
                }
            };
            let data = samples_from(&[&read_demos(demos)?]);
            let (adapted, log) = finetune(&base, &heads, &cfg.adapt, &data, &cfg.finetune, None)?;
            let parent = Some(sha256_file(checkpoint)?);
            write_checkpoint(out, &Checkpoint::merged(&adapted, parent))?;
            std::fs::write(log_path(out), log.to_csv())?;
            Ok(())
        }
        Stage::Eval {
            checkpoint,
            task,
            out,
        } => {
            let params = load_params(checkpoint)?;
            let task = TaskSpec::preset(task)?;
            let grid = EvalGrid::standard(cfg.eval.grid_seed);
            let policy = NeuralPolicy { params: &params };
            let reports = cfg
                .eval
                .perturbations
                .iter()
                .map(|&p| eval_grid(&policy, &task, &grid, p))
                .collect::<Result<Vec<_>>>()?;
            write_reports(out, &reports)
        }
        Stage::Analyze {
            selections,
            cache,
            out,
        } => std::fs::write(out, analyze(cfg, selections, cache.as_deref())?).map_err(Error::from),
    }
}

fn select(
    cfg: &PipelineConfig,
    cache: &Path,
    checkpoint: Option<&Path>,
    demos: Option<&Path>,
    negative: Option<&Path>,
) -> Result<SelectionResult> {
    let s = &cfg.select;
    let cache = read_cache(cache)?;
    let model_inputs = || -> Result<_> {
        match (checkpoint, demos) {
            (Some(c), Some(d)) => Ok((load_params(c)?, read_demos(d)?)),
            _ => Err(Error::Contract(format!(
                "{} selection needs --checkpoint and --demos",
                s.method.name()
            ))),
        }
    };
    match s.method {
        Method::Knn => Ok(search_k(&cache, &s.k, s.m, s.metric)?.1),
        Method::Cma => {
            let (params, demos) = model_inputs()?;
            let opts = CmaOptions {
                seed: cfg.seed,
                repeats: s.cma_repeats,
            };
            select_top_m(&cma_score(&params, &demos, &cache, opts)?, s.m)
        }
        Method::Reinforce => {
            let (params, demos) = model_inputs()?;
            let opts = ReinforceOptions {
                iters: s.reinforce_iters,
                lr: s.reinforce_lr,
                seed: cfg.seed,
                ..Default::default()
            };
            reinforce_select(&params, &demos, &cache, s.m, opts)
        }
        Method::Centroid => {
            let neg = negative
                .ok_or_else(|| Error::Contract("centroid selection needs --negative".into()))?;
            Ok(centroid_select(&cache, &read_cache(neg)?, s.m)?.selection)
        }
    }
}

fn analyze(cfg: &PipelineConfig, selections: &[PathBuf], cache: Option<&Path>) -> Result<String> {
    let mut out = String::new();
    if selections.len() >= 2 {
        let sels = selections
            .iter()
            .map(read_selection)
            .collect::<Result<Vec<_>>>()?;
        let labels = selections
            .iter()
            .map(|p| {
                p.file_stem()
                    .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
            })
            .collect();
        out += &OverlapMatrix::build(labels, &sels, cfg.seed)?.to_csv();
    }
    if let Some(c) = cache {
        let opts = ConsistencyOptions {
            k: cfg.select.k.iter().copied().min().unwrap_or(10),
            m: cfg.select.m,
            metric: cfg.select.metric,
            seed: cfg.seed,
        };
        let study = consistency_study(&read_cache(c)?, &opts)?;
        out += &study.top_m.to_csv();
        out += &study.top_2m.to_csv();
    }
    if out.is_empty() {
        return Err(Error::Contract(
            "analyze needs two or more selections or a cache".into(),
        ));
    }
    Ok(out)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs stages in order under one config and records them.
pub fn run_stages(stages: Vec<Stage>, cfg: &PipelineConfig) -> Result<Manifest> {
    let started_unix_secs = unix_now();
    let t0 = Instant::now();
    let mut records = Vec::with_capacity(stages.len());
    for stage in stages {
        let stage = stage.normalize(cfg);
        let inputs = hash_all(&stage.inputs())?;
        log::info!("running {}", stage.name());
        execute(&stage, cfg)?;
        let outputs = hash_all(&stage.outputs())?;
        records.push(StageRecord {
            stage,
            inputs,
            outputs,
        });
    }
    Ok(Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        stages: records,
        started_unix_secs,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
    })
}

/// The complete pipeline for `cfg`, with artifacts under its output paths:
/// demos for every pretraining task and the held-out task, pretraining,
/// cache extraction, selection, finetuning, evaluation of the base and
/// finetuned policies, and a consistency analysis.
pub fn full_pipeline(cfg: &PipelineConfig) -> Vec<Stage> {
    let dir = cfg.out_dir();
    let d = &cfg.data;
    let mut stages = Vec::new();
    let mut pre = Vec::new();
    for (i, task) in d.pretrain_tasks.iter().enumerate() {
        let out = dir.join(format!("pretrain-{task}.hsdm"));
        stages.push(Stage::GenDemos {
            task: task.clone(),
            n: d.pretrain_demos,
            noise: d.noise,
            seed: cfg.seed.wrapping_add(1 + i as u64),
            out: out.clone(),
        });
        pre.push(out);
    }
    let (demos, base, cache) = (cfg.path("demos"), cfg.path("base"), cfg.path("cache"));
    stages.push(Stage::GenDemos {
        task: d.task.clone(),
        n: d.demos,
        noise: d.noise,
        seed: cfg.seed.wrapping_add(100),
        out: demos.clone(),
    });
    stages.push(Stage::Pretrain {
        demos: pre,
        out: base.clone(),
    });
    stages.push(Stage::CacheActs {
        checkpoint: base.clone(),
        demos: demos.clone(),
        out: cache.clone(),
    });
    let needs_model = matches!(cfg.select.method, Method::Cma | Method::Reinforce);
    let negative = if cfg.select.method == Method::Centroid {
        let neg_demos = dir.join("negative.hsdm");
        let neg_cache = dir.join("negative.hsac");
        stages.push(Stage::GenDemos {
            task: cfg.select.negative_task.clone(),
            n: d.demos,
            noise: d.noise,
            seed: cfg.seed.wrapping_add(200),
            out: neg_demos.clone(),
        });
        stages.push(Stage::CacheActs {
            checkpoint: base.clone(),
            demos: neg_demos,
            out: neg_cache.clone(),
        });
        Some(neg_cache)
    } else {
        None
    };
    let selection = cfg.path("selection");
    stages.push(Stage::SelectHeads {
        cache: cache.clone(),
        checkpoint: needs_model.then(|| base.clone()),
        demos: needs_model.then(|| demos.clone()),
        negative,
        out: selection.clone(),
    });
    let finetuned = cfg.path("finetuned");
    stages.push(Stage::Finetune {
        checkpoint: base.clone(),
        demos,
        selection: Some(selection.clone()),
        out: finetuned.clone(),
    });
    stages.push(Stage::Eval {
        checkpoint: base,
        task: d.task.clone(),
        out: dir.join("base-report.json"),
    });
    stages.push(Stage::Eval {
        checkpoint: finetuned,
        task: d.task.clone(),
        out: cfg.path("report"),
    });
    stages.push(Stage::Analyze {
        selections: vec![],
        cache: Some(cache),
        out: cfg.path("analysis"),
    });
    stages
}

/// What a replay compared.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproReport {
    pub compared: Vec<FileHash>,
}

/// Replays every stage of `manifest` against its recorded inputs, writing
/// into `scratch`, and checks that each output hashes as recorded.
pub fn repro(manifest: &Manifest, scratch: &Path) -> Result<ReproReport> {
    let cfg = &manifest.config;
    let mut compared = Vec::new();
    for (i, rec) in manifest.stages.iter().enumerate() {
        for h in &rec.inputs {
            let now = sha256_file(&h.path)?;
            if now != h.sha256 {
                return Err(Error::ReproMismatch(format!(
                    "input {} changed since the run (stage {} {})",
                    h.path.display(),
                    i,
                    rec.stage.name()
                )));
            }
        }
        let dir = scratch.join(format!("{i:02}-{}", rec.stage.name()));
        std::fs::create_dir_all(&dir)?;
        let replay = rec.stage.with_outputs_in(&dir);
        execute(&replay, cfg)?;
        for (want, got_path) in rec.outputs.iter().zip(replay.outputs()) {
            let got = sha256_file(&got_path)?;
            if got != want.sha256 {
                return Err(Error::ReproMismatch(format!(
                    "{} hashes to {} on replay, recorded {}",
                    want.path.display(),
                    &got[..12],
                    &want.sha256[..12]
                )));
            }
            compared.push(want.clone());
        }
    }
    Ok(ReproReport { compared })
}
