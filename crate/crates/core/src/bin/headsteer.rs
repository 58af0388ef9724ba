use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use headsteer::lora::MaskVariant;
use headsteer::pipeline::{
    full_pipeline, manifest_path, repro, run_stages, Manifest, PipelineConfig, Stage,
};
use headsteer::policy::TapToken;
use headsteer::selector::{Method, Metric};
use headsteer::{Error, Result};

/// Few-shot attention-head selection and selective finetuning.
#[derive(Parser, Debug)]
#[command(name = "headsteer", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Each one overrides the matching
/// config-file entry.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (config `seed`; falls back to $HEADSTEER_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts without an explicit path (`paths.out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// `pretrain.total_steps`
    #[arg(long, global = true)]
    pretrain_steps: Option<usize>,
    /// `finetune.total_steps`
    #[arg(long, global = true)]
    finetune_steps: Option<usize>,
    /// `finetune.peak_lr`
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// `finetune.batch_size`
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// `data.task`
    #[arg(long, global = true)]
    task: Option<String>,
    /// `data.pretrain_tasks`
    #[arg(long, global = true, value_delimiter = ',')]
    pretrain_tasks: Option<Vec<String>>,
    /// `data.demos`
    #[arg(long, global = true)]
    n_demos: Option<usize>,
    /// `data.pretrain_demos`
    #[arg(long, global = true)]
    n_pretrain_demos: Option<usize>,
    /// `data.noise`
    #[arg(long, global = true)]
    noise: Option<f64>,
    /// `select.method`: knn, cma, reinforce or centroid.
    #[arg(long, global = true)]
    method: Option<String>,
    /// `select.metric`: cosine or euclidean.
    #[arg(long, global = true)]
    metric: Option<String>,
    /// `select.k`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// `select.m`
    #[arg(long, global = true)]
    m: Option<usize>,
    /// `select.stride`
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// `select.token`: state or last_obs.
    #[arg(long, global = true)]
    token: Option<String>,
    /// `adapt.variant`: queries_only, queries_plus_mlp or full_head_baseline.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// `adapt.rank`
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// `adapt.alpha`
    #[arg(long, global = true)]
    alpha: Option<f32>,
    /// `eval.grid_seed`
    #[arg(long, global = true)]
    grid_seed: Option<u64>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations for one task.
    GenDemos {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a base policy on the pretraining tasks.
    Pretrain {
        #[arg(long, value_delimiter = ',')]
        demos: Option<Vec<PathBuf>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record per-head activations of a policy on demos.
    CacheActs {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score heads and keep the best m.
    SelectHeads {
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Negative-class cache, for centroid selection.
        #[arg(long)]
        negative: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt the selected heads and write a merged checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint out on the 40-cell evaluation grid.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlap between selections, and a consistency study on a cache.
    Analyze {
        #[arg(long, value_delimiter = ',')]
        selections: Vec<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    Run,
    /// Replay a manifest and check that every output is byte-identical.
    Repro {
        /// Manifest written by an earlier command.
        path: PathBuf,
    },
}

fn parsed<T: std::str::FromStr<Err = Error>>(v: &Option<String>) -> Result<Option<T>> {
    v.as_deref().map(str::parse).transpose()
}

fn configure(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(o.config.as_deref())?;
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag.clone() { $field = v; })*
        };
    }
    set! {
        o.seed => cfg.seed,
        o.out_dir.clone().map(Some) => cfg.paths.out_dir,
        o.pretrain_steps => cfg.pretrain.total_steps,
        o.finetune_steps => cfg.finetune.total_steps,
        o.lr => cfg.finetune.peak_lr,
        o.batch_size => cfg.finetune.batch_size,
        o.task => cfg.data.task,
        o.pretrain_tasks => cfg.data.pretrain_tasks,
        o.n_demos => cfg.data.demos,
        o.n_pretrain_demos => cfg.data.pretrain_demos,
        o.noise => cfg.data.noise,
        parsed::<Method>(&o.method)? => cfg.select.method,
        parsed::<Metric>(&o.metric)? => cfg.select.metric,
        o.k => cfg.select.k,
        o.m => cfg.select.m,
        o.stride => cfg.select.stride,
        o.rank => cfg.adapt.rank,
        o.alpha => cfg.adapt.alpha,
        o.grid_seed => cfg.eval.grid_seed,
        parsed::<MaskVariant>(&o.variant)? => cfg.adapt.variant,
    }
    if let Some(t) = &o.token {
        cfg.select.token = match t.as_str() {
            "state" => TapToken::State,
            "last_obs" => TapToken::LastObs,
            other => return Err(Error::Config(format!("unknown token position {other:?}"))),
        };
    }
    cfg.resolve()
}

fn or(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

fn stage_for(cmd: &Command, cfg: &PipelineConfig) -> Stage {
    let d = &cfg.data;
    match cmd {
        Command::GenDemos { out } => Stage::GenDemos {
            task: d.task.clone(),
            n: d.demos,
            noise: d.noise,
            seed: cfg.seed,
            out: or(out, cfg.path("demos")),
        },
        Command::Pretrain { demos, out } => Stage::Pretrain {
            demos: demos.clone().unwrap_or_else(|| {
                d.pretrain_tasks
                    .iter()
                    .map(|t| cfg.out_dir().join(format!("pretrain-{t}.hsdm")))
                    .collect()
            }),
            out: or(out, cfg.path("base")),
        },
        Command::CacheActs {
            checkpoint,
            demos,
            out,
        } => Stage::CacheActs {
            checkpoint: or(checkpoint, cfg.path("base")),
            demos: or(demos, cfg.path("demos")),
            out: or(out, cfg.path("cache")),
        },
        Command::SelectHeads {
            cache,
            checkpoint,
            demos,
            negative,
            out,
        } => {
            let needs_model = matches!(cfg.select.method, Method::Cma | Method::Reinforce);
            Stage::SelectHeads {
                cache: or(cache, cfg.path("cache")),
                checkpoint: checkpoint
                    .clone()
                    .or_else(|| needs_model.then(|| cfg.path("base"))),
                demos: demos
                    .clone()
                    .or_else(|| needs_model.then(|| cfg.path("demos"))),
                negative: negative.clone(),
                out: or(out, cfg.path("selection")),
            }
        }
        Command::Finetune {
            checkpoint,
            demos,
            selection,
            out,
        } => Stage::Finetune {
            checkpoint: or(checkpoint, cfg.path("base")),
            demos: or(demos, cfg.path("demos")),
            selection: selection.clone().or_else(|| {
                (cfg.adapt.variant != MaskVariant::FullHeadBaseline).then(|| cfg.path("selection"))
            }),
            out: or(out, cfg.path("finetuned")),
        },
        Command::Eval { checkpoint, out } => Stage::Eval {
            checkpoint: or(checkpoint, cfg.path("finetuned")),
            task: d.task.clone(),
            out: or(out, cfg.path("report")),
        },
        Command::Analyze {
            selections,
            cache,
            out,
        } => Stage::Analyze {
            selections: selections.clone(),
            cache: cache.clone(),
            out: or(out, cfg.path("analysis")),
        },
        Command::Run | Command::Repro { .. } => unreachable!("not a single stage"),
    }
}

fn replay(path: &Path) -> Result<()> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let scratch = base.join(format!(".repro-{}", std::process::id()));
    let result = repro(&manifest, &scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    let report = result?;
    println!(
        "reproduced {} artifacts from {}",
        report.compared.len(),
        path.display()
    );
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    if let Command::Repro { path } = &cli.command {
        return replay(path);
    }
    let cfg = configure(&cli.opts)?;
    let (stages, default_manifest) = match &cli.command {
        Command::Run => (
            full_pipeline(&cfg),
            cfg.out_dir().join("pipeline.manifest.json"),
        ),
        cmd => {
            let stage = stage_for(cmd, &cfg).normalize(&cfg);
            let at = manifest_path(&stage);
            (vec![stage], at)
        }
    };
    let manifest = run_stages(stages, &cfg)?;
    let at = cli.opts.manifest.clone().unwrap_or(default_manifest);
    manifest.write(&at)?;
    for rec in &manifest.stages {
        for out in &rec.outputs {
            println!("{} {}", out.sha256, out.path.display());
        }
    }
    println!("manifest {}", at.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
