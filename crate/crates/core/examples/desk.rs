use std::time::Instant;

use headsteer::lora::MaskVariant;
use headsteer::policy::PolicyConfig;
use headsteer::selector::{extract_cache, search_k, ExtractOptions, Metric, DEFAULT_K_CANDIDATES};
use headsteer::simenv::{eval_grid, gen_demos, EvalGrid, NeuralPolicy, Perturbation, TaskSpec};
use headsteer::trainer::{finetune, pretrain_multitask, samples_from, FinetuneSpec, TrainConfig};

fn main() -> headsteer::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_pre: usize = args.get(1).map_or(100, |s| s.parse().unwrap());
    let pre_steps: usize = args.get(2).map_or(3000, |s| s.parse().unwrap());
    let ft_steps: usize = args.get(3).map_or(2000, |s| s.parse().unwrap());
    let m: usize = args.get(4).map_or(4, |s| s.parse().unwrap());
    let t0 = Instant::now();
    let reach = TaskSpec::preset("reach-red")?;
    let push = TaskSpec::preset("push-blue")?;
    let pp = TaskSpec::preset("pick-place-red")?;
    let d1 = gen_demos(&reach, n_pre, 0.1, 1)?;
    let d2 = gen_demos(&push, n_pre, 0.1, 2)?;
    let pcfg = PolicyConfig::default();
    let tcfg = TrainConfig {
        total_steps: pre_steps,
        batch_size: 32,
        ..Default::default()
    };
    let (base, log) = pretrain_multitask(&pcfg, &[&d1, &d2], &tcfg)?;
    println!(
        "pretrain {:.1}s final loss {:.4}",
        t0.elapsed().as_secs_f64(),
        log.rows.last().unwrap().loss
    );
    let grid = EvalGrid::standard(7);
    let pol = NeuralPolicy { params: &base };
    for t in [&reach, &push, &pp] {
        println!(
            "base {} {:.3}",
            t.name(),
            eval_grid(&pol, t, &grid, Perturbation::None)?.rate
        );
    }
    for seed in 0..3u64 {
        let demos = gen_demos(&pp, 20, 0.1, 100 + seed)?;
        let cache = extract_cache(&base, &demos, ExtractOptions::default())?;
        let (k, sel) = search_k(&cache, &DEFAULT_K_CANDIDATES, m, Metric::Cosine)?;
        println!(
            "seed {seed} k={k} heads {:?}",
            sel.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>()
        );
        let data = samples_from(&[&demos]);
        let cfg = TrainConfig {
            total_steps: ft_steps,
            seed,
            ..Default::default()
        };
        for variant in [MaskVariant::QueriesPlusMlp, MaskVariant::FullHeadBaseline] {
            let t1 = Instant::now();
            let spec = FinetuneSpec {
                variant,
                ..Default::default()
            };
            let (ad, log) = finetune(&base, &sel.head_set(), &spec, &data, &cfg, None)?;
            let eff = ad.effective();
            let pol = NeuralPolicy { params: &eff };
            let mut line = format!(
                "  {variant:?} params {} loss {:.4} ({:.1}s):",
                ad.trainable_param_count(),
                log.rows.last().unwrap().loss,
                t1.elapsed().as_secs_f64()
            );
            for p in Perturbation::ALL {
                line += &format!(" {}={:.3}", p.name(), eval_grid(&pol, &pp, &grid, p)?.rate);
            }
            println!("{line}");
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
