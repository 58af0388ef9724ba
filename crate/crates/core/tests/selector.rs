mod common;

use headsteer::lora::HeadId;
use headsteer::policy::{forward, ForwardOptions, TapToken};
use headsteer::selector::*;

use common::{demos, relabel, single_pathway};

#[test]
fn cache_rows_equal_forward_taps() {
    let p = single_pathway(3);
    let d = demos("reach-red", 3, 1);
    for token in [TapToken::State, TapToken::LastObs] {
        let cache = extract_cache(&p, &d, ExtractOptions { stride: 1, token }).unwrap();
        assert_eq!(cache.n_rows(), 3 * 40);
        let opts = ForwardOptions {
            tap: true,
            tap_token: token,
            ..Default::default()
        };
        for (r, key) in cache.keys().iter().enumerate().step_by(7) {
            let trace = forward(&p, &d.trajectories[key.traj].steps[key.t].seq, &opts).unwrap();
            for j in 0..4 {
                assert_eq!(cache.row(j, r), trace.taps[j].as_slice());
            }
            assert_eq!(
                cache.action(r),
                d.trajectories[key.traj].steps[key.t].action.as_slice()
            );
        }
    }
}

#[test]
fn keyframe_stride_keeps_multiples_and_gripper_changes() {
    let p = single_pathway(0);
    let d = demos("pick-place-green", 3, 2);
    let cache = extract_cache(
        &p,
        &d,
        ExtractOptions {
            stride: 40,
            ..Default::default()
        },
    )
    .unwrap();
    for (i, traj) in d.trajectories.iter().enumerate() {
        let expect: Vec<usize> = (0..40)
            .filter(|&t| t == 0 || traj.steps[t].gripper_change)
            .collect();
        assert!(
            expect.len() >= 3,
            "pick-place closes and reopens the gripper"
        );
        let got: Vec<usize> = cache
            .keys()
            .iter()
            .filter(|k| k.traj == i)
            .map(|k| k.t)
            .collect();
        assert_eq!(got, expect);
    }
    assert!(extract_cache(
        &p,
        &d,
        ExtractOptions {
            stride: 0,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn keyframing_keeps_a_perfect_head_on_top() {
    // duplicated demos: a head that encodes the timestep retrieves exactly
    let d = demos("reach-red", 2, 4);
    let base = &d.trajectories[0];
    let mut dup = d.clone();
    dup.trajectories = vec![base.clone(), base.clone()];
    let p = single_pathway(1);
    for stride in [1, 2] {
        let cache = extract_cache(
            &p,
            &dup,
            ExtractOptions {
                stride,
                ..Default::default()
            },
        )
        .unwrap();
        let table = score_heads(&cache, 1, Metric::Cosine).unwrap();
        let best = table.ranking()[0];
        assert_eq!(table.score(best), 0.0, "stride {stride}");
    }
}

#[test]
fn cma_zero_std_head_has_zero_drop() {
    let p = single_pathway(2);
    let d = demos("reach-red", 3, 5);
    let mut cache = extract_cache(
        &p,
        &d,
        ExtractOptions {
            stride: 4,
            ..Default::default()
        },
    )
    .unwrap();
    cache.scale_head(HeadId::new(0, 0), 0.0);
    let t = cma_score(&p, &d, &cache, CmaOptions::default()).unwrap();
    assert_eq!(t.score(HeadId::new(0, 0)), 0.0);
}

#[test]
fn cma_finds_the_single_pathway() {
    let d = demos("reach-red", 3, 6);
    let mut hits = 0;
    for seed in 0..20 {
        let p = single_pathway(seed);
        let d = relabel(&p, &d);
        let cache = extract_cache(
            &p,
            &d,
            ExtractOptions {
                stride: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let t = cma_score(&p, &d, &cache, CmaOptions { seed, repeats: 1 }).unwrap();
        let s0 = t.score(HeadId::new(0, 0));
        if (1..4).all(|h| t.score(HeadId::new(0, h)) < s0) {
            hits += 1;
        }
        // heads behind a zero projection cannot change the output
        for h in 1..4 {
            assert_eq!(t.score(HeadId::new(0, h)), 0.0);
        }
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn cma_averaging_reduces_variance() {
    let p = single_pathway(9);
    let d = demos("reach-red", 3, 7);
    let cache = extract_cache(
        &p,
        &d,
        ExtractOptions {
            stride: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let var = |repeats| {
        let xs: Vec<f64> = (0..12)
            .map(|s| {
                cma_score(
                    &p,
                    &d,
                    &cache,
                    CmaOptions {
                        seed: s * 1000,
                        repeats,
                    },
                )
                .unwrap()
                .score(HeadId::new(0, 0))
            })
            .collect();
        headsteer::numkit::mean_std_cv(&xs).unwrap().std.powi(2)
    };
    assert!(var(5) < var(1));
}

#[test]
fn reinforce_finds_the_single_pathway() {
    let d = demos("reach-red", 3, 8);
    let mut hits = 0;
    for seed in 0..20 {
        let p = single_pathway(seed);
        let d = relabel(&p, &d);
        let cache = extract_cache(
            &p,
            &d,
            ExtractOptions {
                stride: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let opts = ReinforceOptions {
            iters: 60,
            seed,
            ..Default::default()
        };
        let sel = reinforce_select(&p, &d, &cache, 1, opts).unwrap();
        hits += usize::from(sel.heads == vec![HeadId::new(0, 0)]);
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn reinforce_edge_cases() {
    let p = single_pathway(1);
    let d = demos("reach-red", 2, 9);
    let cache = extract_cache(
        &p,
        &d,
        ExtractOptions {
            stride: 8,
            ..Default::default()
        },
    )
    .unwrap();
    let all = reinforce_select(
        &p,
        &d,
        &cache,
        4,
        ReinforceOptions {
            iters: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(all.heads.len(), 4);
    let none = reinforce_select(
        &p,
        &d,
        &cache,
        2,
        ReinforceOptions {
            iters: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(none.heads, vec![HeadId::new(0, 0), HeadId::new(0, 1)]);
    let wild = ReinforceOptions {
        iters: 50,
        lr: 1e6,
        ..Default::default()
    };
    assert!(matches!(
        reinforce_select(&p, &d, &cache, 1, wild),
        Err(headsteer::Error::Divergence(_))
    ));
    let a = reinforce_select(
        &p,
        &d,
        &cache,
        2,
        ReinforceOptions {
            iters: 10,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let b = reinforce_select(
        &p,
        &d,
        &cache,
        2,
        ReinforceOptions {
            iters: 10,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn plackett_luce_gradient_matches_finite_differences() {
    let z = [0.3, -1.2, 0.8, 0.05, 2.0];
    let order = [4, 0, 2];
    let logp = |z: &[f64]| {
        let mut rem: Vec<usize> = (0..z.len()).collect();
        let mut lp = 0.0;
        for &s in &order {
            let lse = rem.iter().map(|&j| z[j].exp()).sum::<f64>().ln();
            lp += z[s] - lse;
            rem.retain(|&j| j != s);
        }
        lp
    };
    let g = subset_log_prob_grad(&z, &order);
    for j in 0..z.len() {
        let (mut hi, mut lo) = (z, z);
        hi[j] += 1e-6;
        lo[j] -= 1e-6;
        let fd = (logp(&hi) - logp(&lo)) / 2e-6;
        assert!((fd - g[j]).abs() < 1e-6);
    }
}

#[test]
fn planted_heads_recovered_by_knn() {
    let s: std::collections::BTreeSet<HeadId> =
        [HeadId::new(0, 2), HeadId::new(2, 1), HeadId::new(3, 3)].into();
    let mut found = 0;
    for seed in 0..20 {
        let cache =
            planted::planted_cache(&planted::PlantedSpec::standard(s.clone()), seed).unwrap();
        let sel = select_top_m(&score_heads(&cache, 10, Metric::Cosine).unwrap(), 3).unwrap();
        found += sel.head_set().intersection(&s).count();
    }
    assert!(found as f64 / 60.0 >= 0.9);
}

#[test]
fn multitask_modes() {
    let a: std::collections::BTreeSet<HeadId> = [HeadId::new(0, 0), HeadId::new(1, 1)].into();
    let b: std::collections::BTreeSet<HeadId> = [HeadId::new(2, 2), HeadId::new(3, 3)].into();
    let ca = planted::planted_cache(&planted::PlantedSpec::standard(a.clone()), 1).unwrap();
    let cb = planted::planted_cache(&planted::PlantedSpec::standard(b.clone()), 2).unwrap();
    let res = select_multitask(
        &[&ca, &cb],
        10,
        2,
        Metric::Cosine,
        MultitaskMode::NonOverlapping,
    )
    .unwrap();
    assert_eq!(res[0].head_set(), a);
    assert_eq!(res[1].head_set(), b);

    // same planted heads in both tasks: the shared heads go to one task only
    let cb2 = planted::planted_cache(&planted::PlantedSpec::standard(a.clone()), 3).unwrap();
    let res = select_multitask(
        &[&ca, &cb2],
        10,
        2,
        Metric::Cosine,
        MultitaskMode::NonOverlapping,
    )
    .unwrap();
    assert!(res[0].head_set().is_disjoint(&res[1].head_set()));
    assert_eq!(res[0].heads.len() + res[1].heads.len(), 4);
    assert!(select_multitask(
        &[&ca, &cb2],
        10,
        9,
        Metric::Cosine,
        MultitaskMode::NonOverlapping
    )
    .is_err());
    assert!(select_multitask(&[&ca], 10, 2, Metric::Cosine, MultitaskMode::Joint).is_err());

    // joint on identical caches picks what single-task selection picks
    let joint = select_multitask(
        &[&ca, &ca.clone()],
        10,
        2,
        Metric::Cosine,
        MultitaskMode::Joint,
    )
    .unwrap();
    let single = select_top_m(&score_heads(&ca, 10, Metric::Cosine).unwrap(), 2).unwrap();
    assert_eq!(joint[0].head_set(), single.head_set());
    assert_eq!(joint[0], joint[1]);

    // joint equals scoring the concatenated cache directly
    let merged = ActivationCache::concat(&[&ca, &cb]).unwrap();
    let joint = select_multitask(&[&ca, &cb], 10, 3, Metric::Cosine, MultitaskMode::Joint).unwrap();
    assert_eq!(
        joint[0],
        select_top_m(&score_heads(&merged, 10, Metric::Cosine).unwrap(), 3).unwrap()
    );
}
