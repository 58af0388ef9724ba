//! Reports over head selections: overlap between selections, stability
//! across data subsets, score dispersion, and success versus head count.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{HeadId, MaskVariant};
use crate::numkit::{mean_std_cv, RngStream};
use crate::policy::PolicyParams;
use crate::selector::{
    score_heads, select_top_m, ActivationCache, HeadScoreTable, Method, Metric, SelectionResult,
};
use crate::simenv::{eval_grid, EvalGrid, NeuralPolicy, Perturbation, TaskSpec};
use crate::trainer::{finetune, FinetuneSpec, Sample, TrainConfig};

/// Shared heads as a percentage of `m`.
pub fn overlap(a: &SelectionResult, b: &SelectionResult) -> Result<f64> {
    if a.m != b.m || a.heads.len() != b.heads.len() {
        return Err(Error::Contract(format!(
            "overlap needs selections of equal size (got m={} and m={})",
            a.m, b.m
        )));
    }
    if a.m == 0 {
        return Err(Error::Contract("overlap of empty selections".into()));
    }
    let shared = a.head_set().intersection(&b.head_set()).count();
    Ok(100.0 * shared as f64 / a.m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub method: Method,
    pub m: usize,
    pub seed: u64,
    /// Row-major, `labels.len()` squared.
    pub cells: Vec<f64>,
}

impl OverlapMatrix {
    pub fn build(labels: Vec<String>, selections: &[SelectionResult], seed: u64) -> Result<Self> {
        let n = selections.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Contract(
                "one label per selection, at least one selection".into(),
            ));
        }
        let mut cells = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = overlap(&selections[i], &selections[j])?;
                cells[i * n + j] = v;
                cells[j * n + i] = v;
            }
        }
        Ok(OverlapMatrix {
            labels,
            method: selections[0].table.method,
            m: selections[0].m,
            seed,
            cells,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.size() + j]
    }

    /// Symmetric, 100 on the diagonal, every cell within `[0, 100]`.
    pub fn check(&self) -> Result<()> {
        let n = self.size();
        for i in 0..n {
            if self.get(i, i) != 100.0 {
                return Err(Error::Contract(format!(
                    "diagonal cell {i} is {}",
                    self.get(i, i)
                )));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if v != self.get(j, i) || !(0.0..=100.0).contains(&v) {
                    return Err(Error::Contract(format!(
                        "cell ({i}, {j}) = {v} breaks symmetry or range"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean over `i != j`; 100 for a 1×1 matrix.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.size();
        if n < 2 {
            return 100.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# overlap method={} m={} seed={}\n",
            self.method.name(),
            self.m,
            self.seed
        );
        s.push_str("variant");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(l);
            for j in 0..self.size() {
                let _ = write!(s, ",{:.2}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Demo subsets compared in a consistency study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataVariant {
    Full,
    /// Two disjoint random halves of the trajectories.
    SeedSplitA,
    SeedSplitB,
    FirstHalf,
    LastHalf,
}

impl DataVariant {
    pub const ALL: [DataVariant; 5] = [
        DataVariant::Full,
        DataVariant::SeedSplitA,
        DataVariant::SeedSplitB,
        DataVariant::FirstHalf,
        DataVariant::LastHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataVariant::Full => "full",
            DataVariant::SeedSplitA => "split_a",
            DataVariant::SeedSplitB => "split_b",
            DataVariant::FirstHalf => "first_half",
            DataVariant::LastHalf => "last_half",
        }
    }

    /// Trajectory ids of this variant out of `ids`. Halves put the extra
    /// trajectory of an odd count in the first half.
    pub fn pick(self, ids: &[usize], seed: u64) -> Vec<usize> {
        let half = ids.len().div_ceil(2);
        match self {
            DataVariant::Full => ids.to_vec(),
            DataVariant::FirstHalf => ids[..half].to_vec(),
            DataVariant::LastHalf => ids[half..].to_vec(),
            DataVariant::SeedSplitA | DataVariant::SeedSplitB => {
                let mut shuffled = ids.to_vec();
                RngStream::new(seed, 0x5B11_7000).shuffle(&mut shuffled);
                let mut part = if self == DataVariant::SeedSplitA {
                    shuffled[..half].to_vec()
                } else {
                    shuffled[half..].to_vec()
                };
                part.sort_unstable();
                part
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOptions {
    pub k: usize,
    pub m: usize,
    pub metric: Metric,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStudy {
    pub top_m: OverlapMatrix,
    pub top_2m: OverlapMatrix,
    /// Per variant, the top-2m selection; its first m heads are the top-m one.
    pub selections: Vec<SelectionResult>,
}

/// Scores every data variant of `cache` with k-NN and compares the top-m
/// and top-2m selections across variants. `k` is capped per variant at the
/// largest value the subset supports.
pub fn consistency_study(
    cache: &ActivationCache,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyStudy> {
    let ids = cache.traj_ids();
    if ids.len() < 4 {
        return Err(Error::Contract(format!(
            "consistency study needs at least 4 trajectories, cache has {}",
            ids.len()
        )));
    }
    if opts.m == 0 || 2 * opts.m > cache.n_head_total() {
        return Err(Error::Contract(format!(
            "m={} needs 2m within 1..={} heads",
            opts.m,
            cache.n_head_total()
        )));
    }
    let tables: Vec<HeadScoreTable> = DataVariant::ALL
        .par_iter()
        .map(|v| {
            let sub = cache.subset_trajs(&v.pick(&ids, opts.seed))?;
            let k = opts.k.min(sub.max_k());
            let mut t = score_heads(&sub, k, opts.metric)?;
            t.seed = Some(opts.seed);
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = DataVariant::ALL
        .iter()
        .map(|v| v.name().to_string())
        .collect();
    let wide: Vec<SelectionResult> = tables
        .iter()
        .map(|t| select_top_m(t, 2 * opts.m))
        .collect::<Result<_>>()?;
    let narrow: Vec<SelectionResult> = tables
        .iter()
        .map(|t| select_top_m(t, opts.m))
        .collect::<Result<_>>()?;
    Ok(ConsistencyStudy {
        top_m: OverlapMatrix::build(labels.clone(), &narrow, opts.seed)?,
        top_2m: OverlapMatrix::build(labels, &wide, opts.seed)?,
        selections: wide,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub label: String,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean score is zero.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    /// Row indices by decreasing CV; rows without a CV come last.
    pub ranking: Vec<usize>,
}

impl CvReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# cv\nlabel,method,mean,std,cv\n");
        for r in &self.rows {
            let cv = r.cv.map_or("NA".to_string(), |c| format!("{c:.6}"));
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{cv}",
                r.label,
                r.method.name(),
                r.mean,
                r.std
            );
        }
        s
    }
}

pub fn cv_report(tables: &[(String, HeadScoreTable)]) -> Result<CvReport> {
    if tables.is_empty() {
        return Err(Error::Contract("cv report needs at least one table".into()));
    }
    let rows: Vec<CvRow> = tables
        .iter()
        .map(|(label, t)| {
            let m = mean_std_cv(&t.values())?;
            Ok(CvRow {
                label: label.clone(),
                method: t.method,
                mean: m.mean,
                std: m.std,
                cv: m.cv,
            })
        })
        .collect::<Result<_>>()?;
    let mut ranking: Vec<usize> = (0..rows.len()).collect();
    ranking.sort_by(|&a, &b| match (rows[a].cv, rows[b].cv) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    Ok(CvReport { rows, ranking })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub count: usize,
    pub trainable: usize,
    pub rate: f64,
}

/// What each point of a head-count sweep trains and where it is scored.
pub struct SweepSetup<'a> {
    pub base: &'a PolicyParams,
    pub ranking: &'a HeadScoreTable,
    pub data: &'a [Sample],
    pub spec: FinetuneSpec,
    pub train: TrainConfig,
    pub task: &'a TaskSpec,
    pub grid: &'a EvalGrid,
}

/// Finetunes on the top-`count` heads of the ranking for every count, with
/// the same budget, and reports the unperturbed grid success rate.
pub fn head_count_sweep(setup: &SweepSetup, counts: &[usize]) -> Result<Vec<SweepPoint>> {
    let total = setup.ranking.scores.len();
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > total) {
        return Err(Error::Contract(format!(
            "head count {c} outside 1..={total}"
        )));
    }
    if setup.spec.variant == MaskVariant::FullHeadBaseline {
        return Err(Error::Contract(
            "a head-count sweep needs a selective mask variant".into(),
        ));
    }
    counts
        .iter()
        .map(|&count| {
            let heads: BTreeSet<HeadId> = select_top_m(setup.ranking, count)?.head_set();
            let (adapted, _) = finetune(
                setup.base,
                &heads,
                &setup.spec,
                setup.data,
                &setup.train,
                None,
            )?;
            let eff = adapted.effective();
            let report = eval_grid(
                &NeuralPolicy { params: &eff },
                setup.task,
                setup.grid,
                Perturbation::None,
            )?;
            Ok(SweepPoint {
                count,
                trainable: adapted.trainable_param_count(),
                rate: report.rate,
            })
        })
        .collect()
}

pub fn sweep_to_csv(points: &[SweepPoint], method: Method, seed: u64) -> String {
    let mut s = format!(
        "# head_count_sweep method={} seed={seed}\ncount,trainable,rate\n",
        method.name()
    );
    for p in points {
        let _ = writeln!(s, "{},{},{:.4}", p.count, p.trainable, p.rate);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::planted::{planted_cache, PlantedSpec};

    fn sel(heads: &[(usize, usize)]) -> SelectionResult {
        let table = HeadScoreTable::new(Method::Knn, 4, 4, vec![1.0; 16]).unwrap();
        SelectionResult {
            heads: heads.iter().map(|&(l, h)| HeadId::new(l, h)).collect(),
            m: heads.len(),
            table,
        }
    }

    #[test]
    fn overlap_arithmetic() {
        let a = sel(&[(0, 0), (0, 1), (1, 2), (3, 3)]);
        let b = sel(&[(0, 1), (3, 3), (2, 0), (2, 1)]);
        let c = sel(&[(1, 0), (1, 1), (2, 2), (2, 3)]);
        assert_eq!(overlap(&a, &a).unwrap(), 100.0);
        assert_eq!(overlap(&a, &b).unwrap(), 50.0);
        assert_eq!(overlap(&a, &c).unwrap(), 0.0);
        assert!(overlap(&a, &sel(&[(0, 0)])).is_err());

        // twenty heads, eleven shared
        let t = HeadScoreTable::new(Method::Knn, 5, 8, vec![1.0; 40]).unwrap();
        let make = |start: usize| SelectionResult {
            heads: (start..start + 20)
                .map(|j| HeadId::from_flat(j, 8))
                .collect(),
            m: 20,
            table: t.clone(),
        };
        assert!((overlap(&make(0), &make(9)).unwrap() - 55.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_properties() {
        let s = [
            sel(&[(0, 0), (0, 1)]),
            sel(&[(0, 1), (1, 1)]),
            sel(&[(2, 2), (0, 0)]),
        ];
        let m = OverlapMatrix::build(vec!["a".into(), "b".into(), "c".into()], &s, 0).unwrap();
        m.check().unwrap();
        assert_eq!(m.get(0, 1), 50.0);
        assert_eq!(m.get(1, 2), 0.0);
        assert!((m.mean_off_diagonal() - 100.0 / 3.0).abs() < 1e-12);
        let csv = m.to_csv();
        assert!(csv.starts_with("# overlap method=knn m=2 seed=0\nvariant,a,b,c\n"));

        let same = OverlapMatrix::build(
            vec!["x".into(), "y".into()],
            &[s[0].clone(), s[0].clone()],
            0,
        )
        .unwrap();
        assert!(same.cells.iter().all(|&c| c == 100.0));
    }

    #[test]
    fn variants_partition_trajectories() {
        let ids: Vec<usize> = (0..9).collect();
        let a = DataVariant::SeedSplitA.pick(&ids, 3);
        let b = DataVariant::SeedSplitB.pick(&ids, 3);
        let mut both: Vec<usize> = a.iter().chain(&b).copied().collect();
        both.sort_unstable();
        assert_eq!(both, ids);
        assert_eq!(DataVariant::FirstHalf.pick(&ids, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(DataVariant::LastHalf.pick(&ids, 0), vec![5, 6, 7, 8]);
    }

    #[test]
    fn study_on_planted_cache_is_well_formed() {
        let planted = (0..4).map(|j| HeadId::from_flat(j * 3, 4)).collect();
        let cache = planted_cache(&PlantedSpec::standard(planted), 5).unwrap();
        let opts = ConsistencyOptions {
            k: 10,
            m: 2,
            metric: Metric::Cosine,
            seed: 5,
        };
        let st = consistency_study(&cache, &opts).unwrap();
        st.top_m.check().unwrap();
        st.top_2m.check().unwrap();
        let again = consistency_study(&cache, &opts).unwrap();
        assert_eq!(st.top_m.to_csv(), again.top_m.to_csv());
        // with the four planted heads dominant, every top-4 matches
        assert_eq!(st.top_2m.mean_off_diagonal(), 100.0);
    }

    #[test]
    fn cv_report_oracle() {
        let t1 = HeadScoreTable::new(Method::Knn, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t2 = HeadScoreTable::new(Method::Knn, 1, 4, vec![2.0; 4]).unwrap();
        let t3 = HeadScoreTable::new(Method::Cma, 1, 4, vec![-1.0, 1.0, -2.0, 2.0]).unwrap();
        let r = cv_report(&[("a".into(), t1), ("b".into(), t2), ("c".into(), t3)]).unwrap();
        // population std of 1..4 is sqrt(1.25)
        let expect = 1.25f64.sqrt() / 2.5;
        assert!((r.rows[0].cv.unwrap() - expect).abs() < 1e-12);
        assert_eq!(r.rows[1].cv, Some(0.0));
        assert_eq!(r.rows[2].cv, None);
        assert_eq!(r.ranking, vec![0, 1, 2]);
        assert!(r.to_csv().contains(",NA\n"));
        assert!(cv_report(&[]).is_err());
    }

    #[test]
    fn top_m_nested_in_top_m_plus_one() {
        let mut rng = RngStream::new(8, 0);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..16).map(|_| (rng.below(5)) as f64).collect();
            let t = HeadScoreTable::new(Method::Knn, 4, 4, scores).unwrap();
            for m in 0..16 {
                let small = select_top_m(&t, m).unwrap().head_set();
                let big = select_top_m(&t, m + 1).unwrap().head_set();
                assert!(small.is_subset(&big));
            }
        }
    }
}
