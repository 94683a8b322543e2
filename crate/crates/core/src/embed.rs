//! Task embeddings from Fisher diagonals and transfer-source ranking.
//!
//! An embedding is the per-group mean of a Fisher diagonal. Tasks are compared
//! with a *distance* (lower is more similar): the cosine distance between
//! `F_a / (F_a + F_b)` and `F_b / (F_a + F_b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{FisherDiagonal, FisherKind, Scaling};

/// Stabilizer in the `F_a + F_b` denominator.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub kind: FisherKind,
    pub scaling: Scaling,
    pub n_data: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub values: Vec<f64>,
    pub group_names: Vec<String>,
    pub source: EmbeddingSource,
}

impl TaskEmbedding {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("embedding", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("embedding", e.to_string()))
    }
}

pub fn embed_task(fisher: &FisherDiagonal) -> Result<TaskEmbedding> {
    let groups = fisher.values.groups();
    if groups.is_empty() {
        return Err(Error::Input("Fisher has no parameter groups".into()));
    }
    let mut values = Vec::with_capacity(groups.len());
    for g in groups {
        if g.len == 0 {
            return Err(Error::Input(format!("parameter group `{}` is empty", g.name)));
        }
        let slice = &fisher.values()[g.offset..g.offset + g.len];
        values.push(slice.iter().sum::<f64>() / g.len as f64);
    }
    Ok(TaskEmbedding {
        values,
        group_names: groups.iter().map(|g| g.name.clone()).collect(),
        source: EmbeddingSource {
            kind: fisher.kind,
            scaling: fisher.scaling,
            n_data: fisher.n_data,
        },
    })
}

/// Cosine distance in `[0, 2]` between the normalized embeddings, with the
/// default stabilizer.
pub fn task_distance(a: &TaskEmbedding, b: &TaskEmbedding) -> Result<f64> {
    task_distance_eps(a, b, DEFAULT_EPSILON)
}

pub fn task_distance_eps(a: &TaskEmbedding, b: &TaskEmbedding, eps: f64) -> Result<f64> {
    if a.group_names != b.group_names {
        return Err(Error::Input("embeddings use different parameter groups".into()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (fa, fb) in a.values.iter().zip(&b.values) {
        let denom = fa + fb + eps;
        if denom == 0.0 {
            continue;
        }
        let (u, v) = (fa / denom, fb / denom);
        dot += u * v;
        nu += u * u;
        nv += v * v;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Input("an embedding carries no information in any group".into()));
    }
    Ok((1.0 - dot / (nu.sqrt() * nv.sqrt())).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub source: String,
    /// Distance for embedding rankings; negated size for the size baseline.
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub target: String,
    pub entries: Vec<RankEntry>,
    pub reciprocal_rank: f64,
}

impl Ranking {
    fn build(target: &str, mut scored: Vec<(String, f64)>, gold: &str) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::Input("no sources to rank".into()));
        }
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let entries: Vec<RankEntry> = scored
            .into_iter()
            .enumerate()
            .map(|(i, (source, score))| RankEntry { source, score, rank: i + 1 })
            .collect();
        let rank = entries
            .iter()
            .find(|e| e.source == gold)
            .map(|e| e.rank)
            .ok_or_else(|| Error::Input(format!("gold source `{gold}` is not among the sources")))?;
        Ok(Self {
            target: target.to_string(),
            entries,
            reciprocal_rank: 1.0 / rank as f64,
        })
    }

    /// CSV rows `target,source,distance,rank` (no header).
    pub fn csv_rows(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| format!("{},{},{:e},{}", self.target, e.source, e.score, e.rank))
            .collect()
    }
}

/// Sorts sources by ascending distance to the target (ties by name) and
/// reports the gold source's reciprocal rank.
pub fn rank_sources(
    target_name: &str,
    target: &TaskEmbedding,
    sources: &[(String, TaskEmbedding)],
    gold: &str,
) -> Result<Ranking> {
    let scored = sources
        .iter()
        .map(|(name, e)| task_distance(target, e).map(|d| (name.clone(), d)))
        .collect::<Result<Vec<_>>>()?;
    Ranking::build(target_name, scored, gold)
}

/// Baseline: larger source datasets rank first.
pub fn rank_by_size(target_name: &str, sizes: &[(String, usize)], gold: &str) -> Result<Ranking> {
    let scored = sizes.iter().map(|(n, s)| (n.clone(), -(*s as f64))).collect();
    Ranking::build(target_name, scored, gold)
}

pub fn mean_reciprocal_rank(rankings: &[Ranking]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Input("MRR over zero queries".into()));
    }
    Ok(rankings.iter().map(|r| r.reciprocal_rank).sum::<f64>() / rankings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::FisherMeta;
    use crate::params::ParamVector;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> TaskEmbedding {
        TaskEmbedding {
            values: v.to_vec(),
            group_names: (0..v.len()).map(|i| format!("g{i}")).collect(),
            source: EmbeddingSource { kind: FisherKind::Empirical, scaling: Scaling::SumOverN, n_data: 1 },
        }
    }

    fn two_group_fisher(v: Vec<f64>, split: usize) -> FisherDiagonal {
        let n = v.len();
        let pv = ParamVector::flatten(&[("a".into(), v[..split].to_vec()), ("b".into(), v[split..n].to_vec())]);
        FisherDiagonal::new(pv, FisherKind::Empirical, Scaling::SumOverN, 3, FisherMeta::default()).unwrap()
    }

    #[test]
    fn per_group_means() {
        let e = embed_task(&two_group_fisher(vec![1.0, 3.0, 5.0], 2)).unwrap();
        assert_eq!(e.values, vec![2.0, 5.0]);
        assert_eq!(e.group_names, vec!["a", "b"]);
        let c = embed_task(&two_group_fisher(vec![0.7; 5], 3)).unwrap();
        assert!(c.values.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let single = FisherDiagonal::new(
            ParamVector::ungrouped(vec![1.0, 2.0, 6.0]),
            FisherKind::Squisher,
            Scaling::SumOverN,
            1,
            FisherMeta::default(),
        )
        .unwrap();
        assert_eq!(embed_task(&single).unwrap().values, vec![3.0]);
        assert!(embed_task(&two_group_fisher(vec![1.0, 2.0], 2)).is_err());
    }

    #[test]
    fn identical_tasks_have_zero_distance() {
        let a = emb(&[0.3, 1.2, 0.01]);
        assert!(task_distance(&a, &a).unwrap() <= 1e-15);
    }

    #[test]
    fn disjoint_support_approaches_one() {
        let mut last = 0.0;
        for tiny in [1e-2, 1e-4, 1e-6, 1e-8] {
            let d = task_distance_eps(&emb(&[1.0, tiny]), &emb(&[tiny, 1.0]), 0.0).unwrap();
            // u = (1/(1+t), t/(1+t)), v = reversed: d = 1 - 2t/(1+t^2)
            let want = 1.0 - 2.0 * tiny / (1.0 + tiny * tiny);
            assert!((d - want).abs() < 1e-12);
            assert!(d > last);
            last = d;
        }
        assert!(last > 1.0 - 1e-7);
    }

    #[test]
    fn group_mismatch_and_ranks() {
        let mut b = emb(&[1.0, 2.0]);
        b.group_names[1] = "other".into();
        assert!(task_distance(&emb(&[1.0, 2.0]), &b).is_err());

        let target = emb(&[1.0, 1.0]);
        let sources: Vec<(String, TaskEmbedding)> = vec![
            ("a".into(), emb(&[1.0, 1.1])),
            ("b".into(), emb(&[1.0, 4.0])),
            ("c".into(), emb(&[1.0, 9.0])),
            ("d".into(), emb(&[1.0, 20.0])),
        ];
        assert_eq!(rank_sources("t", &target, &sources, "a").unwrap().reciprocal_rank, 1.0);
        assert_eq!(rank_sources("t", &target, &sources, "d").unwrap().reciprocal_rank, 0.25);
        assert!(rank_sources("t", &target, &[], "a").is_err());
        let sized = rank_by_size("t", &[("a".into(), 10), ("b".into(), 50)], "a").unwrap();
        assert_eq!(sized.entries[0].source, "b");
        assert_eq!(sized.reciprocal_rank, 0.5);
        assert_eq!(sized.csv_rows().len(), 2);
    }

    proptest! {
        #[test]
        fn distance_symmetric_bounded_and_scale_free(
            a in proptest::collection::vec(1e-6f64..10.0, 1..8),
            seed in proptest::collection::vec(1e-6f64..10.0, 8),
            c in prop_oneof![Just(1e-3), Just(1e3)],
        ) {
            let b: Vec<f64> = seed[..a.len()].to_vec();
            let (ea, eb) = (emb(&a), emb(&b));
            let d = task_distance(&ea, &eb).unwrap();
            prop_assert_eq!(d, task_distance(&eb, &ea).unwrap());
            prop_assert!((0.0..=2.0).contains(&d));
            let sa = emb(&a.iter().map(|v| v * c).collect::<Vec<_>>());
            let sb = emb(&b.iter().map(|v| v * c).collect::<Vec<_>>());
            let ds = task_distance_eps(&sa, &sb, 0.0).unwrap();
            prop_assert!((task_distance_eps(&ea, &eb, 0.0).unwrap() - ds).abs() <= 1e-12);
        }
    }
}
