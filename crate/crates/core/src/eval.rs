//! Ranking metrics, compactness, agreement scores, and report tables.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, Side};
use crate::error::{Error, Result};
use crate::exploit::{recommend_topk, Scorer};
use crate::models::{sgd_train, BackboneKind, FactorModel, TrainConfig};
use crate::scalar::Scalar;
use crate::seed;

/// Per-user positives and candidate items for ranking evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroundTruth {
    pub positives: BTreeSet<usize>,
    pub candidates: Vec<usize>,
}

/// Full-ranking protocol ground truth: for every user with at least one
/// positive test interaction, the candidate set is every item the user did
/// not interact with in training, plus the user's test positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RankingGroundTruth {
    pub users: BTreeMap<usize, UserGroundTruth>,
}

impl RankingGroundTruth {
    pub fn from_split<S: Scalar>(train: &Dataset<S>, test: &Dataset<S>) -> Result<Self> {
        let n_items = train.n_items();
        let mut train_items: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for it in train.interactions() {
            train_items.entry(it.user).or_default().insert(it.item);
        }
        let mut positives: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for it in test.interactions() {
            let label = it
                .label
                .ok_or_else(|| Error::argument("test dataset must be binarized first"))?;
            if label == S::one() {
                positives.entry(it.user).or_default().insert(it.item);
            }
        }
        let mut users = BTreeMap::new();
        for (user, pos) in positives {
            let seen = train_items.get(&user);
            let candidates: Vec<usize> = (0..n_items)
                .filter(|v| pos.contains(v) || !seen.is_some_and(|s| s.contains(v)))
                .collect();
            users.insert(user, UserGroundTruth { positives: pos, candidates });
        }
        Ok(RankingGroundTruth { users })
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }
}

/// Rank every user's full candidate list with the scorer.
pub fn rank_all<S: Scalar>(
    scorer: &(impl Scorer<S> + Sync),
    dataset: &Dataset<S>,
    gt: &RankingGroundTruth,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let entries: Vec<(usize, Vec<usize>)> = gt
        .users
        .par_iter()
        .map(|(&user, ugt)| -> Result<(usize, Vec<usize>)> {
            let ranked = recommend_topk(scorer, dataset, user, &ugt.candidates, ugt.candidates.len().max(1))?;
            Ok((user, ranked))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(entries.into_iter().collect())
}

/// One metric over one cutoff: per-user values plus their arithmetic mean.
/// Users with no positives are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub per_user: Vec<(usize, f64)>,
    pub mean: f64,
    pub user_count: usize,
}

impl MetricReport {
    fn from_values(metric: &str, k: usize, per_user: Vec<(usize, f64)>) -> Self {
        let mean = if per_user.is_empty() {
            0.0
        } else {
            per_user.iter().map(|(_, v)| v).sum::<f64>() / per_user.len() as f64
        };
        MetricReport {
            metric: metric.to_string(),
            k,
            user_count: per_user.len(),
            per_user,
            mean,
        }
    }
}

fn positive_ranks(ranking: &[usize], positives: &BTreeSet<usize>) -> Vec<usize> {
    ranking
        .iter()
        .enumerate()
        .filter(|(_, item)| positives.contains(item))
        .map(|(pos, _)| pos + 1)
        .collect()
}

/// NDCG@K with base-2 logarithm and 1-indexed positions: positives ranked at
/// position `j <= K` contribute `1 / log2(j + 1)`; the ideal ranking places
/// all positives first.
pub fn ndcg_at_k(
    rankings: &BTreeMap<usize, Vec<usize>>,
    gt: &RankingGroundTruth,
    k: usize,
) -> MetricReport {
    let per_user = gt
        .users
        .iter()
        .filter(|(_, ugt)| !ugt.positives.is_empty())
        .filter_map(|(user, ugt)| {
            let ranking = rankings.get(user)?;
            let dcg: f64 = positive_ranks(ranking, &ugt.positives)
                .into_iter()
                .filter(|&r| r <= k)
                .map(|r| 1.0 / ((r + 1) as f64).log2())
                .sum();
            let ideal: f64 = (1..=ugt.positives.len().min(k))
                .map(|r| 1.0 / ((r + 1) as f64).log2())
                .sum();
            Some((*user, dcg / ideal))
        })
        .collect();
    MetricReport::from_values("ndcg", k, per_user)
}

/// Recall@K: fraction of each user's positives ranked in the top K.
pub fn recall_at_k(
    rankings: &BTreeMap<usize, Vec<usize>>,
    gt: &RankingGroundTruth,
    k: usize,
) -> MetricReport {
    let per_user = gt
        .users
        .iter()
        .filter(|(_, ugt)| !ugt.positives.is_empty())
        .filter_map(|(user, ugt)| {
            let ranking = rankings.get(user)?;
            let hits = positive_ranks(ranking, &ugt.positives)
                .into_iter()
                .filter(|&r| r <= k)
                .count();
            Some((*user, hits as f64 / ugt.positives.len() as f64))
        })
        .collect();
    MetricReport::from_values("recall", k, per_user)
}

/// Mean over clusters of the average Euclidean distance from cluster members
/// to the cluster mean. Cluster ids run `0..=max(labels)`; an id with no
/// members is an argument error.
pub fn compactness<S: Scalar>(points: &[Vec<S>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::argument("points and labels differ in length"));
    }
    if points.is_empty() {
        return Err(Error::argument("compactness of an empty set is undefined"));
    }
    let n_clusters = labels.iter().max().unwrap() + 1;
    let dim = points[0].len();
    let mut sums = vec![vec![0.0f64; dim]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(p) {
            *s += v.to_f64();
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::argument(format!("cluster {empty} is empty")));
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let mut cluster_cp = vec![0.0f64; n_clusters];
    for (p, &l) in points.iter().zip(labels) {
        let d: f64 = p
            .iter()
            .zip(&means[l])
            .map(|(&x, &m)| {
                let diff = x.to_f64() - m;
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        cluster_cp[l] += d;
    }
    let cp = cluster_cp
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .sum::<f64>()
        / n_clusters as f64;
    Ok(cp)
}

/// Chance-corrected agreement between two partitions of the same samples.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = comb2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossEnvConfig {
    pub backbone: BackboneKind,
    pub emb_dim: usize,
    pub train: TrainConfig,
    pub k: usize,
    pub test_fraction: f64,
    pub binarize_threshold: f64,
    pub seed: u64,
}

impl Default for CrossEnvConfig {
    fn default() -> Self {
        CrossEnvConfig {
            backbone: BackboneKind::Mf,
            emb_dim: 8,
            train: TrainConfig::default(),
            k: 10,
            test_fraction: 0.2,
            binarize_threshold: 0.0,
            seed: 0,
        }
    }
}

/// Cross-environment evaluation matrix. Rows are the per-environment models
/// plus one final row for the model trained on all environments; columns are
/// the environments evaluated on. `None` marks an environment that was too
/// small to split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEnvReport {
    pub k: usize,
    pub env_sizes: Vec<usize>,
    pub skipped: Vec<usize>,
    /// `(n_e + 1) x n_e`.
    pub matrix: Vec<Vec<Option<f64>>>,
}

impl CrossEnvReport {
    pub fn to_csv(&self) -> String {
        let n_e = self.env_sizes.len();
        let mut out = String::from("train_env");
        for j in 0..n_e {
            out.push_str(&format!(",eval_env_{j}"));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let name = if i < n_e { format!("env_{i}") } else { "all".to_string() };
            out.push_str(&name);
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push_str(","),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let n_e = self.env_sizes.len();
        let mut out = format!("{:>10}", "train\\eval");
        for j in 0..n_e {
            out.push_str(&format!(" {:>10}", format!("env {j}")));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let name = if i < n_e { format!("env {i}") } else { "all".to_string() };
            out.push_str(&format!("{name:>10}"));
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(" {v:>10.4}")),
                    None => out.push_str(&format!(" {:>10}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Split each environment, train one model per environment plus one on all
/// environments, and evaluate every model on every environment's test part
/// with NDCG@K.
pub fn cross_env_matrix<S: Scalar>(
    dataset: &Dataset<S>,
    e_labels: &[usize],
    n_e: usize,
    config: &CrossEnvConfig,
) -> Result<CrossEnvReport> {
    if e_labels.len() != dataset.len() {
        return Err(Error::argument("labels do not match dataset"));
    }
    let mut per_env: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    for (i, &e) in e_labels.iter().enumerate() {
        per_env[e].push(i);
    }
    let threshold = S::from_f64(config.binarize_threshold);

    let mut skipped = Vec::new();
    let mut splits: Vec<Option<crate::data::Split<S>>> = Vec::with_capacity(n_e);
    for (e, ix) in per_env.iter().enumerate() {
        let enough = ix.len() >= 2 && {
            let k = (config.test_fraction * ix.len() as f64).round() as usize;
            k >= 1 && k < ix.len()
        };
        if !enough {
            skipped.push(e);
            splits.push(None);
            continue;
        }
        let env_ds = dataset.subset(ix);
        splits.push(Some(split(
            &env_ds,
            config.test_fraction,
            seed::derive_indexed(config.seed, "crossenv.split", e as u64),
        )?));
    }

    // one model per env (trained on that env's train part) + one on all
    let mut models: Vec<Option<FactorModel<S>>> = Vec::with_capacity(n_e + 1);
    for (e, sp) in splits.iter().enumerate() {
        match sp {
            None => models.push(None),
            Some(sp) => {
                let mut rng = seed::rng_indexed(config.seed, "crossenv.init", e as u64);
                let mut model =
                    FactorModel::init(config.backbone, dataset, config.emb_dim, config.train.init_scale, &mut rng);
                let cfg = TrainConfig {
                    seed: seed::derive_indexed(config.seed, "crossenv.train", e as u64),
                    ..config.train.clone()
                };
                sgd_train(&mut model, &sp.train, None, None, &cfg)?;
                models.push(Some(model));
            }
        }
    }
    {
        // all-env model: concatenated train parts, every weight 1
        let train_indices: Vec<usize> = per_env
            .iter()
            .enumerate()
            .filter(|(e, _)| !skipped.contains(e))
            .flat_map(|(e, ix)| {
                let sp = splits[e].as_ref().unwrap();
                sp.train_indices.iter().map(move |&local| ix[local]).collect::<Vec<_>>()
            })
            .collect();
        if train_indices.is_empty() {
            models.push(None);
        } else {
            let all_train = dataset.subset(&train_indices);
            let mut rng = seed::rng(config.seed, "crossenv.init.all");
            let mut model =
                FactorModel::init(config.backbone, dataset, config.emb_dim, config.train.init_scale, &mut rng);
            let cfg = TrainConfig {
                seed: seed::derive(config.seed, "crossenv.train.all"),
                ..config.train.clone()
            };
            sgd_train(&mut model, &all_train, None, None, &cfg)?;
            models.push(Some(model));
        }
    }

    let mut matrix = vec![vec![None; n_e]; n_e + 1];
    for (j, sp) in splits.iter().enumerate() {
        let Some(sp) = sp else { continue };
        let test = crate::data::binarize(&sp.test, threshold);
        let gt = RankingGroundTruth::from_split(&sp.train, &test)?;
        if gt.user_count() == 0 {
            continue;
        }
        for (i, model) in models.iter().enumerate() {
            let Some(model) = model else { continue };
            let rankings = rank_all(model, dataset, &gt)?;
            matrix[i][j] = Some(ndcg_at_k(&rankings, &gt, config.k).mean);
        }
    }

    Ok(CrossEnvReport {
        k: config.k,
        env_sizes: per_env.iter().map(Vec::len).collect(),
        skipped,
        matrix,
    })
}

/// Per-category metric breakdown over a feature field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopReport {
    pub field: String,
    pub entries: Vec<SubpopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopEntry {
    pub category: String,
    pub ndcg: MetricReport,
    pub recall: MetricReport,
}

/// Bucket the evaluation by the categories of `field`. A user-side field
/// buckets the evaluated users; an item-side field restricts each user's
/// positives to items of the category (candidates unchanged).
pub fn subpop_report<S: Scalar>(
    scorer: &(impl Scorer<S> + Sync),
    dataset: &Dataset<S>,
    gt: &RankingGroundTruth,
    field: &str,
    k: usize,
) -> Result<SubpopReport> {
    let field_idx = dataset
        .schema()
        .field_index(field)
        .ok_or_else(|| Error::argument(format!("unknown field `{field}`")))?;
    let spec = &dataset.schema().fields[field_idx];
    let rankings = rank_all(scorer, dataset, gt)?;

    let mut entries = Vec::new();
    for (cat_idx, cat) in spec.categories.iter().enumerate() {
        let bucket_gt = match spec.side {
            Side::User => RankingGroundTruth {
                users: gt
                    .users
                    .iter()
                    .filter(|(&u, _)| dataset.category_of(field_idx, u) == cat_idx)
                    .map(|(&u, g)| (u, g.clone()))
                    .collect(),
            },
            Side::Item => RankingGroundTruth {
                users: gt
                    .users
                    .iter()
                    .filter_map(|(&u, g)| {
                        let positives: BTreeSet<usize> = g
                            .positives
                            .iter()
                            .copied()
                            .filter(|&v| dataset.category_of(field_idx, v) == cat_idx)
                            .collect();
                        if positives.is_empty() {
                            None
                        } else {
                            Some((u, UserGroundTruth { positives, candidates: g.candidates.clone() }))
                        }
                    })
                    .collect(),
            },
        };
        entries.push(SubpopEntry {
            category: cat.clone(),
            ndcg: ndcg_at_k(&rankings, &bucket_gt, k),
            recall: recall_at_k(&rankings, &bucket_gt, k),
        });
    }
    Ok(SubpopReport { field: field.to_string(), entries })
}

/// Per-environment preference profile over a categorical field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub field: String,
    pub categories: Vec<String>,
    /// `[env][category]` positive rate.
    pub raw: Vec<Vec<f64>>,
    /// `[env][category]` min-max normalized across environments; a category
    /// with equal rates everywhere normalizes to 0.
    pub normalized: Vec<Vec<f64>>,
    /// (env, category) cells imputed with the environment's overall positive
    /// rate because the category never occurs there.
    pub imputed: Vec<(usize, usize)>,
}

/// Positive rate (mean binary label) per category of `field` within each
/// environment, min-max normalized per category across environments.
pub fn profile_environments<S: Scalar>(
    dataset: &Dataset<S>,
    e_labels: &[usize],
    n_e: usize,
    field: &str,
) -> Result<ProfileReport> {
    if e_labels.len() != dataset.len() {
        return Err(Error::argument("labels do not match dataset"));
    }
    let field_idx = dataset
        .schema()
        .field_index(field)
        .ok_or_else(|| Error::argument(format!("unknown field `{field}`")))?;
    let spec = &dataset.schema().fields[field_idx];
    let n_cats = spec.categories.len();

    let mut pos = vec![vec![0.0f64; n_cats]; n_e];
    let mut count = vec![vec![0usize; n_cats]; n_e];
    let mut env_pos = vec![0.0f64; n_e];
    let mut env_count = vec![0usize; n_e];
    for (it, &e) in dataset.interactions().iter().zip(e_labels) {
        let label = it
            .label
            .ok_or_else(|| Error::argument("profile requires a binarized dataset"))?
            .to_f64();
        let id = match spec.side {
            Side::User => it.user,
            Side::Item => it.item,
        };
        let c = dataset.category_of(field_idx, id);
        pos[e][c] += label;
        count[e][c] += 1;
        env_pos[e] += label;
        env_count[e] += 1;
    }

    let mut raw = vec![vec![0.0f64; n_cats]; n_e];
    let mut imputed = Vec::new();
    for e in 0..n_e {
        let overall = if env_count[e] > 0 { env_pos[e] / env_count[e] as f64 } else { 0.0 };
        for c in 0..n_cats {
            if count[e][c] > 0 {
                raw[e][c] = pos[e][c] / count[e][c] as f64;
            } else {
                raw[e][c] = overall;
                imputed.push((e, c));
            }
        }
    }

    let mut normalized = vec![vec![0.0f64; n_cats]; n_e];
    for c in 0..n_cats {
        let lo = (0..n_e).map(|e| raw[e][c]).fold(f64::INFINITY, f64::min);
        let hi = (0..n_e).map(|e| raw[e][c]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for e in 0..n_e {
                normalized[e][c] = (raw[e][c] - lo) / (hi - lo);
            }
        }
    }

    Ok(ProfileReport {
        field: field.to_string(),
        categories: spec.categories.clone(),
        raw,
        normalized,
        imputed,
    })
}
