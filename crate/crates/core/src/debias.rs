//! Propensity estimation and inverse-propensity-scored training.
//!
//! The chance that an interaction is observed depends on its feedback value
//! (users interact with what they like), so naive training on observed data
//! is biased. Propensities `P(O=1 | Y=y)` are estimated Bayes-style from the
//! observed rating distribution, a small uniformly-logged sample, and the
//! overall observation rate — either globally or stratified per explored
//! (e, r) sub-population, where only the conditional rating distribution is
//! stratified and the marginals stay global.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bhe::EnvAssignment;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{sgd_train, FactorModel, TrainConfig, TrainReport};
use crate::scalar::Scalar;

pub const DEFAULT_FLOOR: f64 = 0.05;
/// Laplace smoothing constant for all frequency estimates.
const SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    Global,
    PerEnv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebiasMethod {
    Ips,
    Snips,
}

/// Estimated `P(O=1 | Y=y)` per rating level, globally or per (e, r) cell.
/// Every stored value lies in `[floor, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable<S: Scalar = f64> {
    pub mode: PropensityMode,
    pub floor: f64,
    /// Ordered distinct rating levels.
    pub y_levels: Vec<f64>,
    /// `values[e][r][level]`; global mode has a single `[0][0]` stratum.
    values: Vec<Vec<Vec<S>>>,
    /// (e, r) cells that had no observed samples and fell back to the global
    /// estimate.
    pub fallback_cells: Vec<(usize, usize)>,
}

impl<S: Scalar> PropensityTable<S> {
    fn level_of(&self, y: f64) -> Result<usize> {
        nearest_level(&self.y_levels, y)
    }

    /// Propensity for a sample, looked up by its (e, r) cell in per-env mode
    /// or by rating level alone in global mode.
    pub fn lookup(&self, e: usize, r: usize, y: f64) -> Result<S> {
        let level = self.level_of(y)?;
        match self.mode {
            PropensityMode::Global => Ok(self.values[0][0][level]),
            PropensityMode::PerEnv => self
                .values
                .get(e)
                .and_then(|row| row.get(r))
                .map(|cell| cell[level])
                .ok_or_else(|| Error::lookup(format!("no propensity cell ({e}, {r})"))),
        }
    }

    pub fn n_cells(&self) -> (usize, usize) {
        (self.values.len(), self.values.first().map_or(0, Vec::len))
    }

    /// Serialize keyed by `"e:r:y"` (`"*:*:y"` in global mode).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: PropensityFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(file)
    }

    fn to_file(&self) -> PropensityFile {
        let mut entries = BTreeMap::new();
        for (e, row) in self.values.iter().enumerate() {
            for (r, cell) in row.iter().enumerate() {
                for (level, &p) in cell.iter().enumerate() {
                    let key = match self.mode {
                        PropensityMode::Global => format!("*:*:{}", self.y_levels[level]),
                        PropensityMode::PerEnv => format!("{e}:{r}:{}", self.y_levels[level]),
                    };
                    entries.insert(key, p.to_f64());
                }
            }
        }
        PropensityFile {
            mode: self.mode,
            floor: self.floor,
            y_levels: self.y_levels.clone(),
            fallback_cells: self.fallback_cells.clone(),
            entries,
        }
    }

    fn from_file(file: PropensityFile) -> Result<Self> {
        let (n_e, n_r) = match file.mode {
            PropensityMode::Global => (1, 1),
            PropensityMode::PerEnv => {
                let mut n_e = 0;
                let mut n_r = 0;
                for key in file.entries.keys() {
                    let mut parts = key.split(':');
                    let e: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::format(format!("bad propensity key {key}")))?;
                    let r: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::format(format!("bad propensity key {key}")))?;
                    n_e = n_e.max(e + 1);
                    n_r = n_r.max(r + 1);
                }
                (n_e, n_r)
            }
        };
        let mut values = vec![vec![vec![S::zero(); file.y_levels.len()]; n_r]; n_e];
        for (key, p) in &file.entries {
            let mut parts = key.split(':');
            let e_part = parts.next().unwrap_or("*");
            let r_part = parts.next().unwrap_or("*");
            let y: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(format!("bad propensity key {key}")))?;
            let (e, r) = if e_part == "*" {
                (0, 0)
            } else {
                (
                    e_part.parse().map_err(|_| Error::format(format!("bad key {key}")))?,
                    r_part.parse().map_err(|_| Error::format(format!("bad key {key}")))?,
                )
            };
            let level = nearest_level(&file.y_levels, y)?;
            values[e][r][level] = S::from_f64(*p);
        }
        Ok(PropensityTable {
            mode: file.mode,
            floor: file.floor,
            y_levels: file.y_levels,
            values,
            fallback_cells: file.fallback_cells,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PropensityFile {
    mode: PropensityMode,
    floor: f64,
    y_levels: Vec<f64>,
    fallback_cells: Vec<(usize, usize)>,
    entries: BTreeMap<String, f64>,
}

fn nearest_level(levels: &[f64], y: f64) -> Result<usize> {
    if levels.is_empty() {
        return Err(Error::lookup("empty rating level table"));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &l) in levels.iter().enumerate() {
        let d = (l - y).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Distinct rating levels across the observed and uniform samples, ascending.
fn collect_levels<S: Scalar>(datasets: &[&Dataset<S>]) -> Vec<f64> {
    let mut levels: Vec<f64> = datasets
        .iter()
        .flat_map(|ds| ds.ratings().map(|y| y.to_f64()))
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
}

/// Laplace-smoothed frequency of each level among the given ratings.
fn smoothed_frequencies(ratings: &[f64], levels: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; levels.len()];
    for &y in ratings {
        if let Ok(l) = nearest_level(levels, y) {
            counts[l] += 1;
        }
    }
    let denom = ratings.len() as f64 + SMOOTHING * levels.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 + SMOOTHING) / denom)
        .collect()
}

/// Global Naive-Bayes propensity estimate:
/// `P(O=1|Y=y) = P(Y=y|O=1) * P(O=1) / P(Y=y)` with the conditional taken
/// from observed frequencies, `P(O=1) = |observed| / total_pairs`, and
/// `P(Y=y)` from the uniform sample. Both frequency estimates carry Laplace
/// smoothing; the result is clipped into `[floor, 1]`.
pub fn estimate_propensity_naive<S: Scalar>(
    observed: &Dataset<S>,
    uniform: &Dataset<S>,
    total_pairs: usize,
    floor: f64,
) -> Result<PropensityTable<S>> {
    if uniform.is_empty() {
        return Err(Error::argument("uniform sample must be nonempty"));
    }
    if total_pairs < observed.len() {
        return Err(Error::argument(format!(
            "total_pairs {total_pairs} smaller than observed count {}",
            observed.len()
        )));
    }
    let levels = collect_levels(&[observed, uniform]);
    let p_obs = observed.len() as f64 / total_pairs as f64;
    let obs_ratings: Vec<f64> = observed.ratings().map(|y| y.to_f64()).collect();
    let uni_ratings: Vec<f64> = uniform.ratings().map(|y| y.to_f64()).collect();
    let p_y_given_o = smoothed_frequencies(&obs_ratings, &levels);
    let p_y = smoothed_frequencies(&uni_ratings, &levels);
    let cell: Vec<S> = p_y_given_o
        .iter()
        .zip(&p_y)
        .map(|(&cond, &marg)| S::from_f64((cond * p_obs / marg).clamp(floor, 1.0)))
        .collect();
    Ok(PropensityTable {
        mode: PropensityMode::Global,
        floor,
        y_levels: levels,
        values: vec![vec![cell]],
        fallback_cells: vec![],
    })
}

/// Per-(e, r) propensity estimate: only the conditional rating distribution
/// `P_{e,r}(Y=y|O=1)` is stratified by the assignment; the observation rate
/// and the rating marginal stay global. Cells with no observed samples fall
/// back to the global estimate and are recorded in `fallback_cells`.
pub fn estimate_propensity_env<S: Scalar>(
    observed: &Dataset<S>,
    uniform: &Dataset<S>,
    assignment: &EnvAssignment<S>,
    total_pairs: usize,
    floor: f64,
) -> Result<PropensityTable<S>> {
    if assignment.len() != observed.len() {
        return Err(Error::argument("assignment does not cover the observed dataset"));
    }
    let global = estimate_propensity_naive(observed, uniform, total_pairs, floor)?;
    let levels = global.y_levels.clone();
    let p_obs = observed.len() as f64 / total_pairs as f64;
    let uni_ratings: Vec<f64> = uniform.ratings().map(|y| y.to_f64()).collect();
    let p_y = smoothed_frequencies(&uni_ratings, &levels);

    let mut values = Vec::with_capacity(assignment.n_e);
    let mut fallback_cells = Vec::new();
    let cells = assignment.cell_indices();
    for (e, row) in cells.iter().enumerate() {
        let mut env_row = Vec::with_capacity(assignment.n_r);
        for (r, cell_indices) in row.iter().enumerate() {
            if cell_indices.is_empty() {
                fallback_cells.push((e, r));
                env_row.push(global.values[0][0].clone());
                continue;
            }
            let cell_ratings: Vec<f64> = cell_indices
                .iter()
                .map(|&i| observed.interactions()[i].rating.to_f64())
                .collect();
            let cond = smoothed_frequencies(&cell_ratings, &levels);
            env_row.push(
                cond.iter()
                    .zip(&p_y)
                    .map(|(&c, &marg)| S::from_f64((c * p_obs / marg).clamp(floor, 1.0)))
                    .collect(),
            );
        }
        values.push(env_row);
    }
    Ok(PropensityTable {
        mode: PropensityMode::PerEnv,
        floor,
        y_levels: levels,
        values,
        fallback_cells,
    })
}

/// Inverse-propensity-scored loss `(1/n) * sum l_i / p_i`. `n` is the size of
/// the population the estimate refers to, which may exceed the number of
/// observed terms. An empty loss list returns 0 (flagged by the caller).
pub fn ips_loss<S: Scalar>(losses: &[S], propensities: &[S], n: usize) -> Result<S> {
    if losses.len() != propensities.len() {
        return Err(Error::argument("losses and propensities differ in length"));
    }
    if let Some(p) = propensities.iter().find(|p| **p <= S::zero() || **p > S::one()) {
        return Err(Error::argument(format!("propensity {p} outside (0, 1]")));
    }
    if losses.is_empty() {
        return Ok(S::zero());
    }
    let total: S = losses.iter().zip(propensities).map(|(&l, &p)| l / p).sum();
    Ok(total / S::from_usize(n.max(1)))
}

/// Self-normalized inverse-propensity loss `sum(l_i / p_i) / sum(1 / p_i)`.
/// Exactly invariant to rescaling all propensities by a common factor.
pub fn snips_loss<S: Scalar>(losses: &[S], propensities: &[S]) -> Result<S> {
    if losses.len() != propensities.len() {
        return Err(Error::argument("losses and propensities differ in length"));
    }
    if let Some(p) = propensities.iter().find(|p| **p <= S::zero() || **p > S::one()) {
        return Err(Error::argument(format!("propensity {p} outside (0, 1]")));
    }
    if losses.is_empty() {
        return Ok(S::zero());
    }
    let num: S = losses.iter().zip(propensities).map(|(&l, &p)| l / p).sum();
    let den: S = propensities.iter().map(|&p| S::one() / p).sum();
    Ok(num / den)
}

/// Per-sample training weights for the chosen debiasing method: `1/p_i` for
/// IPS, or `1/p_i` rescaled by `n / sum(1/p_j)` for SNIPS so the
/// self-normalized objective is what SGD minimizes.
pub fn debias_weights<S: Scalar>(
    observed: &Dataset<S>,
    table: &PropensityTable<S>,
    assignment: Option<&EnvAssignment<S>>,
    method: DebiasMethod,
) -> Result<Vec<S>> {
    if table.mode == PropensityMode::PerEnv && assignment.is_none() {
        return Err(Error::argument("per-env propensity table requires an assignment"));
    }
    let mut inv: Vec<S> = Vec::with_capacity(observed.len());
    for (i, it) in observed.interactions().iter().enumerate() {
        let (e, r) = match (table.mode, assignment) {
            (PropensityMode::Global, _) => (0, 0),
            (PropensityMode::PerEnv, Some(a)) => (a.e_labels[i], a.r_labels[i]),
            (PropensityMode::PerEnv, None) => unreachable!(),
        };
        let p = table.lookup(e, r, it.rating.to_f64())?;
        inv.push(S::one() / p);
    }
    if method == DebiasMethod::Snips {
        let total: S = inv.iter().copied().sum();
        let scale = S::from_usize(observed.len()) / total;
        for w in &mut inv {
            *w *= scale;
        }
    }
    Ok(inv)
}

/// Train a recommender on the observed data re-weighted by inverse
/// propensities.
pub fn train_debiased<S: Scalar>(
    model: &mut FactorModel<S>,
    observed: &Dataset<S>,
    table: &PropensityTable<S>,
    assignment: Option<&EnvAssignment<S>>,
    method: DebiasMethod,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let weights = debias_weights(observed, table, assignment, method)?;
    sgd_train(model, observed, None, Some(&weights), config)
}
