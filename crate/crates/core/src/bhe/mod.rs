//! Bilevel heterogeneity exploration.
//!
//! Stage one alternates an M step (retrain one factorization model per
//! environment on its assigned samples) with an E step (reassign every sample
//! to the environment whose model gives it the smallest loss) until the label
//! assignment stabilizes. Stage two runs k-means within each discovered
//! environment over the model's embedding space (or raw one-hot features) to
//! split covariate sub-populations.

mod kmeans;

pub use kmeans::{kmeans, KmeansOutcome};

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{sgd_train, BackboneKind, FactorModel, TrainConfig};
use crate::scalar::Scalar;
use crate::seed;

/// Space used for the second-stage clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RSpace {
    /// Concatenated embeddings from the per-environment model.
    Embedding,
    /// Dense one-hot feature vectors.
    RawFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BheConfig {
    pub n_e: usize,
    pub n_r: usize,
    pub max_em_iters: usize,
    /// Stop when the fraction of samples changing environment drops below
    /// this.
    pub label_change_tol: f64,
    pub r_space: RSpace,
    pub backbone: BackboneKind,
    /// Embedding width of the per-environment models.
    pub emb_dim: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for BheConfig {
    fn default() -> Self {
        BheConfig {
            n_e: 2,
            n_r: 1,
            max_em_iters: 20,
            label_change_tol: 0.01,
            r_space: RSpace::Embedding,
            backbone: BackboneKind::Mf,
            emb_dim: 8,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl BheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_e == 0 || self.n_r == 0 {
            return Err(Error::argument("n_e and n_r must be >= 1"));
        }
        if self.max_em_iters == 0 {
            return Err(Error::argument("max_em_iters must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.label_change_tol) {
            return Err(Error::argument("label_change_tol must lie in [0, 1]"));
        }
        self.train.validate()
    }

    fn fresh_model<S: Scalar>(&self, dataset: &Dataset<S>, rng: &mut impl Rng) -> FactorModel<S> {
        FactorModel::init(self.backbone, dataset, self.emb_dim, self.train.init_scale, rng)
    }

    fn train_for_iter(&self, iter: usize, env: usize) -> TrainConfig {
        TrainConfig {
            seed: seed::derive_indexed(self.seed, "bhe.mstep", (iter as u64) << 16 | env as u64),
            ..self.train.clone()
        }
    }
}

/// Per-sample environment labels plus everything downstream consumers need:
/// loss distances to every environment, squared embedding distances to the
/// covariate centers of the sample's own environment, the trained
/// per-environment models, and the centers themselves.
#[derive(Debug, Clone)]
pub struct EnvAssignment<S: Scalar = f64> {
    pub n_e: usize,
    pub n_r: usize,
    pub e_labels: Vec<usize>,
    pub r_labels: Vec<usize>,
    /// `n x n_e` loss of each environment's model on each sample.
    pub g_e: Matrix<S>,
    /// `n x n_r` squared distance of each sample to the centers of its own
    /// environment.
    pub g_er: Matrix<S>,
    pub models: Vec<FactorModel<S>>,
    /// `[e][r]` cluster centers.
    pub r_centers: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> EnvAssignment<S> {
    pub fn len(&self) -> usize {
        self.e_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_labels.is_empty()
    }

    /// Sample indices of each environment.
    pub fn env_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_e];
        for (i, &e) in self.e_labels.iter().enumerate() {
            out[e].push(i);
        }
        out
    }

    /// Sample indices of each (e, r) cell, `[e][r]`.
    pub fn cell_indices(&self) -> Vec<Vec<Vec<usize>>> {
        let mut out = vec![vec![Vec::new(); self.n_r]; self.n_e];
        for (i, (&e, &r)) in self.e_labels.iter().zip(&self.r_labels).enumerate() {
            out[e][r].push(i);
        }
        out
    }

    /// A single-environment assignment covering the whole dataset; distances
    /// are zero and the model list holds the one given model.
    pub fn trivial(dataset: &Dataset<S>, model: FactorModel<S>) -> Self {
        let n = dataset.len();
        EnvAssignment {
            n_e: 1,
            n_r: 1,
            e_labels: vec![0; n],
            r_labels: vec![0; n],
            g_e: Matrix::zeros(n, 1),
            g_er: Matrix::zeros(n, 1),
            models: vec![model],
            r_centers: vec![vec![vec![]]],
        }
    }
}

/// Report of one M step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    /// Mean training loss per environment (`NaN`-free; empty environments
    /// report 0 and are listed in `reinitialized`).
    pub env_losses: Vec<f64>,
    /// Environments that had no samples and were re-initialized from seed.
    pub reinitialized: Vec<usize>,
}

/// Train each environment's model on its assigned samples only. Warm-starts
/// from the incoming parameters; an environment with no samples gets a fresh
/// seeded model and stays available for re-capture in the next E step.
pub fn m_step<S: Scalar>(
    dataset: &Dataset<S>,
    e_labels: &[usize],
    models: &mut [FactorModel<S>],
    config: &BheConfig,
    iter: usize,
) -> Result<MStepReport> {
    let n_e = models.len();
    let mut per_env: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    for (i, &e) in e_labels.iter().enumerate() {
        if e >= n_e {
            return Err(Error::argument(format!("label {e} outside {n_e} environments")));
        }
        per_env[e].push(i);
    }

    let results: Vec<(f64, bool)> = models
        .par_iter_mut()
        .enumerate()
        .map(|(e, model)| -> Result<(f64, bool)> {
            if per_env[e].is_empty() {
                let mut rng = seed::rng_indexed(config.seed, "bhe.reinit", (iter as u64) << 16 | e as u64);
                *model = config.fresh_model(dataset, &mut rng);
                Ok((0.0, true))
            } else {
                let report = sgd_train(
                    model,
                    dataset,
                    Some(&per_env[e]),
                    None,
                    &config.train_for_iter(iter, e),
                )?;
                Ok((report.final_loss, false))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MStepReport {
        env_losses: results.iter().map(|r| r.0).collect(),
        reinitialized: results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.1)
            .map(|(e, _)| e)
            .collect(),
    })
}

/// Compute the loss of every environment's model on every sample and assign
/// each sample to its argmin environment (ties to the lowest index).
pub fn e_step<S: Scalar>(
    dataset: &Dataset<S>,
    models: &[FactorModel<S>],
    config: &TrainConfig,
) -> Result<(Vec<usize>, Matrix<S>)> {
    let use_label = config.loss.uses_binary_label();
    let rows: Vec<Vec<S>> = dataset
        .interactions()
        .par_iter()
        .map(|it| -> Result<Vec<S>> {
            let y = it.target(use_label)?;
            models
                .iter()
                .map(|m| Ok(crate::models::loss(m.score(dataset, it.user, it.item)?, y, config.loss)))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = rows.iter().map(|row| argmin(row)).collect();
    Ok((labels, Matrix::from_rows(rows)))
}

fn argmin<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTraceEntry {
    pub iter: usize,
    /// Sum over samples of the loss under the assigned environment.
    pub total_assigned_loss: f64,
    /// Fraction of samples whose environment changed in this E step.
    pub label_change_fraction: f64,
    pub env_losses: Vec<f64>,
    pub reinitialized: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub entries: Vec<EmTraceEntry>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ExploreEOutcome<S: Scalar = f64> {
    pub e_labels: Vec<usize>,
    pub g_e: Matrix<S>,
    pub models: Vec<FactorModel<S>>,
    pub trace: EmTrace,
}

/// First-stage exploration: initialize labels uniformly at random, then
/// alternate M and E steps until fewer than `label_change_tol` of the samples
/// move or `max_em_iters` is reached.
pub fn explore_e<S: Scalar>(dataset: &Dataset<S>, config: &BheConfig) -> Result<ExploreEOutcome<S>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::argument("cannot explore an empty dataset"));
    }
    let n = dataset.len();
    let mut rng = seed::rng(config.seed, "bhe.init_labels");
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.n_e)).collect();
    let mut model_rng = seed::rng(config.seed, "bhe.model_init");
    let mut models: Vec<FactorModel<S>> = (0..config.n_e)
        .map(|_| config.fresh_model(dataset, &mut model_rng))
        .collect();

    let mut trace = EmTrace { entries: Vec::new(), converged: false };
    let mut g_e = Matrix::zeros(n, config.n_e);

    for iter in 0..config.max_em_iters {
        let report = m_step(dataset, &labels, &mut models, config, iter)?;
        let (new_labels, g) = e_step(dataset, &models, &config.train)?;

        // Re-assignment can only lower each sample's term, so the total under
        // the fresh distances never exceeds the total under the old labels.
        let total_old: f64 = labels.iter().enumerate().map(|(i, &e)| g.get(i, e).to_f64()).sum();
        let total_new: f64 = new_labels.iter().enumerate().map(|(i, &e)| g.get(i, e).to_f64()).sum();
        assert!(
            total_new <= total_old,
            "E step increased total assigned loss: {total_old} -> {total_new}"
        );

        let changed = labels.iter().zip(&new_labels).filter(|(a, b)| a != b).count();
        let change_fraction = changed as f64 / n as f64;
        labels = new_labels;
        g_e = g;
        trace.entries.push(EmTraceEntry {
            iter,
            total_assigned_loss: total_new,
            label_change_fraction: change_fraction,
            env_losses: report.env_losses,
            reinitialized: report.reinitialized,
        });
        if change_fraction < config.label_change_tol {
            trace.converged = true;
            break;
        }
    }

    Ok(ExploreEOutcome { e_labels: labels, g_e, models, trace })
}

/// Second-stage exploration: k-means with `n_r` clusters inside each
/// environment, over embeddings from that environment's model (or raw one-hot
/// features). Returns global r labels, per-sample distances to the `n_r`
/// centers of the sample's own environment, and the centers per environment.
pub fn explore_r<S: Scalar>(
    dataset: &Dataset<S>,
    e_labels: &[usize],
    models: &[FactorModel<S>],
    config: &BheConfig,
) -> Result<(Vec<usize>, Matrix<S>, Vec<Vec<Vec<S>>>)> {
    let n = dataset.len();
    let n_e = models.len();
    let mut per_env: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    for (i, &e) in e_labels.iter().enumerate() {
        per_env[e].push(i);
    }
    for (e, ix) in per_env.iter().enumerate() {
        if ix.len() < config.n_r {
            return Err(Error::DegenerateEnv {
                env: e,
                message: format!("{} samples cannot form {} clusters", ix.len(), config.n_r),
            });
        }
    }

    let outcomes: Vec<KmeansOutcome<S>> = per_env
        .par_iter()
        .enumerate()
        .map(|(e, ix)| -> Result<KmeansOutcome<S>> {
            let points: Vec<Vec<S>> = ix
                .iter()
                .map(|&i| {
                    let it = &dataset.interactions()[i];
                    match config.r_space {
                        RSpace::Embedding => models[e].embedding(dataset, it.user, it.item),
                        RSpace::RawFeature => Ok(dense_one_hot(dataset, it.user, it.item)?),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            kmeans(&points, config.n_r, seed::derive_indexed(config.seed, "bhe.kmeans", e as u64))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r_labels = vec![0usize; n];
    let mut g_er = Matrix::zeros(n, config.n_r);
    let mut r_centers = Vec::with_capacity(n_e);
    for (e, outcome) in outcomes.into_iter().enumerate() {
        for (local, &global) in per_env[e].iter().enumerate() {
            r_labels[global] = outcome.labels[local];
            for r in 0..config.n_r {
                g_er.set(global, r, outcome.distances.get(local, r));
            }
        }
        r_centers.push(outcome.centers);
    }
    Ok((r_labels, g_er, r_centers))
}

/// Dense one-hot expansion of a pair's categorical features.
pub fn dense_one_hot<S: Scalar>(dataset: &Dataset<S>, user: usize, item: usize) -> Result<Vec<S>> {
    let x = dataset.encode_pair(user, item)?;
    let mut v = vec![S::zero(); x.dim];
    for (&i, &val) in x.indices.iter().zip(&x.values) {
        v[i] = val;
    }
    Ok(v)
}

/// Full bilevel exploration: `explore_e` then `explore_r`.
pub fn run<S: Scalar>(dataset: &Dataset<S>, config: &BheConfig) -> Result<(EnvAssignment<S>, EmTrace)> {
    let first = explore_e(dataset, config)?;
    let (r_labels, g_er, r_centers) = explore_r(dataset, &first.e_labels, &first.models, config)?;
    let assignment = EnvAssignment {
        n_e: config.n_e,
        n_r: config.n_r,
        e_labels: first.e_labels,
        r_labels,
        g_e: first.g_e,
        g_er,
        models: first.models,
        r_centers,
    };
    Ok((assignment, first.trace))
}

/// On-disk form of an assignment: label arrays and distances inline, models
/// referenced by path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AssignmentFile<S: Scalar = f64> {
    pub n_e: usize,
    pub n_r: usize,
    pub backbone: BackboneKind,
    pub e_labels: Vec<usize>,
    pub r_labels: Vec<usize>,
    pub g_e: Matrix<S>,
    pub g_er: Matrix<S>,
    pub r_centers: Vec<Vec<Vec<S>>>,
    pub model_paths: Vec<String>,
}

impl<S: Scalar> EnvAssignment<S> {
    /// Write `assignment.json` plus one model file per environment under
    /// `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("models"))?;
        let mut model_paths = Vec::with_capacity(self.models.len());
        for (e, model) in self.models.iter().enumerate() {
            let rel = format!("models/env{e}.json");
            model.save(dir.join(&rel))?;
            model_paths.push(rel);
        }
        let file = AssignmentFile {
            n_e: self.n_e,
            n_r: self.n_r,
            backbone: self.models[0].kind(),
            e_labels: self.e_labels.clone(),
            r_labels: self.r_labels.clone(),
            g_e: self.g_e.clone(),
            g_er: self.g_er.clone(),
            r_centers: self.r_centers.clone(),
            model_paths,
        };
        std::fs::write(dir.join("assignment.json"), serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("assignment.json"))?;
        let file: AssignmentFile<S> = serde_json::from_str(&text)?;
        let models = file
            .model_paths
            .iter()
            .map(|rel| FactorModel::load(dir.join(rel)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnvAssignment {
            n_e: file.n_e,
            n_r: file.n_r,
            e_labels: file.e_labels,
            r_labels: file.r_labels,
            g_e: file.g_e,
            g_er: file.g_er,
            models,
            r_centers: file.r_centers,
        })
    }
}
