//! Exploiting explored heterogeneity with multiple sub-models.
//!
//! Every sample receives a softmax weight per environment from its loss
//! distances, one sub-model per environment trains on the weighted data, and
//! a jointly trained embedding model plus linear classifier predicts, at test
//! time, how much each sub-model should contribute to the composed score.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{loss_grad, sgd_train, BackboneKind, FactorModel, ParamId, TrainConfig};
use crate::scalar::{softmax, Scalar};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploitConfig {
    pub backbone: BackboneKind,
    pub emb_dim: usize,
    pub train: TrainConfig,
    /// Weight of the cross-entropy term in the joint embedding/classifier
    /// objective.
    pub ce_weight: f64,
    /// Train each sub-model only on its own environment's samples instead of
    /// all samples with softmax weights.
    pub restrict_to_env: bool,
    pub seed: u64,
}

impl Default for ExploitConfig {
    fn default() -> Self {
        ExploitConfig {
            backbone: BackboneKind::Mf,
            emb_dim: 8,
            train: TrainConfig::default(),
            ce_weight: 1.0,
            restrict_to_env: false,
            seed: 0,
        }
    }
}

impl ExploitConfig {
    /// All sub-models (and the single-backbone reference) share one
    /// initialization and shuffle stream, so they differ only through their
    /// sample weights.
    pub fn sub_train_config(&self) -> TrainConfig {
        TrainConfig { seed: seed::derive(self.seed, "exploit.sub.train"), ..self.train.clone() }
    }

    pub fn init_model<S: Scalar>(&self, dataset: &Dataset<S>, label: &str) -> FactorModel<S> {
        let mut rng = seed::rng(self.seed, label);
        FactorModel::init(self.backbone, dataset, self.emb_dim, self.train.init_scale, &mut rng)
    }
}

/// Softmax over environments of the negated distances, with max-subtraction.
/// The entries sum to one and the argmax matches the argmin distance.
pub fn softmax_weights<S: Scalar>(distances: &[S]) -> Vec<S> {
    let negated: Vec<S> = distances.iter().map(|&d| -d).collect();
    softmax(&negated)
}

/// Per-sample weight matrix (`n x n_e`) from the loss distance matrix.
pub fn sample_weight_matrix<S: Scalar>(g_e: &Matrix<S>) -> Matrix<S> {
    Matrix::from_rows((0..g_e.rows()).map(|i| softmax_weights(g_e.row(i))).collect())
}

/// Train one sub-model per environment on the softmax-weighted training sets.
pub fn train_sub_models<S: Scalar>(
    dataset: &Dataset<S>,
    g_e: &Matrix<S>,
    e_labels: &[usize],
    config: &ExploitConfig,
) -> Result<Vec<FactorModel<S>>> {
    if g_e.rows() != dataset.len() {
        return Err(Error::argument("distance matrix does not match dataset"));
    }
    let n_e = g_e.cols();
    let weights = sample_weight_matrix(g_e);
    let train_cfg = config.sub_train_config();
    let template = config.init_model(dataset, "exploit.sub.init");

    (0..n_e)
        .into_par_iter()
        .map(|e| -> Result<FactorModel<S>> {
            let column: Vec<S> = (0..dataset.len()).map(|i| weights.get(i, e)).collect();
            let mut model = template.clone();
            let restricted: Vec<usize>;
            let indices = if config.restrict_to_env {
                restricted = e_labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == e)
                    .map(|(i, _)| i)
                    .collect();
                Some(restricted.as_slice())
            } else {
                None
            };
            sgd_train(&mut model, dataset, indices, Some(&column), &train_cfg)?;
            Ok(model)
        })
        .collect()
}

/// Train sub-models from explicit per-environment weight columns (expert
/// baselines). Uses the same seed stream as [`train_sub_models`].
pub fn train_weighted_sub_models<S: Scalar>(
    dataset: &Dataset<S>,
    weight_columns: &Matrix<S>,
    config: &ExploitConfig,
) -> Result<Vec<FactorModel<S>>> {
    if weight_columns.rows() != dataset.len() {
        return Err(Error::argument("weight matrix does not match dataset"));
    }
    let train_cfg = config.sub_train_config();
    let template = config.init_model(dataset, "exploit.sub.init");
    (0..weight_columns.cols())
        .into_par_iter()
        .map(|e| -> Result<FactorModel<S>> {
            let column: Vec<S> = (0..dataset.len()).map(|i| weight_columns.get(i, e)).collect();
            let mut model = template.clone();
            sgd_train(&mut model, dataset, None, Some(&column), &train_cfg)?;
            Ok(model)
        })
        .collect()
}

/// Uniform up/down weighting for expert-defined environments: weight `up` for
/// samples whose hard label equals the environment, `down` for the rest.
/// Returns the `n x n_e` weight column matrix.
pub fn baseline_weights<S: Scalar>(hard_labels: &[usize], n_e: usize, up: f64, down: f64) -> Matrix<S> {
    let up = S::from_f64(up);
    let down = S::from_f64(down);
    let mut m = Matrix::zeros(hard_labels.len(), n_e);
    for (i, &l) in hard_labels.iter().enumerate() {
        for e in 0..n_e {
            m.set(i, e, if l == e { up } else { down });
        }
    }
    m
}

/// Linear softmax classifier over concatenated embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LinearClassifier<S: Scalar = f64> {
    /// `n_e x dim`.
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LinearClassifier<S> {
    /// Zero-initialized classifier: all logits zero, probabilities uniform.
    pub fn zeros(n_e: usize, dim: usize) -> Self {
        LinearClassifier { weight: Matrix::zeros(n_e, dim), bias: vec![S::zero(); n_e] }
    }

    pub fn n_envs(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, a: &[S]) -> Result<Vec<S>> {
        if a.len() != self.input_dim() {
            return Err(Error::argument(format!(
                "embedding length {} does not match classifier input {}",
                a.len(),
                self.input_dim()
            )));
        }
        Ok((0..self.n_envs())
            .map(|e| crate::scalar::dot(self.weight.row(e), a) + self.bias[e])
            .collect())
    }

    pub fn probabilities(&self, a: &[S]) -> Result<Vec<S>> {
        Ok(softmax(&self.logits(a)?))
    }
}

/// Sub-models, embedding provider, and environment classifier composed into a
/// single recommender.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedRecommender<S: Scalar = f64> {
    pub sub_models: Vec<FactorModel<S>>,
    pub emb_model: FactorModel<S>,
    pub classifier: LinearClassifier<S>,
}

impl<S: Scalar> ComposedRecommender<S> {
    pub fn n_envs(&self) -> usize {
        self.sub_models.len()
    }

    /// Probability that the pair belongs to each environment; entries are
    /// strictly positive and sum to one.
    pub fn env_probabilities(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<Vec<S>> {
        let a = self.emb_model.embedding(dataset, user, item)?;
        self.classifier.probabilities(&a)
    }

    /// Probability-weighted sum of the sub-model scores.
    pub fn predict(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S> {
        let p = self.env_probabilities(dataset, user, item)?;
        let mut score = S::zero();
        for (e, sub) in self.sub_models.iter().enumerate() {
            score += p[e] * sub.score(dataset, user, item)?;
        }
        Ok(score)
    }

    /// Serialized layout: `subs/<e>.json`, `emb.json`, `classifier.json`,
    /// `meta.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>, schema_hash: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("subs"))?;
        for (e, sub) in self.sub_models.iter().enumerate() {
            sub.save(dir.join(format!("subs/{e}.json")))?;
        }
        self.emb_model.save(dir.join("emb.json"))?;
        std::fs::write(dir.join("classifier.json"), serde_json::to_string(&self.classifier)?)?;
        let meta = ComposedMeta {
            version: 1,
            n_e: self.n_envs(),
            backbone: self.sub_models[0].kind(),
            schema_hash,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ComposedMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.version != 1 {
            return Err(Error::format(format!("unsupported composed version {}", meta.version)));
        }
        let sub_models = (0..meta.n_e)
            .map(|e| FactorModel::load(dir.join(format!("subs/{e}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let emb_model = FactorModel::load(dir.join("emb.json"))?;
        let classifier: LinearClassifier<S> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("classifier.json"))?)?;
        Ok(ComposedRecommender { sub_models, emb_model, classifier })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComposedMeta {
    pub version: u32,
    pub n_e: usize,
    pub backbone: BackboneKind,
    pub schema_hash: u64,
}

/// Expert-baseline predictor: environments are defined by a raw feature, so
/// the test pair's own category picks the sub-model and no classifier or
/// probability mixing is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRoutedRecommender<S: Scalar = f64> {
    pub sub_models: Vec<FactorModel<S>>,
    pub field_idx: usize,
}

impl<S: Scalar> FeatureRoutedRecommender<S> {
    pub fn route(&self, dataset: &Dataset<S>, user: usize, item: usize) -> usize {
        let id = match dataset.schema().fields[self.field_idx].side {
            crate::data::Side::User => user,
            crate::data::Side::Item => item,
        };
        dataset.category_of(self.field_idx, id)
    }
}

/// Anything that can score a (user, item) pair.
pub trait Scorer<S: Scalar> {
    fn score_pair(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S>;
}

impl<S: Scalar> Scorer<S> for FeatureRoutedRecommender<S> {
    fn score_pair(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S> {
        let e = self.route(dataset, user, item);
        self.sub_models
            .get(e)
            .ok_or_else(|| Error::lookup(format!("no sub-model for environment {e}")))?
            .score(dataset, user, item)
    }
}

impl<S: Scalar> Scorer<S> for FactorModel<S> {
    fn score_pair(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S> {
        self.score(dataset, user, item)
    }
}

impl<S: Scalar> Scorer<S> for ComposedRecommender<S> {
    fn score_pair(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S> {
        self.predict(dataset, user, item)
    }
}

/// Score the candidates and return the top `k` item ids, highest score first,
/// ties broken by ascending item id.
pub fn recommend_topk<S: Scalar>(
    scorer: &impl Scorer<S>,
    dataset: &Dataset<S>,
    user: usize,
    candidates: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::argument("k must be >= 1"));
    }
    let mut scored: Vec<(usize, S)> = candidates
        .iter()
        .map(|&item| Ok((item, scorer.score_pair(dataset, user, item)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().take(k).map(|(item, _)| item).collect())
}

/// Report from the joint embedding/classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    /// Fraction of training samples whose predicted environment matches the
    /// assigned label after training.
    pub train_accuracy: f64,
    /// Mean rec + weighted cross-entropy objective after the last epoch.
    pub final_loss: f64,
}

/// Jointly train the embedding recommender and the environment classifier by
/// minimizing `rec_loss + ce_weight * cross_entropy`. Classifier gradients
/// flow into the embedding parameters.
pub fn train_env_classifier<S: Scalar>(
    dataset: &Dataset<S>,
    e_labels: &[usize],
    n_e: usize,
    config: &ExploitConfig,
) -> Result<(FactorModel<S>, LinearClassifier<S>, ClassifierReport)> {
    if e_labels.len() != dataset.len() {
        return Err(Error::argument("labels do not match dataset"));
    }
    if dataset.is_empty() {
        return Err(Error::argument("cannot train on an empty dataset"));
    }
    config.train.validate()?;
    let mut emb = config.init_model(dataset, "exploit.emb.init");
    let mut clf = LinearClassifier::zeros(n_e, emb.embedding_dim(dataset));

    let lr = S::from_f64(config.train.learning_rate);
    let l2 = S::from_f64(config.train.l2_reg);
    let ce_w = S::from_f64(config.ce_weight);
    let use_label = config.train.loss.uses_binary_label();
    let train_seed = seed::derive(config.seed, "exploit.emb.train");

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut emb_sink: Vec<(ParamId, S)> = Vec::new();

    for epoch in 0..config.train.epochs {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng_indexed(train_seed, "epoch", epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = S::zero();
        for batch in order.chunks(config.train.batch_size) {
            emb_sink.clear();
            let mut w_grad = Matrix::zeros(n_e, clf.input_dim());
            let mut b_grad = vec![S::zero(); n_e];
            for &i in batch {
                let it = &dataset.interactions()[i];
                let label_e = e_labels[i];

                // recommendation term
                let z = emb.score(dataset, it.user, it.item)?;
                let y = it.target(use_label)?;
                epoch_loss += crate::models::loss(z, y, config.train.loss);
                let g = loss_grad(z, y, config.train.loss);
                emb.accumulate_gradient(dataset, it, S::one(), g, l2, &mut emb_sink)?;

                // cross-entropy term
                let a = emb.embedding(dataset, it.user, it.item)?;
                let logits = clf.logits(&a)?;
                let p = softmax(&logits);
                epoch_loss += ce_w * cross_entropy(&p, label_e);
                let mut d_a = vec![S::zero(); a.len()];
                for e in 0..n_e {
                    let delta = ce_w * (p[e] - if e == label_e { S::one() } else { S::zero() });
                    b_grad[e] += delta;
                    for (j, &aj) in a.iter().enumerate() {
                        let cur = w_grad.get(e, j);
                        w_grad.set(e, j, cur + delta * aj);
                        d_a[j] += delta * clf.weight.get(e, j);
                    }
                }
                for (id, da) in emb.embedding_param_ids(dataset, it)?.into_iter().zip(d_a) {
                    emb_sink.push((id, da));
                }
            }
            let step = lr / S::from_usize(batch.len());
            for &(id, g) in &emb_sink {
                let cur = emb.get_param(id);
                emb.set_param(id, cur - step * g);
            }
            for e in 0..n_e {
                for j in 0..clf.input_dim() {
                    let cur = clf.weight.get(e, j);
                    clf.weight.set(e, j, cur - step * w_grad.get(e, j));
                }
                clf.bias[e] -= step * b_grad[e];
            }
        }
        let mean = epoch_loss.to_f64() / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, message: format!("joint loss became {mean}") });
        }
    }

    // final metrics over the training set
    let mut correct = 0usize;
    let mut total_loss = S::zero();
    for (i, it) in dataset.interactions().iter().enumerate() {
        let a = emb.embedding(dataset, it.user, it.item)?;
        let p = clf.probabilities(&a)?;
        if argmax(&p) == e_labels[i] {
            correct += 1;
        }
        let z = emb.score(dataset, it.user, it.item)?;
        total_loss += crate::models::loss(z, it.target(use_label)?, config.train.loss)
            + ce_w * cross_entropy(&p, e_labels[i]);
    }
    let report = ClassifierReport {
        train_accuracy: correct as f64 / dataset.len() as f64,
        final_loss: total_loss.to_f64() / dataset.len() as f64,
    };
    Ok((emb, clf, report))
}

fn cross_entropy<S: Scalar>(p: &[S], label: usize) -> S {
    -(p[label].max(S::from_f64(1e-300))).ln()
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_interactions, FeatureSchema, FieldSpec, FileFormat, Side};
    use crate::models::MfModel;
    use approx::assert_relative_eq;

    fn id_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FieldSpec { name: "user_id".into(), side: Side::User, categories: vec![], ids: true },
            FieldSpec { name: "item_id".into(), side: Side::Item, categories: vec![], ids: true },
        ])
    }

    fn dataset_from(rows: &[(usize, usize, f64)]) -> Dataset {
        let mut text = String::from("user_id,item_id,rating\n");
        for (u, v, y) in rows {
            text.push_str(&format!("u{u},i{v},{y}\n"));
        }
        parse_interactions(&text, FileFormat::Csv, &id_schema()).unwrap()
    }

    fn constant(ds: &Dataset, bias: f64) -> FactorModel<f64> {
        let mut m = MfModel::constant(ds.n_users(), ds.n_items());
        m.global_bias = bias;
        FactorModel::Mf(m)
    }

    #[test]
    fn softmax_weights_symmetric_case() {
        let w = softmax_weights(&[0.4f64, 0.4, 0.4]);
        for v in &w {
            assert_relative_eq!(*v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_weights_hand_values() {
        let w = softmax_weights(&[0.1f64, 0.3, 0.2]);
        assert!((w[0] - 0.3672).abs() < 1e-4, "{w:?}");
        assert!((w[1] - 0.3006).abs() < 1e-4, "{w:?}");
        assert!((w[2] - 0.3322).abs() < 1e-4, "{w:?}");
    }

    #[test]
    fn softmax_weights_single_env() {
        assert_eq!(softmax_weights(&[3.3f64]), vec![1.0]);
    }

    #[test]
    fn weight_rows_sum_to_one_and_follow_labels() {
        let g = Matrix::from_rows(vec![vec![0.5f64, 0.1], vec![0.0, 2.0], vec![0.3, 0.3]]);
        let w = sample_weight_matrix(&g);
        for i in 0..3 {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for &v in w.row(i) {
                assert!(v > 0.0 && v <= 1.0);
            }
            // argmax weight equals argmin distance
            let argmin = if g.get(i, 0) <= g.get(i, 1) { 0 } else { 1 };
            let argmax = if w.get(i, 0) >= w.get(i, 1) { 0 } else { 1 };
            assert_eq!(argmin, argmax);
        }
    }

    #[test]
    fn single_env_sub_model_equals_plain_training() {
        let ds = dataset_from(&[(0, 0, 0.2), (1, 1, 0.8), (0, 1, 0.4)]);
        let cfg = ExploitConfig {
            emb_dim: 2,
            train: TrainConfig { epochs: 8, ..Default::default() },
            ..Default::default()
        };
        let g = Matrix::zeros(3, 1);
        let subs = train_sub_models(&ds, &g, &[0, 0, 0], &cfg).unwrap();
        // reference: same init stream, all weights 1.0
        let mut plain = cfg.init_model(&ds, "exploit.sub.init");
        sgd_train(&mut plain, &ds, None, None, &cfg.sub_train_config()).unwrap();
        assert_eq!(subs[0], plain);
    }

    #[test]
    fn concentrated_weight_only_trains_its_env() {
        // sample 0 fully in env 0: env 1's model must ignore it
        let ds = dataset_from(&[(0, 0, 1.0), (1, 1, 0.5)]);
        let cfg = ExploitConfig {
            emb_dim: 1,
            train: TrainConfig { epochs: 80, learning_rate: 0.3, l2_reg: 0.0, ..Default::default() },
            ..Default::default()
        };
        let w = Matrix::from_rows(vec![vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let subs = train_weighted_sub_models(&ds, &w, &cfg).unwrap();
        let s1 = subs[1].score(&ds, 1, 1).unwrap();
        assert!((s1 - 0.5).abs() < 0.05, "{s1}");
        // env 0's model still predicts what the shared init gives on (1, 1):
        // its weight there was zero, so sample 1 contributed nothing
        let template = cfg.init_model::<f64>(&ds, "exploit.sub.init");
        let init_grad_free = template.score(&ds, 1, 1).unwrap();
        let s0 = subs[0].score(&ds, 1, 1).unwrap();
        // only indirect movement through shared global bias is allowed
        assert!((s0 - init_grad_free).abs() < 1.0, "{s0} vs {init_grad_free}");
    }

    #[test]
    fn constant_sub_models_reach_weighted_means() {
        let ds = dataset_from(&[(0, 0, 0.0), (1, 1, 1.0)]);
        let w = Matrix::from_rows(vec![vec![0.75f64, 0.25], vec![0.25, 0.75]]);
        let cfg = TrainConfig { epochs: 400, learning_rate: 0.2, l2_reg: 0.0, ..Default::default() };
        for e in 0..2 {
            let mut model = constant(&ds, 0.0);
            let col: Vec<f64> = (0..2).map(|i| w.get(i, e)).collect();
            sgd_train(&mut model, &ds, None, Some(&col), &cfg).unwrap();
            let expect = (w.get(0, e) * 0.0 + w.get(1, e) * 1.0) / (w.get(0, e) + w.get(1, e));
            let FactorModel::Mf(m) = &model else { unreachable!() };
            assert!((m.global_bias - expect).abs() < 1e-3, "env {e}: {} vs {expect}", m.global_bias);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let clf = LinearClassifier::<f64>::zeros(4, 3);
        let p = clf.probabilities(&[0.3, -0.2, 1.0]).unwrap();
        for v in p {
            assert_relative_eq!(v, 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn classifier_logit_softmax_hand_value() {
        // logits (2, 0) -> (0.8808, 0.1192)
        let mut clf = LinearClassifier::<f64>::zeros(2, 1);
        clf.weight.set(0, 0, 2.0);
        let p = clf.probabilities(&[1.0]).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn compose_predict_hand_values() {
        let ds = dataset_from(&[(0, 0, 1.0)]);
        let composed = ComposedRecommender {
            sub_models: vec![constant(&ds, 0.2), constant(&ds, 0.6)],
            emb_model: constant(&ds, 0.0),
            classifier: LinearClassifier::zeros(2, 0),
        };
        // zero classifier over an empty embedding: p = (0.5, 0.5)
        let p = composed.env_probabilities(&ds, 0, 0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_relative_eq!(composed.predict(&ds, 0, 0).unwrap(), 0.4, max_relative = 1e-12);
        // degenerate weight p = (1, 0)
        let mut skewed = composed.clone();
        skewed.classifier.bias = vec![500.0, -500.0];
        assert_relative_eq!(skewed.predict(&ds, 0, 0).unwrap(), 0.2, max_relative = 1e-9);
    }

    #[test]
    fn single_env_composition_equals_sub_model() {
        let ds = dataset_from(&[(0, 0, 1.0), (1, 0, 0.3)]);
        let composed = ComposedRecommender {
            sub_models: vec![constant(&ds, 0.37)],
            emb_model: constant(&ds, 0.0),
            classifier: LinearClassifier::zeros(1, 0),
        };
        let p = composed.env_probabilities(&ds, 1, 0).unwrap();
        assert_eq!(p, vec![1.0]);
        assert_eq!(composed.predict(&ds, 1, 0).unwrap(), 0.37);
    }

    #[test]
    fn composition_stays_within_sub_model_range() {
        let ds = dataset_from(&[(0, 0, 1.0)]);
        for bias in [-3.0, 0.0, 2.0] {
            let composed = ComposedRecommender {
                sub_models: vec![constant(&ds, -1.0), constant(&ds, 2.0), constant(&ds, bias)],
                emb_model: constant(&ds, 0.0),
                classifier: LinearClassifier::zeros(3, 0),
            };
            let z = composed.predict(&ds, 0, 0).unwrap();
            let lo = (-1.0f64).min(bias);
            let hi = 2.0f64.max(bias);
            assert!(z >= lo && z <= hi, "{z} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn topk_orders_and_breaks_ties_by_id() {
        let ds = dataset_from(&[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0)]);
        struct Fixed(Vec<f64>);
        impl Scorer<f64> for Fixed {
            fn score_pair(&self, _: &Dataset, _: usize, item: usize) -> Result<f64> {
                Ok(self.0[item])
            }
        }
        let s = Fixed(vec![0.9, 0.1, 0.9]);
        assert_eq!(recommend_topk(&s, &ds, 0, &[0, 1, 2], 1).unwrap(), vec![0]);
        assert_eq!(recommend_topk(&s, &ds, 0, &[0, 1, 2], 2).unwrap(), vec![0, 2]);
        // equal scores fall back to ascending item id
        let eq = Fixed(vec![0.5, 0.5, 0.5]);
        assert_eq!(recommend_topk(&eq, &ds, 0, &[2, 0, 1], 2).unwrap(), vec![0, 1]);
        // empty candidates
        assert!(recommend_topk(&eq, &ds, 0, &[], 3).unwrap().is_empty());
    }

    #[test]
    fn topk_matches_full_sort_and_prefix_property() {
        let ds = dataset_from(&[(0, 0, 1.0)]);
        struct Hash;
        impl Scorer<f64> for Hash {
            fn score_pair(&self, _: &Dataset, _: usize, item: usize) -> Result<f64> {
                Ok(((item * 2654435761) % 1000) as f64 / 1000.0)
            }
        }
        let candidates: Vec<usize> = (0..100).collect();
        let top10 = recommend_topk(&Hash, &ds, 0, &candidates, 10).unwrap();
        // brute force: full sort then take 10
        let mut all: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&i| (i, Hash.score_pair(&ds, 0, i).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = all.iter().take(10).map(|(i, _)| *i).collect();
        assert_eq!(top10, expect);
        let top11 = recommend_topk(&Hash, &ds, 0, &candidates, 11).unwrap();
        assert_eq!(&top11[..10], top10.as_slice());
    }

    #[test]
    fn baseline_weight_columns() {
        let w: Matrix<f64> = baseline_weights(&[0, 1], 2, 2.0, 0.5);
        assert_eq!(w.row(0), &[2.0, 0.5]);
        assert_eq!(w.row(1), &[0.5, 2.0]);
        let unit: Matrix<f64> = baseline_weights(&[0, 1], 2, 1.0, 1.0);
        assert!(unit.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn baseline_weight_column_means_count_exactly() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let w: Matrix<f64> = baseline_weights(&labels, 4, 3.0, 0.1);
        for e in 0..4 {
            let n_e = labels.iter().filter(|&&l| l == e).count();
            let mean: f64 = (0..100).map(|i| w.get(i, e)).sum::<f64>() / 100.0;
            let expect = (n_e as f64 * 3.0 + (100 - n_e) as f64 * 0.1) / 100.0;
            assert!((mean - expect).abs() <= 1e-12, "{mean} vs {expect}");
        }
        // with dyadic weights the counting identity is bit-exact
        let w: Matrix<f64> = baseline_weights(&labels, 4, 3.0, 0.5);
        for e in 0..4 {
            let n_e = labels.iter().filter(|&&l| l == e).count();
            let mean: f64 = (0..100).map(|i| w.get(i, e)).sum::<f64>() / 100.0;
            assert_eq!(mean, (n_e as f64 * 3.0 + (100 - n_e) as f64 * 0.5) / 100.0);
        }
    }

    #[test]
    fn feature_routing_picks_the_matching_sub_model() {
        use crate::data::{parse_interactions, FileFormat};
        let schema = FeatureSchema::new(vec![FieldSpec {
            name: "seg".into(),
            side: Side::User,
            categories: vec!["x".into(), "y".into()],
            ids: false,
        }]);
        let text = "user_id,item_id,rating,seg\nu0,i0,1,x\nu1,i0,1,y\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &schema).unwrap();
        let routed = FeatureRoutedRecommender {
            sub_models: vec![constant(&ds, 0.1), constant(&ds, 0.9)],
            field_idx: 0,
        };
        assert_eq!(routed.score_pair(&ds, 0, 0).unwrap(), 0.1);
        assert_eq!(routed.score_pair(&ds, 1, 0).unwrap(), 0.9);
    }

    #[test]
    fn classifier_separates_two_blobs() {
        // users 0..3 -> env 0, users 4..7 -> env 1; the embeddings learn the
        // user structure and the labels become linearly separable
        let mut rows = Vec::new();
        for u in 0..8usize {
            for v in 0..6usize {
                let y = if u < 4 { 1.0 } else { -1.0 };
                rows.push((u, v, y));
            }
        }
        let ds = dataset_from(&rows);
        let labels: Vec<usize> = rows.iter().map(|(u, _, _)| usize::from(*u >= 4)).collect();
        let cfg = ExploitConfig {
            emb_dim: 4,
            train: TrainConfig { epochs: 60, learning_rate: 0.1, ..Default::default() },
            seed: 3,
            ..Default::default()
        };
        let (_, _, report) = train_env_classifier(&ds, &labels, 2, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.95, "accuracy {}", report.train_accuracy);
    }

    #[test]
    fn single_env_classifier_has_probability_one() {
        let ds = dataset_from(&[(0, 0, 0.5), (1, 1, 1.0)]);
        let cfg = ExploitConfig {
            emb_dim: 2,
            train: TrainConfig { epochs: 5, ..Default::default() },
            ..Default::default()
        };
        let (emb, clf, report) = train_env_classifier(&ds, &[0, 0], 1, &cfg).unwrap();
        let a = emb.embedding(&ds, 0, 0).unwrap();
        assert_eq!(clf.probabilities(&a).unwrap(), vec![1.0]);
        assert_eq!(report.train_accuracy, 1.0);
    }

    #[test]
    fn composed_roundtrips_through_directory() {
        let ds = dataset_from(&[(0, 0, 1.0), (1, 1, 0.0)]);
        let cfg = ExploitConfig {
            emb_dim: 2,
            train: TrainConfig { epochs: 3, ..Default::default() },
            ..Default::default()
        };
        let g = Matrix::from_rows(vec![vec![0.1f64, 0.4], vec![0.5, 0.2]]);
        let subs = train_sub_models(&ds, &g, &[0, 1], &cfg).unwrap();
        let (emb, clf, _) = train_env_classifier(&ds, &[0, 1], 2, &cfg).unwrap();
        let composed = ComposedRecommender { sub_models: subs, emb_model: emb, classifier: clf };
        let dir = tempfile::tempdir().unwrap();
        composed.save_dir(dir.path(), ds.schema().stable_hash()).unwrap();
        let back: ComposedRecommender = ComposedRecommender::load_dir(dir.path()).unwrap();
        assert_eq!(back, composed);
        assert_eq!(back.predict(&ds, 0, 0).unwrap(), composed.predict(&ds, 0, 0).unwrap());
    }
}
