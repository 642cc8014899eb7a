//! Weighted mini-batch SGD.
//!
//! Each batch applies the mean batch gradient: contributions are computed
//! against the pre-batch parameters, then applied scaled by `1/|batch|`. A
//! sample contributes `w * (dloss/dz * dz/dtheta + 2 * l2 * theta)` for the
//! parameters it touches, so zero-weight samples are exact no-ops. The
//! shuffle is reseeded per epoch from the config seed.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

use super::{loss, loss_grad, FactorModel, GradSink, ParamId, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean weighted loss `sum(w * l) / n` over the training selection after
    /// the last epoch.
    pub final_loss: f64,
    pub epochs_run: usize,
}

struct BatchSink<S: Scalar> {
    contributions: Vec<(ParamId, S)>,
}

impl<S: Scalar> GradSink<S> for BatchSink<S> {
    fn add(&mut self, id: ParamId, value: S) {
        self.contributions.push((id, value));
    }
}

/// Train `model` on the selected samples of `dataset`.
///
/// `indices` restricts training to a subset (default: all samples).
/// `weights`, when given, is a full-length per-sample weight table that
/// overrides the interactions' own weights.
pub fn sgd_train<S: Scalar>(
    model: &mut FactorModel<S>,
    dataset: &Dataset<S>,
    indices: Option<&[usize]>,
    weights: Option<&[S]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let all: Vec<usize>;
    let selected: &[usize] = match indices {
        Some(ix) => ix,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    if selected.is_empty() {
        return Err(Error::argument("sgd_train requires a nonempty selection"));
    }
    if let Some(w) = weights {
        if w.len() != dataset.len() {
            return Err(Error::argument(format!(
                "weights length {} does not match dataset length {}",
                w.len(),
                dataset.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| **v < S::zero() || !v.is_finite()) {
            return Err(Error::argument(format!("invalid sample weight {bad}")));
        }
    }
    let weight_of = |i: usize| weights.map_or(dataset.interactions()[i].weight, |w| w[i]);

    let lr = S::from_f64(config.learning_rate);
    let l2 = S::from_f64(config.l2_reg);
    let use_label = config.loss.uses_binary_label();

    let mut order: Vec<usize> = selected.to_vec();
    let mut sink = BatchSink { contributions: Vec::new() };

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng_indexed(config.seed, "sgd.epoch", epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = S::zero();
        for batch in order.chunks(config.batch_size) {
            sink.contributions.clear();
            for &i in batch {
                let it = &dataset.interactions()[i];
                let w = weight_of(i);
                let z = model.score(dataset, it.user, it.item)?;
                let y = it.target(use_label)?;
                epoch_loss += w * loss(z, y, config.loss);
                if w > S::zero() {
                    let g = loss_grad(z, y, config.loss);
                    model.accumulate_gradient(dataset, it, w, g, l2, &mut sink)?;
                }
            }
            let step = lr / S::from_usize(batch.len());
            for &(id, g) in &sink.contributions {
                let cur = model.get_param(id);
                model.set_param(id, cur - step * g);
            }
        }
        let mean = epoch_loss.to_f64() / selected.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!("mean weighted loss became {mean}"),
            });
        }
    }

    let final_loss = mean_weighted_loss(model, dataset, selected, weights, config)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            message: format!("final loss is {final_loss}"),
        });
    }
    Ok(TrainReport { final_loss, epochs_run: config.epochs })
}

/// Mean weighted loss `sum(w * l) / n` of the current parameters over a
/// selection.
pub fn mean_weighted_loss<S: Scalar>(
    model: &FactorModel<S>,
    dataset: &Dataset<S>,
    indices: &[usize],
    weights: Option<&[S]>,
    config: &TrainConfig,
) -> Result<f64> {
    let use_label = config.loss.uses_binary_label();
    let mut total = S::zero();
    for &i in indices {
        let it = &dataset.interactions()[i];
        let w = weights.map_or(it.weight, |w| w[i]);
        let z = model.score(dataset, it.user, it.item)?;
        total += w * loss(z, it.target(use_label)?, config.loss);
    }
    Ok(total.to_f64() / indices.len().max(1) as f64)
}

/// Exact full-batch gradient of the weighted objective, merged per parameter.
/// Exposed so invariants about the gradient itself (weight linearity,
/// duplication equivalence) can be asserted directly.
pub fn full_batch_gradient<S: Scalar>(
    model: &FactorModel<S>,
    dataset: &Dataset<S>,
    indices: &[usize],
    weights: Option<&[S]>,
    config: &TrainConfig,
) -> Result<BTreeMap<ParamId, S>> {
    let use_label = config.loss.uses_binary_label();
    let l2 = S::from_f64(config.l2_reg);
    let mut contributions: Vec<(ParamId, S)> = Vec::new();
    for &i in indices {
        let it = &dataset.interactions()[i];
        let w = weights.map_or(it.weight, |w| w[i]);
        if w > S::zero() {
            let z = model.score(dataset, it.user, it.item)?;
            let g = loss_grad(z, it.target(use_label)?, config.loss);
            model.accumulate_gradient(dataset, it, w, g, l2, &mut contributions)?;
        }
    }
    let mut merged = BTreeMap::new();
    for (id, g) in contributions {
        *merged.entry(id).or_insert_with(S::zero) += g;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_interactions, FileFormat};
    use crate::models::{BackboneKind, LossKind, MfModel};
    use crate::seed;

    fn id_schema() -> crate::data::FeatureSchema {
        use crate::data::{FieldSpec, Side};
        crate::data::FeatureSchema::new(vec![
            FieldSpec { name: "user_id".into(), side: Side::User, categories: vec![], ids: true },
            FieldSpec { name: "item_id".into(), side: Side::Item, categories: vec![], ids: true },
        ])
    }

    fn tiny_dataset(rows: &[(usize, usize, f64)]) -> Dataset {
        let mut text = String::from("user_id,item_id,rating\n");
        for (u, v, y) in rows {
            text.push_str(&format!("u{u},i{v},{y}\n"));
        }
        parse_interactions(&text, FileFormat::Csv, &id_schema()).unwrap()
    }

    fn constant_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            loss: LossKind::Mse,
            learning_rate: 0.2,
            l2_reg: 0.0,
            epochs,
            batch_size: 64,
            seed: 3,
            init_scale: 0.1,
        }
    }

    #[test]
    fn constant_model_converges_to_mean() {
        let ds = tiny_dataset(&[(0, 0, 0.2), (1, 1, 0.8)]);
        let mut model = FactorModel::Mf(MfModel::constant(ds.n_users(), ds.n_items()));
        sgd_train(&mut model, &ds, None, None, &constant_config(300)).unwrap();
        let FactorModel::Mf(m) = &model else { unreachable!() };
        assert!((m.global_bias - 0.5).abs() < 1e-3, "bias {}", m.global_bias);
    }

    #[test]
    fn weighted_constant_model_converges_to_weighted_mean() {
        // weights {1, 3} on labels {0, 1}: (1*0 + 3*1) / 4 = 0.75
        let ds = tiny_dataset(&[(0, 0, 0.0), (1, 1, 1.0)]);
        let mut model = FactorModel::Mf(MfModel::constant(ds.n_users(), ds.n_items()));
        let weights = vec![1.0, 3.0];
        sgd_train(&mut model, &ds, None, Some(&weights), &constant_config(400)).unwrap();
        let FactorModel::Mf(m) = &model else { unreachable!() };
        assert!((m.global_bias - 0.75).abs() < 1e-3, "bias {}", m.global_bias);
    }

    #[test]
    fn zero_weights_leave_model_at_initialization() {
        let ds = tiny_dataset(&[(0, 0, 1.0), (1, 1, -1.0)]);
        let mut rng = seed::rng(9, "init");
        let mut model = FactorModel::init(BackboneKind::Mf, &ds, 4, 0.1, &mut rng);
        let before = model.clone();
        let weights = vec![0.0, 0.0];
        sgd_train(&mut model, &ds, None, Some(&weights), &constant_config(10)).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn full_batch_training_monotone_loss_at_small_lr() {
        // fixed synthetic instance; full batch, lr = 1e-3, l2 = 0
        let rows: Vec<(usize, usize, f64)> = (0..24)
            .map(|i| (i % 6, (i * 7) % 8, ((i * 13 % 11) as f64) / 5.0 - 1.0))
            .collect();
        let ds = tiny_dataset(&rows);
        let mut rng = seed::rng(5, "init");
        let mut model = FactorModel::init(BackboneKind::Mf, &ds, 3, 0.1, &mut rng);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            l2_reg: 0.0,
            epochs: 1,
            batch_size: rows.len(),
            seed: 5,
            ..Default::default()
        };
        let all: Vec<usize> = (0..ds.len()).collect();
        let mut prev = mean_weighted_loss(&model, &ds, &all, None, &cfg).unwrap();
        for _ in 0..50 {
            sgd_train(&mut model, &ds, None, None, &cfg).unwrap();
            let cur = mean_weighted_loss(&model, &ds, &all, None, &cfg).unwrap();
            assert!(cur <= prev + 1e-15, "loss increased: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn duplicating_a_sample_equals_doubling_its_weight() {
        let ds_dup = tiny_dataset(&[(0, 0, 1.0), (1, 1, 0.5), (1, 1, 0.5)]);
        let ds_weighted = tiny_dataset(&[(0, 0, 1.0), (1, 1, 0.5)]);
        let mut rng = seed::rng(2, "init");
        let model = FactorModel::init(BackboneKind::Mf, &ds_weighted, 2, 0.1, &mut rng);
        let cfg = TrainConfig { l2_reg: 1e-3, ..Default::default() };
        let g_dup =
            full_batch_gradient(&model, &ds_dup, &[0, 1, 2], None, &cfg).unwrap();
        let w = vec![1.0, 2.0];
        let g_w =
            full_batch_gradient(&model, &ds_weighted, &[0, 1], Some(&w), &cfg).unwrap();
        assert_eq!(g_dup.len(), g_w.len());
        for (id, g) in &g_dup {
            let other = g_w[id];
            assert!((g - other).abs() <= 1e-10, "{id:?}: {g} vs {other}");
        }
    }

    #[test]
    fn divergent_learning_rate_is_reported_with_epoch() {
        let rows: Vec<(usize, usize, f64)> = (0..16).map(|i| (i % 4, i % 4, 1.0)).collect();
        let ds = tiny_dataset(&rows);
        let mut rng = seed::rng(0, "init");
        let mut model = FactorModel::init(BackboneKind::Mf, &ds, 4, 1.0, &mut rng);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            epochs: 50,
            batch_size: 4,
            ..Default::default()
        };
        match sgd_train(&mut model, &ds, None, None, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let rows: Vec<(usize, usize, f64)> = (0..30)
            .map(|i| (i % 5, (i * 3) % 7, (i % 4) as f64))
            .collect();
        let ds = tiny_dataset(&rows);
        let run = || {
            let mut rng = seed::rng(4, "init");
            let mut model = FactorModel::init(BackboneKind::Mf, &ds, 3, 0.1, &mut rng);
            sgd_train(&mut model, &ds, None, None, &TrainConfig { seed: 4, epochs: 5, ..Default::default() })
                .unwrap();
            model
        };
        assert_eq!(run(), run());
    }
}
