//! Factorization backbones (MF, FM), losses, and weighted SGD training.

mod fm;
mod gradcheck;
mod mf;
mod train;

pub use fm::FmModel;
pub use gradcheck::max_rel_gradient_error;
pub use mf::MfModel;
pub use train::{full_batch_gradient, sgd_train, TrainReport};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Loss applied to raw model scores. BCE passes the score through the
/// logistic link at loss time; ranking uses raw scores directly (monotone in
/// the predicted probability).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce,
}

impl LossKind {
    pub fn uses_binary_label(self) -> bool {
        matches!(self, LossKind::Bce)
    }
}

/// Pointwise loss. MSE is `(pred - label)^2`; BCE is the logistic
/// cross-entropy of the raw score, computed in softplus form so `log(0)`
/// never occurs.
pub fn loss<S: Scalar>(pred: S, label: S, kind: LossKind) -> S {
    match kind {
        LossKind::Mse => {
            let d = pred - label;
            d * d
        }
        LossKind::Bce => label * (-pred).softplus() + (S::one() - label) * pred.softplus(),
    }
}

/// d(loss)/d(pred) for the given loss.
pub fn loss_grad<S: Scalar>(pred: S, label: S, kind: LossKind) -> S {
    match kind {
        LossKind::Mse => (pred - label) * S::from_f64(2.0),
        LossKind::Bce => pred.sigmoid() - label,
    }
}

/// SGD hyperparameters. All randomness (initialization and the per-epoch
/// shuffle) derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            learning_rate: 0.05,
            l2_reg: 1e-5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::argument("learning_rate must be > 0"));
        }
        if self.l2_reg < 0.0 {
            return Err(Error::argument("l2_reg must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("epochs and batch_size must be >= 1"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::argument("init_scale must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mf,
    Fm,
}

/// Address of a single trainable parameter; shared by the trainer and the
/// finite-difference check so both walk the identical gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamId {
    /// MF global bias or FM `w0`.
    Global,
    UserBias(usize),
    ItemBias(usize),
    UserEmb(usize, usize),
    ItemEmb(usize, usize),
    /// FM linear weight.
    Linear(usize),
    /// FM factor matrix entry (feature, component).
    Factor(usize, usize),
}

/// Receives per-parameter gradient contributions.
pub trait GradSink<S: Scalar> {
    fn add(&mut self, id: ParamId, value: S);
}

impl<S: Scalar> GradSink<S> for Vec<(ParamId, S)> {
    fn add(&mut self, id: ParamId, value: S) {
        self.push((id, value));
    }
}

/// Either backbone behind one scoring/embedding interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[serde(bound = "S: Scalar")]
pub enum FactorModel<S: Scalar = f64> {
    Mf(MfModel<S>),
    Fm(FmModel<S>),
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct ModelFile<S: Scalar> {
    version: u32,
    model: FactorModel<S>,
}

impl<S: Scalar> FactorModel<S> {
    pub fn init(
        kind: BackboneKind,
        dataset: &Dataset<S>,
        k: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            BackboneKind::Mf => FactorModel::Mf(MfModel::new(
                dataset.n_users(),
                dataset.n_items(),
                k,
                init_scale,
                rng,
            )),
            BackboneKind::Fm => FactorModel::Fm(FmModel::new(
                dataset.schema().total_dim(),
                k,
                init_scale,
                rng,
            )),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            FactorModel::Mf(_) => BackboneKind::Mf,
            FactorModel::Fm(_) => BackboneKind::Fm,
        }
    }

    /// Raw score for a (user, item) pair.
    pub fn score(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<S> {
        match self {
            FactorModel::Mf(m) => m.predict(user, item),
            FactorModel::Fm(m) => m.predict(&dataset.encode_pair(user, item)?),
        }
    }

    /// Concatenated embedding of a pair: MF gives `[p_u || q_v]` (length
    /// `2k`), FM concatenates the factor rows of the active features in
    /// schema order (length `#fields * k`).
    pub fn embedding(&self, dataset: &Dataset<S>, user: usize, item: usize) -> Result<Vec<S>> {
        match self {
            FactorModel::Mf(m) => m.embedding(user, item),
            FactorModel::Fm(m) => m.embedding(&dataset.encode_pair(user, item)?),
        }
    }

    pub fn embedding_dim(&self, dataset: &Dataset<S>) -> usize {
        match self {
            FactorModel::Mf(m) => 2 * m.k(),
            FactorModel::Fm(m) => dataset.schema().fields.len() * m.k(),
        }
    }

    /// Parameter ids aligned entry-for-entry with [`Self::embedding`], so
    /// gradients arriving through the embedding vector can be pushed back
    /// into the model.
    pub fn embedding_param_ids(
        &self,
        dataset: &Dataset<S>,
        interaction: &Interaction<S>,
    ) -> Result<Vec<ParamId>> {
        match self {
            FactorModel::Mf(m) => {
                let k = m.k();
                let mut ids = Vec::with_capacity(2 * k);
                ids.extend((0..k).map(|f| ParamId::UserEmb(interaction.user, f)));
                ids.extend((0..k).map(|f| ParamId::ItemEmb(interaction.item, f)));
                Ok(ids)
            }
            FactorModel::Fm(m) => {
                let x = dataset.encode(interaction)?;
                let k = m.k();
                let mut ids = Vec::with_capacity(x.indices.len() * k);
                for &i in &x.indices {
                    ids.extend((0..k).map(|f| ParamId::Factor(i, f)));
                }
                Ok(ids)
            }
        }
    }

    /// Stream `weight * (loss_grad * dz/dtheta + 2 * l2 * theta)` for every
    /// parameter the sample touches. `loss_grad` is d(loss)/d(score) at the
    /// current prediction. The L2 term rides on the sample weight so that
    /// zero-weight samples contribute nothing at all.
    pub fn accumulate_gradient(
        &self,
        dataset: &Dataset<S>,
        interaction: &Interaction<S>,
        weight: S,
        grad: S,
        l2: S,
        sink: &mut impl GradSink<S>,
    ) -> Result<()> {
        match self {
            FactorModel::Mf(m) => m.accumulate_gradient(interaction, weight, grad, l2, sink),
            FactorModel::Fm(m) => {
                let x = dataset.encode(interaction)?;
                m.accumulate_gradient(&x, weight, grad, l2, sink)
            }
        }
    }

    pub fn get_param(&self, id: ParamId) -> S {
        match self {
            FactorModel::Mf(m) => m.get_param(id),
            FactorModel::Fm(m) => m.get_param(id),
        }
    }

    pub fn set_param(&mut self, id: ParamId, v: S) {
        match self {
            FactorModel::Mf(m) => m.set_param(id, v),
            FactorModel::Fm(m) => m.set_param(id, v),
        }
    }

    /// Parameters touched by one sample, in a fixed documented order.
    pub fn touched_params(&self, dataset: &Dataset<S>, interaction: &Interaction<S>) -> Result<Vec<ParamId>> {
        match self {
            FactorModel::Mf(m) => Ok(m.touched_params(interaction)),
            FactorModel::Fm(m) => {
                let x = dataset.encode(interaction)?;
                Ok(m.touched_params(&x))
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            FactorModel::Mf(m) => m.is_finite(),
            FactorModel::Fm(m) => m.is_finite(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ModelFile { version: 1, model: self.clone() };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile<S> = serde_json::from_str(&text)?;
        if file.version != 1 {
            return Err(Error::format(format!("unsupported model version {}", file.version)));
        }
        Ok(file.model)
    }
}

/// Convenience wrapper used throughout: predict for an interaction record.
pub fn predict_interaction<S: Scalar>(
    model: &FactorModel<S>,
    dataset: &Dataset<S>,
    interaction: &Interaction<S>,
) -> Result<S> {
    model.score(dataset, interaction.user, interaction.item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mse_examples() {
        assert_eq!(loss(0.5f64, 0.5, LossKind::Mse), 0.0);
        // hand arithmetic: (0.2 - 1.0)^2 = 0.64
        assert_relative_eq!(loss(0.2f64, 1.0, LossKind::Mse), 0.64, max_relative = 1e-12);
    }

    #[test]
    fn bce_at_zero_score_is_ln2() {
        // sigma(0) = 0.5, -ln 0.5 = ln 2
        assert_relative_eq!(loss(0.0f64, 1.0, LossKind::Bce), std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(loss(0.0f64, 0.0, LossKind::Bce), std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn bce_is_stable_for_extreme_scores() {
        for &z in &[-500.0f64, -40.0, 40.0, 500.0] {
            for &y in &[0.0, 1.0] {
                let l = loss(z, y, LossKind::Bce);
                assert!(l.is_finite() && l >= 0.0, "z={z} y={y} -> {l}");
            }
        }
    }

    #[test]
    fn default_config_validates() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
