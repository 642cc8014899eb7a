//! Matrix-factorization backbone: global bias, per-entity biases, and latent
//! embeddings. Per-entity biases may be disabled (empty vectors), which turns
//! a `k = 0` model into a trainable constant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, Scalar};

use super::{GradSink, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MfModel<S: Scalar = f64> {
    pub global_bias: S,
    /// Per-user bias; empty means biases are disabled.
    pub user_bias: Vec<S>,
    pub item_bias: Vec<S>,
    pub user_emb: Matrix<S>,
    pub item_emb: Matrix<S>,
}

impl<S: Scalar> MfModel<S> {
    /// Embeddings drawn uniform in `(-init_scale, init_scale)`, biases zero.
    pub fn new(n_users: usize, n_items: usize, k: usize, init_scale: f64, rng: &mut impl Rng) -> Self {
        let mut user_emb = Matrix::zeros(n_users, k);
        let mut item_emb = Matrix::zeros(n_items, k);
        for v in user_emb.data_mut() {
            *v = S::from_f64(rng.gen_range(-init_scale..init_scale));
        }
        for v in item_emb.data_mut() {
            *v = S::from_f64(rng.gen_range(-init_scale..init_scale));
        }
        MfModel {
            global_bias: S::zero(),
            user_bias: vec![S::zero(); n_users],
            item_bias: vec![S::zero(); n_items],
            user_emb,
            item_emb,
        }
    }

    /// Model whose only trainable parameter is the global bias.
    pub fn constant(n_users: usize, n_items: usize) -> Self {
        MfModel {
            global_bias: S::zero(),
            user_bias: vec![],
            item_bias: vec![],
            user_emb: Matrix::zeros(n_users, 0),
            item_emb: Matrix::zeros(n_items, 0),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn k(&self) -> usize {
        self.user_emb.cols()
    }

    fn has_entity_biases(&self) -> bool {
        !self.user_bias.is_empty()
    }

    fn check_ids(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.n_users() || item >= self.n_items() {
            return Err(Error::lookup(format!(
                "pair ({user}, {item}) outside model shape ({}, {})",
                self.n_users(),
                self.n_items()
            )));
        }
        Ok(())
    }

    /// `global + b_u + c_v + <p_u, q_v>`; raw score, no link function.
    pub fn predict(&self, user: usize, item: usize) -> Result<S> {
        self.check_ids(user, item)?;
        let mut z = self.global_bias;
        if self.has_entity_biases() {
            z += self.user_bias[user] + self.item_bias[item];
        }
        z += dot(self.user_emb.row(user), self.item_emb.row(item));
        Ok(z)
    }

    /// `[p_u || q_v]`, length `2k`.
    pub fn embedding(&self, user: usize, item: usize) -> Result<Vec<S>> {
        self.check_ids(user, item)?;
        let mut out = Vec::with_capacity(2 * self.k());
        out.extend_from_slice(self.user_emb.row(user));
        out.extend_from_slice(self.item_emb.row(item));
        Ok(out)
    }

    pub fn touched_params(&self, it: &Interaction<S>) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Global];
        if self.has_entity_biases() {
            ids.push(ParamId::UserBias(it.user));
            ids.push(ParamId::ItemBias(it.item));
        }
        for f in 0..self.k() {
            ids.push(ParamId::UserEmb(it.user, f));
            ids.push(ParamId::ItemEmb(it.item, f));
        }
        ids
    }

    /// See [`super::FactorModel::accumulate_gradient`]. L2 skips the global
    /// bias.
    pub fn accumulate_gradient(
        &self,
        it: &Interaction<S>,
        weight: S,
        grad: S,
        l2: S,
        sink: &mut impl GradSink<S>,
    ) -> Result<()> {
        self.check_ids(it.user, it.item)?;
        let two_l2 = l2 * S::from_f64(2.0);
        let wg = weight * grad;
        sink.add(ParamId::Global, wg);
        if self.has_entity_biases() {
            sink.add(
                ParamId::UserBias(it.user),
                wg + weight * two_l2 * self.user_bias[it.user],
            );
            sink.add(
                ParamId::ItemBias(it.item),
                wg + weight * two_l2 * self.item_bias[it.item],
            );
        }
        for f in 0..self.k() {
            let p = self.user_emb.get(it.user, f);
            let q = self.item_emb.get(it.item, f);
            sink.add(ParamId::UserEmb(it.user, f), wg * q + weight * two_l2 * p);
            sink.add(ParamId::ItemEmb(it.item, f), wg * p + weight * two_l2 * q);
        }
        Ok(())
    }

    pub fn get_param(&self, id: ParamId) -> S {
        match id {
            ParamId::Global => self.global_bias,
            ParamId::UserBias(u) => self.user_bias[u],
            ParamId::ItemBias(v) => self.item_bias[v],
            ParamId::UserEmb(u, f) => self.user_emb.get(u, f),
            ParamId::ItemEmb(v, f) => self.item_emb.get(v, f),
            _ => panic!("not an MF parameter: {id:?}"),
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: S) {
        match id {
            ParamId::Global => self.global_bias = value,
            ParamId::UserBias(u) => self.user_bias[u] = value,
            ParamId::ItemBias(v) => self.item_bias[v] = value,
            ParamId::UserEmb(u, f) => self.user_emb.set(u, f, value),
            ParamId::ItemEmb(v, f) => self.item_emb.set(v, f, value),
            _ => panic!("not an MF parameter: {id:?}"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.global_bias.is_finite()
            && self.user_bias.iter().all(|v| v.is_finite())
            && self.item_bias.iter().all(|v| v.is_finite())
            && self.user_emb.is_finite()
            && self.item_emb.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_predicts_zero() {
        let m: MfModel = MfModel {
            global_bias: 0.0,
            user_bias: vec![0.0; 2],
            item_bias: vec![0.0; 2],
            user_emb: Matrix::zeros(2, 3),
            item_emb: Matrix::zeros(2, 3),
        };
        assert_eq!(m.predict(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn hand_dot_product() {
        // biases 0, p_u = (1,2), q_v = (3,-1) -> 1.0
        let m: MfModel = MfModel {
            global_bias: 0.0,
            user_bias: vec![0.0],
            item_bias: vec![0.0],
            user_emb: Matrix::from_rows(vec![vec![1.0, 2.0]]),
            item_emb: Matrix::from_rows(vec![vec![3.0, -1.0]]),
        };
        assert_relative_eq!(m.predict(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn bias_only_model_is_constant() {
        let mut m: MfModel = MfModel::constant(3, 4);
        m.global_bias = 0.7;
        for u in 0..3 {
            for v in 0..4 {
                assert_eq!(m.predict(u, v).unwrap(), 0.7);
            }
        }
    }

    #[test]
    fn embedding_concatenates() {
        let m: MfModel = MfModel {
            global_bias: 0.0,
            user_bias: vec![0.0],
            item_bias: vec![0.0],
            user_emb: Matrix::from_rows(vec![vec![1.0, 2.0]]),
            item_emb: Matrix::from_rows(vec![vec![3.0, 4.0]]),
        };
        assert_eq!(m.embedding(0, 0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_model_has_zero_embedding_of_contracted_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: MfModel = MfModel::new(2, 2, 4, 0.1, &mut rng);
        let e = m.embedding(1, 1).unwrap();
        assert_eq!(e.len(), 8);
        let z: MfModel = MfModel {
            user_emb: Matrix::zeros(2, 4),
            item_emb: Matrix::zeros(2, 4),
            ..m
        };
        assert!(z.embedding(0, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_id_is_lookup_error() {
        let m: MfModel = MfModel::constant(2, 2);
        assert!(m.predict(2, 0).is_err());
        assert!(m.embedding(0, 5).is_err());
    }
}
