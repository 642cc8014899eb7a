//! Second-order factorization machine over sparse one-hot features.
//!
//! The pairwise term is evaluated through the O(k * nnz) identity
//! `0.5 * sum_f [(sum_i V_if x_i)^2 - sum_i V_if^2 x_i^2]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SparseVec;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

use super::{GradSink, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FmModel<S: Scalar = f64> {
    pub w0: S,
    pub w: Vec<S>,
    /// Factor matrix, feature dimension x k.
    pub v: Matrix<S>,
}

impl<S: Scalar> FmModel<S> {
    /// Factors drawn uniform in `(-init_scale, init_scale)`, `w0` and `w` zero.
    pub fn new(dim: usize, k: usize, init_scale: f64, rng: &mut impl Rng) -> Self {
        let mut v = Matrix::zeros(dim, k);
        for e in v.data_mut() {
            *e = S::from_f64(rng.gen_range(-init_scale..init_scale));
        }
        FmModel {
            w0: S::zero(),
            w: vec![S::zero(); dim],
            v,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn k(&self) -> usize {
        self.v.cols()
    }

    fn check(&self, x: &SparseVec<S>) -> Result<()> {
        if let Some(&bad) = x.indices.iter().find(|&&i| i >= self.dim()) {
            return Err(Error::lookup(format!(
                "feature index {bad} outside model dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `w0 + sum_i w_i x_i + sum_{i<j} <V_i, V_j> x_i x_j` via the fast
    /// identity.
    pub fn predict(&self, x: &SparseVec<S>) -> Result<S> {
        self.check(x)?;
        let mut z = self.w0;
        for (&i, &xi) in x.indices.iter().zip(&x.values) {
            z += self.w[i] * xi;
        }
        let half = S::from_f64(0.5);
        for f in 0..self.k() {
            let mut s = S::zero();
            let mut s2 = S::zero();
            for (&i, &xi) in x.indices.iter().zip(&x.values) {
                let t = self.v.get(i, f) * xi;
                s += t;
                s2 += t * t;
            }
            z += half * (s * s - s2);
        }
        Ok(z)
    }

    /// Concatenated factor rows of the active features, in index order of `x`
    /// (schema order for one-hot encodings). Length `nnz * k`.
    pub fn embedding(&self, x: &SparseVec<S>) -> Result<Vec<S>> {
        self.check(x)?;
        let mut out = Vec::with_capacity(x.indices.len() * self.k());
        for &i in &x.indices {
            out.extend_from_slice(self.v.row(i));
        }
        Ok(out)
    }

    pub fn touched_params(&self, x: &SparseVec<S>) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Global];
        for &i in &x.indices {
            ids.push(ParamId::Linear(i));
        }
        for &i in &x.indices {
            for f in 0..self.k() {
                ids.push(ParamId::Factor(i, f));
            }
        }
        ids
    }

    /// See [`super::FactorModel::accumulate_gradient`]. L2 skips `w0`.
    pub fn accumulate_gradient(
        &self,
        x: &SparseVec<S>,
        weight: S,
        grad: S,
        l2: S,
        sink: &mut impl GradSink<S>,
    ) -> Result<()> {
        self.check(x)?;
        let two_l2 = l2 * S::from_f64(2.0);
        let wg = weight * grad;
        sink.add(ParamId::Global, wg);
        for (&i, &xi) in x.indices.iter().zip(&x.values) {
            sink.add(ParamId::Linear(i), wg * xi + weight * two_l2 * self.w[i]);
        }
        for f in 0..self.k() {
            let s: S = x
                .indices
                .iter()
                .zip(&x.values)
                .map(|(&i, &xi)| self.v.get(i, f) * xi)
                .sum();
            for (&i, &xi) in x.indices.iter().zip(&x.values) {
                let vif = self.v.get(i, f);
                let dz = xi * (s - vif * xi);
                sink.add(ParamId::Factor(i, f), wg * dz + weight * two_l2 * vif);
            }
        }
        Ok(())
    }

    pub fn get_param(&self, id: ParamId) -> S {
        match id {
            ParamId::Global => self.w0,
            ParamId::Linear(i) => self.w[i],
            ParamId::Factor(i, f) => self.v.get(i, f),
            _ => panic!("not an FM parameter: {id:?}"),
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: S) {
        match id {
            ParamId::Global => self.w0 = value,
            ParamId::Linear(i) => self.w[i] = value,
            ParamId::Factor(i, f) => self.v.set(i, f, value),
            _ => panic!("not an FM parameter: {id:?}"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite() && self.w.iter().all(|v| v.is_finite()) && self.v.is_finite()
    }
}
