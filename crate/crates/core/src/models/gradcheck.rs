//! Numerical gradient verification.
//!
//! The analytic gradient comes from the same accumulation path the trainer
//! uses; the reference side only ever calls `score` and `loss` through
//! central finite differences, so the two routes stay independent.

use crate::data::{Dataset, Interaction};
use crate::error::Result;
use crate::scalar::Scalar;

use super::{loss, FactorModel, LossKind, ParamId};

const FD_STEP: f64 = 1e-5;

/// Analytic gradient of the bare per-sample loss (unit weight, no L2).
pub fn sample_gradient<S: Scalar>(
    model: &FactorModel<S>,
    dataset: &Dataset<S>,
    interaction: &Interaction<S>,
    kind: LossKind,
) -> Result<Vec<(ParamId, S)>> {
    let z = model.score(dataset, interaction.user, interaction.item)?;
    let y = interaction.target(kind.uses_binary_label())?;
    let g = super::loss_grad(z, y, kind);
    let mut sink: Vec<(ParamId, S)> = Vec::new();
    model.accumulate_gradient(dataset, interaction, S::one(), g, S::zero(), &mut sink)?;
    Ok(sink)
}

/// Max relative discrepancy between the analytic per-sample gradient and
/// central finite differences (step 1e-5) over every touched parameter.
/// Relative error is `|a - f| / max(1e-4, |a|, |f|)` so near-zero entries are
/// compared on an absolute scale.
pub fn max_rel_gradient_error<S: Scalar>(
    model: &FactorModel<S>,
    dataset: &Dataset<S>,
    interaction: &Interaction<S>,
    kind: LossKind,
) -> Result<f64> {
    let analytic = sample_gradient(model, dataset, interaction, kind)?;
    let y = interaction.target(kind.uses_binary_label())?;
    let mut probe = model.clone();
    let h = S::from_f64(FD_STEP);
    let mut worst = 0.0f64;
    for (id, a) in analytic {
        let orig = probe.get_param(id);
        probe.set_param(id, orig + h);
        let up = loss(probe.score(dataset, interaction.user, interaction.item)?, y, kind);
        probe.set_param(id, orig - h);
        let down = loss(probe.score(dataset, interaction.user, interaction.item)?, y, kind);
        probe.set_param(id, orig);
        let fd = (up.to_f64() - down.to_f64()) / (2.0 * FD_STEP);
        let a = a.to_f64();
        let rel = (a - fd).abs() / f64::max(1e-4, f64::max(a.abs(), fd.abs()));
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{binarize, parse_interactions, FeatureSchema, FieldSpec, FileFormat, Side};
    use crate::models::{BackboneKind, FactorModel};
    use crate::seed;
    use rand::Rng;

    fn feature_dataset() -> Dataset {
        let schema = FeatureSchema::new(vec![
            FieldSpec { name: "user_id".into(), side: Side::User, categories: vec![], ids: true },
            FieldSpec { name: "g".into(), side: Side::User, categories: vec!["a".into(), "b".into()], ids: false },
            FieldSpec { name: "item_id".into(), side: Side::Item, categories: vec![], ids: true },
            FieldSpec { name: "c".into(), side: Side::Item, categories: vec!["x".into(), "y".into(), "z".into()], ids: false },
        ]);
        let text = "user_id,item_id,rating,g,c\n\
                    u0,i0,1.5,a,x\nu0,i1,-0.5,a,y\nu1,i0,2.0,b,x\nu1,i2,0.25,b,z\nu2,i1,1.0,a,y\n";
        let ds: Dataset = parse_interactions(text, FileFormat::Csv, &schema).unwrap();
        binarize(&ds, 1.0)
    }

    fn perturb(model: &mut FactorModel<f64>, rng: &mut impl Rng, ds: &Dataset) {
        // randomize every parameter a sample might touch
        for it in ds.interactions() {
            for id in model.touched_params(ds, it).unwrap() {
                model.set_param(id, rng.gen_range(-0.8..0.8));
            }
        }
    }

    #[test]
    fn mf_gradients_match_finite_differences() {
        let ds = feature_dataset();
        let mut rng = seed::rng(21, "gradcheck");
        for case in 0..10 {
            let mut model = FactorModel::init(BackboneKind::Mf, &ds, 3, 0.5, &mut rng);
            perturb(&mut model, &mut rng, &ds);
            for kind in [LossKind::Mse, LossKind::Bce] {
                let it = &ds.interactions()[case % ds.len()];
                let err = max_rel_gradient_error(&model, &ds, it, kind).unwrap();
                assert!(err < 1e-4, "case {case} {kind:?}: {err}");
            }
        }
    }

    #[test]
    fn fm_gradients_match_finite_differences() {
        let ds = feature_dataset();
        let mut rng = seed::rng(22, "gradcheck");
        for case in 0..10 {
            let mut model = FactorModel::init(BackboneKind::Fm, &ds, 3, 0.5, &mut rng);
            perturb(&mut model, &mut rng, &ds);
            for kind in [LossKind::Mse, LossKind::Bce] {
                let it = &ds.interactions()[case % ds.len()];
                let err = max_rel_gradient_error(&model, &ds, it, kind).unwrap();
                assert!(err < 1e-4, "case {case} {kind:?}: {err}");
            }
        }
    }

    #[test]
    fn exact_fit_has_vanishing_gradient() {
        let ds = feature_dataset();
        // constant model predicting exactly the one rating it is checked on
        let mut model = FactorModel::Mf(crate::models::MfModel::constant(ds.n_users(), ds.n_items()));
        model.set_param(ParamId::Global, ds.interactions()[0].rating);
        let grads = sample_gradient(&model, &ds, &ds.interactions()[0], LossKind::Mse).unwrap();
        let norm: f64 = grads.iter().map(|(_, g)| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }
}
