use super::{ClsLoss, MixedBatch};
use crate::autodiff::{BoundParams, Real, Tape, Tensor, Var};
use crate::model::KeywordModel;
use crate::{Error, Result};

/// Contrastive weights of one batch row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContrastiveWeights {
    /// Mixed row with distinct sources: `(lambda, 1 - lambda)`.
    Pair { w_i: f64, w_j: f64 },
    /// Unmixed row: one term with weight 1.
    Single(f64),
}

impl ContrastiveWeights {
    /// Weights applied to the `i` and `j` branches; an unmixed row puts all
    /// weight on `i`.
    pub fn branch_weights(self) -> (f64, f64) {
        match self {
            ContrastiveWeights::Pair { w_i, w_j } => (w_i, w_j),
            ContrastiveWeights::Single(w) => (w, 0.0),
        }
    }

    pub fn total(self) -> f64 {
        let (a, b) = self.branch_weights();
        a + b
    }
}

pub fn lambda_weight(lambda: f64, is_mixed: bool) -> ContrastiveWeights {
    if is_mixed {
        ContrastiveWeights::Pair {
            w_i: lambda,
            w_j: 1.0 - lambda,
        }
    } else {
        ContrastiveWeights::Single(1.0)
    }
}

/// Per-row supervision of a batch in the engine's element type.
#[derive(Clone, Debug)]
pub struct BatchTargets<T> {
    pub y_i: Tensor<T>,
    pub y_j: Tensor<T>,
    pub lambdas: Vec<f64>,
    pub is_mixed: Vec<bool>,
}

impl<T: Real> BatchTargets<T> {
    pub fn from_batch(batch: &MixedBatch) -> Self {
        BatchTargets {
            y_i: batch.y_i(),
            y_j: batch.y_j(),
            lambdas: batch.lambdas.clone(),
            is_mixed: batch.is_mixed.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    /// Weight of the contrastive term.
    pub beta: f64,
    pub cls_loss: ClsLoss,
    /// Build the contrastive branches at all. Off for baseline and mixup.
    pub contrastive: bool,
}

/// Handles to the pieces of the total loss on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub loss_mix: Var,
    /// `beta * mean_rows(sum_r w_r L_cos)`; absent without contrastive branches.
    pub loss_cos: Option<Var>,
    pub logits: Var,
}

fn cls_rows<T: Real>(tape: &Tape<T>, logits: Var, target: &Tensor<T>, cls: ClsLoss) -> Result<Var> {
    match cls {
        ClsLoss::SoftmaxCe => tape.softmax_cross_entropy_rows(logits, target),
        ClsLoss::SigmoidBce => tape.sigmoid_bce_rows(logits, target),
    }
}

/// Batch mean of `lambda * L(z, y_i) + (1 - lambda) * L(z, y_j)`.
pub fn loss_mix<T: Real>(
    tape: &Tape<T>,
    logits: Var,
    y_i: &Tensor<T>,
    y_j: &Tensor<T>,
    lambdas: &[f64],
    cls: ClsLoss,
) -> Result<Var> {
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidInput(format!("lambda {l} outside [0, 1]")));
    }
    let w_i: Vec<T> = lambdas.iter().map(|&l| T::of(l)).collect();
    let w_j: Vec<T> = lambdas.iter().map(|&l| T::of(1.0 - l)).collect();
    let a = tape.weighted_mean(cls_rows(tape, logits, y_i, cls)?, &w_i)?;
    let b = tape.weighted_mean(cls_rows(tape, logits, y_j, cls)?, &w_j)?;
    tape.add(a, b)
}

/// Per-row negative cosine similarity `[B]`. Callers pass the target
/// projection through `stop_gradient` first.
pub fn loss_cos<T: Real>(tape: &Tape<T>, proj_mix: Var, proj_r: Var) -> Result<Var> {
    let cos = tape.cosine_similarity(proj_mix, proj_r)?;
    tape.scale(cos, -T::one())
}

/// Frozen projection of a pre-mixed view: encoder, projector, stop-gradient.
pub fn target_projection<T: Real>(tape: &Tape<T>, model: &KeywordModel, params: &BoundParams, view: Var) -> Result<Var> {
    let e = model.encoder_forward(tape, params, view)?;
    let p = model.projector_forward(tape, params, e)?;
    tape.stop_gradient(p)
}

/// Classification on the mixed view plus, when enabled, the weighted
/// contrastive term between the mixed projection and the frozen projections
/// of the two pre-mixed views.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    model: &KeywordModel,
    params: &BoundParams,
    feats_mix: Var,
    views: Option<(Var, Var)>,
    targets: &BatchTargets<T>,
    settings: &LossSettings,
) -> Result<LossParts> {
    let projections = if settings.contrastive {
        let (view_i, view_j) =
            views.ok_or_else(|| Error::Contract("contrastive loss needs the two pre-mixed views".into()))?;
        Some((
            target_projection(tape, model, params, view_i)?,
            target_projection(tape, model, params, view_j)?,
        ))
    } else {
        None
    };
    total_loss_with_projections(tape, model, params, feats_mix, projections, targets, settings)
}

/// [`total_loss`] with the target projections supplied by the caller.
pub fn total_loss_with_projections<T: Real>(
    tape: &Tape<T>,
    model: &KeywordModel,
    params: &BoundParams,
    feats_mix: Var,
    projections: Option<(Var, Var)>,
    targets: &BatchTargets<T>,
    settings: &LossSettings,
) -> Result<LossParts> {
    let emb = model.encoder_forward(tape, params, feats_mix)?;
    let logits = model.classifier_forward(tape, params, emb)?;
    let l_mix = loss_mix(tape, logits, &targets.y_i, &targets.y_j, &targets.lambdas, settings.cls_loss)?;
    if !settings.contrastive {
        return Ok(LossParts {
            total: l_mix,
            loss_mix: l_mix,
            loss_cos: None,
            logits,
        });
    }
    let (proj_i, proj_j) =
        projections.ok_or_else(|| Error::Contract("contrastive loss needs the two target projections".into()))?;

    let proj_mix = model.projector_forward(tape, params, emb)?;
    let cos_i = loss_cos(tape, proj_mix, proj_i)?;
    let cos_j = loss_cos(tape, proj_mix, proj_j)?;

    let (w_i, w_j): (Vec<T>, Vec<T>) = targets
        .lambdas
        .iter()
        .zip(&targets.is_mixed)
        .map(|(&l, &m)| {
            let (a, b) = lambda_weight(l, m).branch_weights();
            (T::of(a), T::of(b))
        })
        .unzip();
    let cos = tape.add(tape.weighted_mean(cos_i, &w_i)?, tape.weighted_mean(cos_j, &w_j)?)?;
    let cos = tape.scale(cos, T::of(settings.beta))?;
    Ok(LossParts {
        total: tape.add(l_mix, cos)?,
        loss_mix: l_mix,
        loss_cos: Some(cos),
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn one_hot(rows: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[rows.len(), 10]);
        for (r, &k) in rows.iter().enumerate() {
            t.data_mut()[r * 10 + k] = 1.0;
        }
        t
    }

    fn random_logits(rows: usize, r: &mut rng::Rng) -> Tensor<f64> {
        let data = (0..rows * 10).map(|_| r.random_range(-4.0..4.0)).collect();
        Tensor::new(vec![rows, 10], data).unwrap()
    }

    #[test]
    fn lambda_weights_follow_the_three_cases() {
        assert_eq!(lambda_weight(0.7, true), ContrastiveWeights::Pair { w_i: 0.7, w_j: 1.0 - 0.7 });
        assert_eq!(lambda_weight(1.0, false), ContrastiveWeights::Single(1.0));
        let mut r = rng::seeded(3);
        for _ in 0..1000 {
            let l: f64 = r.random();
            assert_eq!(lambda_weight(l, true).total(), 1.0);
        }
    }

    #[test]
    fn loss_mix_with_lambda_one_is_plain_ce() {
        let mut r = rng::seeded(1);
        let tape = Tape::<f64>::new();
        let z = tape.leaf(random_logits(6, &mut r), true).unwrap();
        let y_i = one_hot(&[0, 1, 2, 3, 4, 5]);
        let y_j = one_hot(&[9, 9, 9, 9, 9, 9]);
        let mixed = loss_mix(&tape, z, &y_i, &y_j, &[1.0; 6], ClsLoss::SoftmaxCe).unwrap();
        let plain = tape.softmax_cross_entropy(z, &y_i).unwrap();
        assert_eq!(tape.item(mixed), tape.item(plain));
    }

    #[test]
    fn uniform_logits_give_ln_10() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3, 10])).unwrap();
        let l = loss_mix(&tape, z, &one_hot(&[1, 2, 3]), &one_hot(&[4, 5, 6]), &[0.2, 0.5, 0.9], ClsLoss::SoftmaxCe)
            .unwrap();
        assert!((tape.item(l) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_mix_matches_soft_label_ce() {
        let mut r = rng::seeded(2);
        for _ in 0..1000 {
            let tape = Tape::<f64>::new();
            let z = tape.constant(random_logits(1, &mut r)).unwrap();
            let (i, j) = (r.random_range(0..10), r.random_range(0..10));
            let l: f64 = r.random();
            let mixed = loss_mix(&tape, z, &one_hot(&[i]), &one_hot(&[j]), &[l], ClsLoss::SoftmaxCe).unwrap();
            let mut soft = Tensor::<f64>::zeros(&[1, 10]);
            soft.data_mut()[i] += l;
            soft.data_mut()[j] += 1.0 - l;
            let reference = tape.softmax_cross_entropy(z, &soft).unwrap();
            assert!((tape.item(mixed) - tape.item(reference)).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_mix_rejects_lambda_outside_unit_interval() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 10])).unwrap();
        assert!(loss_mix(&tape, z, &one_hot(&[0]), &one_hot(&[1]), &[1.5], ClsLoss::SoftmaxCe).is_err());
    }

    #[test]
    fn loss_cos_of_identical_and_orthogonal_rows() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 5.0, 0.0]).unwrap()).unwrap();
        let same = loss_cos(&tape, a, a).unwrap();
        assert!(tape.value(same).data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        let mixed = loss_cos(&tape, a, b).unwrap();
        let v = tape.value(mixed).data().to_vec();
        assert!((v[0] + 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn squared_distance_identity_for_unit_vectors() {
        let mut r = rng::seeded(4);
        for _ in 0..200 {
            let mut u: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut v: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
            for x in [&mut u, &mut v] {
                let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                x.iter_mut().for_each(|a| *a /= n);
            }
            let tape = Tape::<f64>::new();
            let a = tape.constant(Tensor::new(vec![1, 16], u.clone()).unwrap()).unwrap();
            let b = tape.constant(Tensor::new(vec![1, 16], v.clone()).unwrap()).unwrap();
            let l = tape.value(loss_cos(&tape, a, b).unwrap()).data()[0];
            let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!((d2 - (2.0 + 2.0 * l)).abs() <= 1e-9);
        }
    }
}
