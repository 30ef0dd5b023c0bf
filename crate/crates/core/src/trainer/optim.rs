use super::TrainConfig;
use crate::autodiff::{ParameterSet, Real};
use crate::{Error, Result};

/// Learning rate for a 1-based epoch: `lr0 * rate^d`, where `d` counts the
/// decay points `start, start + every, ...` that are `<= min(epoch, end)`.
pub fn lr_at_epoch(epoch: u32, cfg: &TrainConfig) -> f64 {
    let last = epoch.min(cfg.decay_end_epoch);
    let points = if last < cfg.decay_start_epoch {
        0
    } else {
        (last - cfg.decay_start_epoch) / cfg.decay_every + 1
    };
    cfg.lr0 * cfg.decay_rate.powi(points as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    /// Number of updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_config(params: &ParameterSet<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry must
/// not exist: `grads` has to mirror `params` exactly.
pub fn adam_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.m)?;
    params.check_same_layout(&state.v)?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate {lr} must be finite and >= 0")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m_iter = state.m.iter_mut();
    let v_iter = state.v.iter_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(m_iter).zip(v_iter) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let g = g.f64();
            let mn = b1 * m.f64() + (1.0 - b1) * g;
            let vn = b2 * v.f64() + (1.0 - b2) * g * g;
            *m = T::of(mn);
            *v = T::of(vn);
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *p = T::of(p.f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(values: Vec<f64>) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![values.len()], values).unwrap()).unwrap();
        p
    }

    #[test]
    fn schedule_matches_known_points() {
        let cfg = TrainConfig::default();
        for e in 1..=4 {
            assert_eq!(lr_at_epoch(e, &cfg), 5e-3);
        }
        assert!((lr_at_epoch(5, &cfg) - 4.25e-3).abs() < 1e-15);
        assert!((lr_at_epoch(8, &cfg) - 4.25e-3).abs() < 1e-15);
        assert!((lr_at_epoch(13, &cfg) - 3.070_625e-3).abs() < 1e-12);
        assert_eq!(lr_at_epoch(70, &cfg), lr_at_epoch(69, &cfg));
        assert_eq!(lr_at_epoch(200, &cfg), lr_at_epoch(69, &cfg));
        assert_eq!(lr_at_epoch(69, &cfg), 5e-3 * 0.85f64.powi(17));
        for e in 1..200 {
            assert!(lr_at_epoch(e + 1, &cfg) <= lr_at_epoch(e, &cfg));
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = single(vec![1.0, -2.0, 0.5]);
        let g = single(vec![3.0, -0.01, 1e3]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut s, 1e-2).unwrap();
        let got = p.get("w").unwrap().data();
        for (after, (before, sign)) in got.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((before - after - 1e-2 * sign).abs() < 1e-7);
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = single(vec![1.0, 2.0]);
        let g = single(vec![0.0, 0.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 5e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    fn scalar_adam_oracle(steps: usize) -> Vec<f64> {
        let (mut th, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps as i32 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= 5e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            out.push(th);
        }
        out
    }

    #[test]
    fn converges_on_a_quadratic() {
        let oracle = scalar_adam_oracle(1000);
        // Frozen from the scalar recurrence: the slow second moment keeps the
        // steps small once the gradient shrinks.
        assert!((oracle[499] - 0.005_631_02).abs() < 1e-8);
        assert_eq!(oracle.iter().position(|x| x.abs() < 1e-3), Some(598));

        let mut p = single(vec![1.0; 4]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        for step in 0..1000 {
            let g = single(p.get("w").unwrap().data().iter().map(|&x| 2.0 * x).collect());
            adam_step(&mut p, &g, &mut s, 5e-3).unwrap();
            for &x in p.get("w").unwrap().data() {
                assert!((x - oracle[step]).abs() < 1e-12, "step {step}");
            }
        }
        assert!(p.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn layout_mismatch_is_a_contract_error() {
        let mut p = single(vec![1.0, 2.0]);
        let g = single(vec![0.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        assert!(matches!(adam_step(&mut p, &g, &mut s, 1e-3), Err(Error::Contract(_))));
    }
}
