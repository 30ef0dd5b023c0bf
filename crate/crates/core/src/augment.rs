//! Stochastic augmentations and mixup.
//!
//! Every function takes an explicit generator, so the same generator state
//! always yields the same output.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CLIP_SAMPLES, NUM_CLASSES, SAMPLE_RATE};
use crate::features::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Shift drawn uniformly from `[-shift_ms, shift_ms]`.
    pub shift_ms: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    /// Value written into masked cells.
    pub mask_value: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_ms: 100.0,
            stretch_min: 0.9,
            stretch_max: 1.1,
            time_mask_max: 13,
            freq_mask_max: 7,
            n_time_masks: 1,
            n_freq_masks: 1,
            mask_value: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shift_ms >= 0.0) {
            return Err(Error::InvalidArgument("shift_ms must be >= 0".into()));
        }
        if !(self.stretch_min > 0.0 && self.stretch_min <= self.stretch_max) {
            return Err(Error::InvalidArgument(format!(
                "stretch range [{}, {}] is invalid",
                self.stretch_min, self.stretch_max
            )));
        }
        Ok(())
    }

    pub fn max_shift_samples(&self) -> i64 {
        (self.shift_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as i64
    }
}

/// Symmetric `Beta(alpha, alpha)` and the probability of mixing a slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub mix_ratio: f64,
}

impl Default for BetaParams {
    fn default() -> Self {
        BetaParams {
            alpha: 10.0,
            mix_ratio: 0.5,
        }
    }
}

impl BetaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidArgument(format!(
                "mix_ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        Ok(())
    }
}

/// `Gamma(shape, 1)` by Marsaglia and Tsang; shapes below one are boosted
/// by one and corrected with `U^(1/shape)`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.random();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `lambda ~ Beta(alpha, alpha)` as `X / (X + Y)` with independent gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(params: &BetaParams, rng: &mut R) -> Result<f64> {
    if !(params.alpha > 0.0 && params.alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha {} must be > 0", params.alpha)));
    }
    let x = sample_gamma(params.alpha, rng);
    let y = sample_gamma(params.alpha, rng);
    Ok(x / (x + y))
}

/// `lambda * x_i + (1 - lambda) * x_j`, elementwise.
pub fn mixup_waveforms(x_i: &[f32], x_j: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if x_i.len() != x_j.len() {
        return Err(Error::InvalidInput(format!(
            "waveform lengths differ: {} vs {}",
            x_i.len(),
            x_j.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(x_i
        .iter()
        .zip(x_j)
        .map(|(&a, &b)| (lambda * f64::from(a) + (1.0 - lambda) * f64::from(b)) as f32)
        .collect())
}

fn one_hot_index(y: &[f64]) -> Option<usize> {
    if y.len() != NUM_CLASSES {
        return None;
    }
    let hot: Vec<usize> = (0..y.len()).filter(|&k| y[k] != 0.0).collect();
    match hot[..] {
        [k] if y[k] == 1.0 => Some(k),
        _ => None,
    }
}

/// Soft label `lambda * y_i + (1 - lambda) * y_j` for one-hot inputs.
pub fn mix_labels(y_i: &[f64], y_j: &[f64], lambda: f64) -> Result<[f64; NUM_CLASSES]> {
    let i = one_hot_index(y_i).ok_or_else(|| Error::InvalidInput("y_i is not one-hot".into()))?;
    let j = one_hot_index(y_j).ok_or_else(|| Error::InvalidInput("y_j is not one-hot".into()))?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = [0.0; NUM_CLASSES];
    out[i] += lambda;
    out[j] += 1.0 - lambda;
    Ok(out)
}

/// Moves content by `shift` samples (positive = later), zero-filling the gap.
pub fn shift_by(wave: &[f32], shift: i64) -> Vec<f32> {
    let n = wave.len() as i64;
    (0..n)
        .map(|t| {
            let src = t - shift;
            if (0..n).contains(&src) {
                wave[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn time_shift<R: Rng + ?Sized>(wave: &[f32], max_shift: i64, rng: &mut R) -> Vec<f32> {
    let s = rng.random_range(-max_shift..=max_shift);
    shift_by(wave, s)
}

/// Plays `wave` at speed `factor` by linear interpolation, giving
/// `round(len / factor)` samples before padding/truncating back to `len`.
pub fn stretch_by(wave: &[f32], factor: f64) -> Vec<f32> {
    let n = wave.len();
    let stretched_len = (n as f64 / factor).round() as usize;
    let at = |i: usize| wave.get(i).map_or(0.0, |&v| f64::from(v));
    let mut out: Vec<f32> = (0..stretched_len)
        .map(|m| {
            let pos = m as f64 * factor;
            let base = pos.floor() as usize;
            let frac = pos - base as f64;
            if frac == 0.0 {
                at(base) as f32
            } else {
                ((1.0 - frac) * at(base) + frac * at(base + 1)) as f32
            }
        })
        .collect();
    out.resize(n, 0.0);
    out
}

pub fn stretched_len(n: usize, factor: f64) -> usize {
    (n as f64 / factor).round() as usize
}

pub fn time_stretch<R: Rng + ?Sized>(wave: &[f32], cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let factor = if cfg.stretch_min == cfg.stretch_max {
        cfg.stretch_min
    } else {
        rng.random_range(cfg.stretch_min..=cfg.stretch_max)
    };
    stretch_by(wave, factor)
}

/// Both waveform augmentations in order: shift, then stretch.
pub fn augment_waveform<R: Rng + ?Sized>(wave: &[f32], cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    debug_assert_eq!(wave.len(), CLIP_SAMPLES);
    let shifted = time_shift(wave, cfg.max_shift_samples(), rng);
    time_stretch(&shifted, cfg, rng)
}

/// Sets rows `start..start + width` to `value`.
pub fn mask_rows(feat: &mut Matrix, start: usize, width: usize, value: f64) {
    for r in start..start + width {
        feat.row_mut(r).fill(value);
    }
}

pub fn mask_cols(feat: &mut Matrix, start: usize, width: usize, value: f64) {
    for r in 0..feat.rows {
        feat.row_mut(r)[start..start + width].fill(value);
    }
}

/// Time masks (rows) then frequency masks (columns); each width is uniform
/// on `0..=max` and each start uniform over the valid positions.
pub fn spec_augment<R: Rng + ?Sized>(feat: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Result<Matrix> {
    if cfg.time_mask_max > feat.rows || cfg.freq_mask_max > feat.cols {
        return Err(Error::InvalidArgument(format!(
            "mask maxima ({}, {}) exceed feature shape ({}, {})",
            cfg.time_mask_max, cfg.freq_mask_max, feat.rows, feat.cols
        )));
    }
    let mut out = feat.clone();
    for _ in 0..cfg.n_time_masks {
        let w = rng.random_range(0..=cfg.time_mask_max);
        let t0 = rng.random_range(0..=feat.rows - w);
        mask_rows(&mut out, t0, w, cfg.mask_value);
    }
    for _ in 0..cfg.n_freq_masks {
        let w = rng.random_range(0..=cfg.freq_mask_max);
        let f0 = rng.random_range(0..=feat.cols - w);
        mask_cols(&mut out, f0, w, cfg.mask_value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn moments(alpha: f64, n: usize, seed: u64) -> (f64, f64, f64) {
        let mut r = rng::seeded(seed);
        let params = BetaParams { alpha, mix_ratio: 0.5 };
        let draws: Vec<f64> = (0..n).map(|_| sample_beta(&params, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let central = draws.iter().filter(|x| (0.4..0.6).contains(*x)).count() as f64 / n as f64;
        (mean, var, central)
    }

    #[test]
    fn beta_ten_moments() {
        let (mean, var, _) = moments(10.0, 100_000, 1);
        assert!((0.49..=0.51).contains(&mean), "{mean}");
        let target = 1.0 / 84.0;
        assert!((var - target).abs() <= 0.1 * target, "{var}");
    }

    #[test]
    fn beta_half_is_bimodal() {
        let (_, _, central_half) = moments(0.5, 100_000, 2);
        let (_, _, central_ten) = moments(10.0, 100_000, 2);
        // Beta(0.5,0.5) mass in (0.4,0.6) is 0.128; Beta(10,10) is 0.629.
        assert!(central_half < central_ten);
        assert!((central_half - 0.128).abs() < 0.01, "{central_half}");
    }

    #[test]
    fn beta_rejects_nonpositive_alpha() {
        let mut r = rng::seeded(0);
        for alpha in [0.0, -1.0, f64::NAN] {
            let p = BetaParams { alpha, mix_ratio: 0.5 };
            assert!(matches!(sample_beta(&p, &mut r), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn beta_deterministic_under_seed() {
        let p = BetaParams::default();
        let a = sample_beta(&p, &mut rng::seeded(4)).unwrap();
        let b = sample_beta(&p, &mut rng::seeded(4)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let x: Vec<f32> = (0..16000).map(|i| (i as f32 * 0.01).sin()).collect();
        let y: Vec<f32> = (0..16000).map(|i| (i as f32 * 0.03).cos()).collect();
        assert_eq!(mixup_waveforms(&x, &y, 1.0).unwrap(), x);
        let ones = vec![1.0f32; 16000];
        let zeros = vec![0.0f32; 16000];
        assert!(mixup_waveforms(&ones, &zeros, 0.5).unwrap().iter().all(|&v| v == 0.5));
        assert!(mixup_waveforms(&x, &y[..10], 0.5).is_err());
    }

    #[test]
    fn mixup_matches_direct_recomputation() {
        let mut r = rng::seeded(8);
        let x: Vec<f32> = (0..16000).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..16000).map(|_| r.random_range(-1.0..1.0)).collect();
        let mixed = mixup_waveforms(&x, &y, 0.3).unwrap();
        for t in 0..16000 {
            let want = 0.3 * f64::from(x[t]) + 0.7 * f64::from(y[t]);
            assert!((f64::from(mixed[t]) - want).abs() <= 1e-12 + f64::from(f32::EPSILON) * want.abs());
        }
    }

    #[test]
    fn mix_labels_cases() {
        let y2 = crate::dataset::KeywordLabel::new(2).unwrap().one_hot();
        let y5 = crate::dataset::KeywordLabel::new(5).unwrap().one_hot();
        assert_eq!(mix_labels(&y2, &y2, 0.3).unwrap(), y2);
        let m = mix_labels(&y2, &y5, 0.7).unwrap();
        let mut want = [0.0; 10];
        want[2] = 0.7;
        want[5] = 0.30000000000000004; // 1 - 0.7 in binary floating point
        assert_eq!(m, want);
        let soft = [0.5; 10];
        assert!(mix_labels(&soft, &y2, 0.5).is_err());
    }

    #[test]
    fn mix_labels_sum_to_one() {
        let mut r = rng::seeded(3);
        for _ in 0..1000 {
            let lambda: f64 = r.random();
            let i = r.random_range(0..10);
            let j = r.random_range(0..10);
            let yi = crate::dataset::KeywordLabel::new(i).unwrap().one_hot();
            let yj = crate::dataset::KeywordLabel::new(j).unwrap().one_hot();
            let m = mix_labels(&yi, &yj, lambda).unwrap();
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(m.iter().filter(|v| **v != 0.0).count() <= 2);
        }
    }

    #[test]
    fn shift_index_oracle() {
        let x: Vec<f32> = (0..16000).map(|i| i as f32 + 1.0).collect();
        assert_eq!(shift_by(&x, 0), x);
        let right = shift_by(&x, 1600);
        for t in 0..16000 {
            let want = if t >= 1600 { x[t - 1600] } else { 0.0 };
            assert_eq!(right[t], want);
        }
        let left = shift_by(&x, -1600);
        for t in 0..16000 {
            let want = if t < 14400 { x[t + 1600] } else { 0.0 };
            assert_eq!(left[t], want);
        }
        assert_eq!(AugmentConfig::default().max_shift_samples(), 1600);
    }

    #[test]
    fn stretch_lengths_and_identity() {
        let mut r = rng::seeded(1);
        let x: Vec<f32> = (0..16000).map(|_| r.random_range(-1.0..1.0)).collect();
        let same = stretch_by(&x, 1.0);
        for (a, b) in same.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(stretched_len(16000, 0.9), 17778);
        assert_eq!(stretched_len(16000, 1.1), 14545);

        let fast = stretch_by(&x, 1.1);
        assert_eq!(fast.len(), 16000);
        assert!(fast[14545..].iter().all(|&v| v == 0.0));
        assert_eq!(fast[10], x[11]);

        let slow = stretch_by(&x, 0.9);
        assert_eq!(slow.len(), 16000);
        assert_eq!(slow[10], x[9]);
        // m = 1 -> position 0.9 between x[0] and x[1]
        let want = 0.1 * f64::from(x[0]) + 0.9 * f64::from(x[1]);
        assert!((f64::from(slow[1]) - want).abs() < 1e-6);
    }

    #[test]
    fn spec_augment_zero_max_is_identity() {
        let mut feat = Matrix::zeros(98, 64);
        for (i, v) in feat.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let cfg = AugmentConfig {
            time_mask_max: 0,
            freq_mask_max: 0,
            ..AugmentConfig::default()
        };
        let out = spec_augment(&feat, &cfg, &mut rng::seeded(0)).unwrap();
        assert_eq!(out, feat);
    }

    #[test]
    fn spec_augment_full_width_time_mask() {
        let mut feat = Matrix::zeros(98, 64);
        feat.data.fill(5.0);
        // Search for a seed whose first draw is the maximal width 13.
        let cfg = AugmentConfig {
            n_freq_masks: 0,
            ..AugmentConfig::default()
        };
        let seed = (0..10_000u64)
            .find(|&s| rng::seeded(s).random_range(0..=13usize) == 13)
            .unwrap();
        let out = spec_augment(&feat, &cfg, &mut rng::seeded(seed)).unwrap();
        let masked: Vec<usize> = (0..98).filter(|&r| out.row(r).iter().all(|&v| v == 0.0)).collect();
        assert_eq!(masked.len(), 13);
        assert!(masked.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn spec_augment_rejects_oversized_mask() {
        let feat = Matrix::zeros(98, 64);
        let cfg = AugmentConfig {
            freq_mask_max: 65,
            ..AugmentConfig::default()
        };
        assert!(spec_augment(&feat, &cfg, &mut rng::seeded(0)).is_err());
    }

    proptest! {
        #[test]
        fn mixup_linear_in_power_of_two_scale(seed in 0u64..500, lambda in 0.0f64..=1.0, e in -4i32..4) {
            let mut r = rng::seeded(seed);
            let x: Vec<f32> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f32> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = 2f32.powi(e);
            let xs: Vec<f32> = x.iter().map(|v| v * a).collect();
            let ys: Vec<f32> = y.iter().map(|v| v * a).collect();
            let lhs = mixup_waveforms(&xs, &ys, lambda).unwrap();
            let rhs: Vec<f32> = mixup_waveforms(&x, &y, lambda).unwrap().iter().map(|v| v * a).collect();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn mixup_swap_symmetry(seed in 0u64..500, lambda in 0.0f64..=1.0) {
            let mut r = rng::seeded(seed);
            let x: Vec<f32> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f32> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = mixup_waveforms(&x, &y, lambda).unwrap();
            let b = mixup_waveforms(&y, &x, 1.0 - lambda).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 2.0 * f32::EPSILON);
            }
        }

        #[test]
        fn augmentations_preserve_shape_and_determinism(seed in 0u64..200) {
            let cfg = AugmentConfig::default();
            let x: Vec<f32> = (0..16000).map(|i| ((i * 7919) % 200) as f32 / 100.0 - 1.0).collect();
            let a = augment_waveform(&x, &cfg, &mut rng::seeded(seed));
            let b = augment_waveform(&x, &cfg, &mut rng::seeded(seed));
            prop_assert_eq!(a.len(), 16000);
            prop_assert_eq!(&a, &b);

            let mut feat = Matrix::zeros(98, 64);
            feat.data.fill(1.0);
            let cfg = AugmentConfig { n_time_masks: 2, n_freq_masks: 3, ..cfg };
            let out = spec_augment(&feat, &cfg, &mut rng::seeded(seed)).unwrap();
            prop_assert_eq!((out.rows, out.cols), (98, 64));
            let full_rows = (0..98).filter(|&r| out.row(r).iter().all(|&v| v == 0.0)).count();
            let full_cols = (0..64).filter(|&c| (0..98).all(|r| out.get(r, c) == 0.0)).count();
            prop_assert!(full_rows <= 2 * 13);
            prop_assert!(full_cols <= 3 * 7);
        }
    }
}
