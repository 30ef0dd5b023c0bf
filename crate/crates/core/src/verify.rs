//! Self-checks behind `cosmix verify`: gradient checks of every autodiff
//! primitive and of the full training loss, loss identities, sampler
//! moments and the spectral front end against a direct DFT.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;

use crate::augment::{sample_beta, BetaParams};
use crate::autodiff::{
    finite_difference_check, finite_difference_check_with, BoundParams, FdOptions, OpKind, ParameterSet, Tape,
    Tensor, Var,
};
use crate::features::{FBank, N_FRAMES, N_MELS};
use crate::model::{init_params, KeywordModel, ModelConfig};
use crate::trainer::{
    lambda_weight, loss_cos, loss_mix, target_projection, total_loss, total_loss_with_projections, BatchTargets,
    ClsLoss, LossSettings,
};
use crate::{rng, Result};

/// Bound on the relative error between reverse-mode and central-difference gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
pub const DFT_TOLERANCE: f64 = 1e-9;
pub const BETA_MEAN_RANGE: (f64, f64) = (0.49, 0.51);
/// Allowed relative deviation of the sample variance from `1/84`.
pub const BETA_VAR_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// The suite's error measure (relative error, absolute error or deviation).
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Corrupt the backward rule of one primitive.
    pub sabotage: Option<OpKind>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed)
    }

    pub fn get(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{} {:<34} max_err={:.3e} tol={:.1e}{}\n",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.max_error,
                s.tolerance,
                if s.detail.is_empty() { String::new() } else { format!("  {}", s.detail) }
            ));
        }
        out
    }
}

fn judged(name: &str, outcome: Result<(f64, String)>, tolerance: f64) -> SuiteResult {
    match outcome {
        Ok((err, detail)) => SuiteResult {
            name: name.to_string(),
            passed: err <= tolerance,
            max_error: err,
            tolerance,
            detail,
        },
        Err(e) => SuiteResult {
            name: name.to_string(),
            passed: false,
            max_error: f64::INFINITY,
            tolerance,
            detail: e.to_string(),
        },
    }
}

fn random(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero, so relu kinks stay out of the difference stencil.
fn away_from_zero(r: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random(r, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Contracts any tensor to a scalar with fixed pseudo-random weights.
fn project(tape: &Tape<f64>, v: Var, key: u64) -> Result<Var> {
    let n: usize = tape.shape(v).iter().product();
    let mut r = rng::keyed(&[key], 11);
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let flat = tape.reshape(v, &[n])?;
    tape.weighted_mean(flat, &w)
}

fn params_of(items: Vec<(&str, Tensor<f64>)>) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    for (name, t) in items {
        p.insert(name, t).expect("distinct names");
    }
    p
}

fn fd_detail(report: &crate::autodiff::FdReport) -> String {
    match &report.worst {
        Some((name, i)) => format!(
            "{} coords, worst {name}[{i}] ({:.6e} vs {:.6e})",
            report.coords_checked, report.worst_values.0, report.worst_values.1
        ),
        None => format!("{} coords", report.coords_checked),
    }
}

fn grad_suite<F>(name: &str, params: ParameterSet<f64>, opts: &VerifyOptions, f: F) -> SuiteResult
where
    F: Fn(&Tape<f64>, &BoundParams) -> Result<Var>,
{
    let fd = FdOptions {
        sabotage: opts.sabotage,
        seed: opts.seed,
        ..FdOptions::default()
    };
    let outcome = finite_difference_check(f, &params, &fd).map(|rep| (rep.max_rel_err, fd_detail(&rep)));
    judged(name, outcome, GRAD_TOLERANCE)
}

fn primitive_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut r = rng::keyed(&[opts.seed], 12);
    let mut out = Vec::new();

    let p = params_of(vec![
        ("x", random(&mut r, &[3, 4], -1.0, 1.0)),
        ("w", random(&mut r, &[4, 5], -1.0, 1.0)),
        ("b", random(&mut r, &[5], -1.0, 1.0)),
    ]);
    out.push(grad_suite("grad.dense", p, opts, |t, b| {
        let y = t.dense(b.get("x")?, b.get("w")?, b.get("b")?)?;
        project(t, y, 1)
    }));

    let p = params_of(vec![
        ("x", random(&mut r, &[2, 2, 7, 6], -1.0, 1.0)),
        ("k", random(&mut r, &[3, 2, 3, 3], -1.0, 1.0)),
        ("b", random(&mut r, &[3], -1.0, 1.0)),
    ]);
    out.push(grad_suite("grad.conv2d", p, opts, |t, b| {
        let strided = t.conv2d(b.get("x")?, b.get("k")?, Some(b.get("b")?), 2, 1)?;
        let dense = t.conv2d(b.get("x")?, b.get("k")?, None, 1, 0)?;
        t.add(project(t, strided, 2)?, project(t, dense, 3)?)
    }));

    let p = params_of(vec![("x", away_from_zero(&mut r, &[3, 5]))]);
    out.push(grad_suite("grad.relu", p, opts, |t, b| {
        let y = t.relu(b.get("x")?)?;
        project(t, y, 4)
    }));

    let p = params_of(vec![("x", random(&mut r, &[2, 3, 4, 5], -1.0, 1.0))]);
    out.push(grad_suite("grad.global_avg_pool", p, opts, |t, b| {
        let y = t.global_avg_pool(b.get("x")?)?;
        project(t, y, 5)
    }));

    let p = params_of(vec![("x", random(&mut r, &[2, 6], -1.0, 1.0))]);
    out.push(grad_suite("grad.reshape", p, opts, |t, b| {
        let y = t.reshape(b.get("x")?, &[3, 4])?;
        project(t, y, 6)
    }));

    let p = params_of(vec![("x", random(&mut r, &[3, 5], -1.0, 1.0))]);
    out.push(grad_suite("grad.l2_normalize", p, opts, |t, b| {
        let y = t.l2_normalize(b.get("x")?)?;
        project(t, y, 7)
    }));

    let p = params_of(vec![
        ("a", random(&mut r, &[3, 5], -1.0, 1.0)),
        ("b", random(&mut r, &[3, 5], -1.0, 1.0)),
    ]);
    out.push(grad_suite("grad.row_dot", p.clone(), opts, |t, b| {
        let y = t.row_dot(b.get("a")?, b.get("b")?)?;
        project(t, y, 8)
    }));
    out.push(grad_suite("grad.cosine_similarity", p, opts, |t, b| {
        let y = t.cosine_similarity(b.get("a")?, b.get("b")?)?;
        project(t, y, 9)
    }));

    let mut soft = random(&mut r, &[4, 10], 0.0, 1.0);
    for row in soft.data_mut().chunks_mut(10) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let p = params_of(vec![("z", random(&mut r, &[4, 10], -3.0, 3.0))]);
    out.push(grad_suite("grad.softmax_cross_entropy", p, opts, |t, b| {
        let y = t.softmax_cross_entropy_rows(b.get("z")?, &soft)?;
        project(t, y, 10)
    }));

    let bce_target = random(&mut r, &[4, 10], 0.0, 1.0);
    let p = params_of(vec![("z", random(&mut r, &[4, 10], -3.0, 3.0))]);
    out.push(grad_suite("grad.sigmoid_bce", p, opts, |t, b| {
        let y = t.sigmoid_bce_rows(b.get("z")?, &bce_target)?;
        project(t, y, 11)
    }));

    // sum(x * sg(x)): the analytic gradient is x; the differences hold sg(x) fixed.
    let x0 = random(&mut r, &[6], -1.0, 1.0);
    let fd = FdOptions {
        sabotage: opts.sabotage,
        seed: opts.seed,
        ..FdOptions::default()
    };
    let p = params_of(vec![("x", x0.clone())]);
    let outcome = finite_difference_check_with(
                |t: &Tape<f64>, b: &BoundParams| {
                    let x = b.get("x")?;
                    let y = t.mul(x, t.stop_gradient(x)?)?;
                    t.sum(y)
                },
                |t: &Tape<f64>, b: &BoundParams| {
                    let y = t.mul(b.get("x")?, t.constant(x0.clone())?)?;
                    t.sum(y)
                },
                &p,
                &fd,
            )
        .map(|rep| (rep.max_rel_err, fd_detail(&rep)));
    out.push(judged("grad.stop_gradient", outcome, GRAD_TOLERANCE));

    let p = params_of(vec![
        ("a", random(&mut r, &[2, 3], -1.0, 1.0)),
        ("b", random(&mut r, &[2, 3], -1.0, 1.0)),
    ]);
    out.push(grad_suite("grad.add", p.clone(), opts, |t, b| {
        let y = t.add(b.get("a")?, b.get("b")?)?;
        project(t, y, 12)
    }));
    out.push(grad_suite("grad.mul", p, opts, |t, b| {
        let y = t.mul(b.get("a")?, b.get("b")?)?;
        project(t, y, 13)
    }));

    let p = params_of(vec![("x", random(&mut r, &[5], -1.0, 1.0))]);
    out.push(grad_suite("grad.scale", p.clone(), opts, |t, b| {
        let y = t.scale(b.get("x")?, -1.7)?;
        project(t, y, 14)
    }));
    out.push(grad_suite("grad.sum", p.clone(), opts, |t, b| {
        let x = b.get("x")?;
        t.sum(t.mul(x, x)?)
    }));
    out.push(grad_suite("grad.mean", p.clone(), opts, |t, b| {
        let x = b.get("x")?;
        t.mean(t.mul(x, x)?)
    }));
    let w = [0.3, -1.2, 0.0, 2.5, 0.7];
    out.push(grad_suite("grad.weighted_mean", p, opts, |t, b| {
        let x = b.get("x")?;
        t.weighted_mean(t.mul(x, x)?, &w)
    }));
    out
}

/// A model small enough to difference every parameter.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: vec![2, 3],
        init_seed: 5,
        ..ModelConfig::default()
    }
}

fn cosmix_loss_suite(opts: &VerifyOptions) -> SuiteResult {
    let outcome = (|| -> Result<(f64, String)> {
        let cfg = tiny_model_config();
        let model = KeywordModel::new(cfg.clone())?;
        let mut params = init_params(&cfg)?.cast::<f64>();
        let mut r = rng::keyed(&[opts.seed], 13);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += r.random_range(-0.05..0.05);
            }
        }
        let shape = [4, 12, 10];
        let (mix, view_i, view_j) = (
            random(&mut r, &shape, -2.0, 2.0),
            random(&mut r, &shape, -2.0, 2.0),
            random(&mut r, &shape, -2.0, 2.0),
        );
        let one_hot = |labels: &[usize]| {
            let mut t = Tensor::<f64>::zeros(&[labels.len(), 10]);
            for (row, &k) in labels.iter().enumerate() {
                t.data_mut()[row * 10 + k] = 1.0;
            }
            t
        };
        let targets = BatchTargets {
            y_i: one_hot(&[1, 4, 7, 7]),
            y_j: one_hot(&[3, 0, 7, 2]),
            lambdas: vec![0.3, 0.65, 1.0, 1.0],
            is_mixed: vec![true, true, false, false],
        };
        // Rows 2 and 3 are unmixed: their j-label must equal the i-label.
        let targets = BatchTargets {
            y_j: {
                let mut y = targets.y_j.clone();
                y.data_mut()[30..40].copy_from_slice(&targets.y_i.data()[30..40]);
                y
            },
            ..targets
        };
        let settings = LossSettings {
            beta: 0.5,
            cls_loss: ClsLoss::SoftmaxCe,
            contrastive: true,
        };

        let frozen = {
            let tape = Tape::<f64>::new();
            let bound = tape.bind(&params)?;
            let pi = target_projection(&tape, &model, &bound, tape.constant(view_i.clone())?)?;
            let pj = target_projection(&tape, &model, &bound, tape.constant(view_j.clone())?)?;
            let values = (tape.value(pi).clone(), tape.value(pj).clone());
            values
        };
        let fd = FdOptions {
            sabotage: opts.sabotage,
            seed: opts.seed,
            ..FdOptions::default()
        };
        let report = finite_difference_check_with(
            |t: &Tape<f64>, b: &BoundParams| {
                let x = t.constant(mix.clone())?;
                let views = Some((t.constant(view_i.clone())?, t.constant(view_j.clone())?));
                Ok(total_loss(t, &model, b, x, views, &targets, &settings)?.total)
            },
            |t: &Tape<f64>, b: &BoundParams| {
                let x = t.constant(mix.clone())?;
                let proj = Some((t.constant(frozen.0.clone())?, t.constant(frozen.1.clone())?));
                Ok(total_loss_with_projections(t, &model, b, x, proj, &targets, &settings)?.total)
            },
            &params,
            &fd,
        )?;
        Ok((report.max_rel_err, fd_detail(&report)))
    })();
    judged("grad.cosmix_loss", outcome, GRAD_TOLERANCE)
}

fn identity_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut out = Vec::new();

    let outcome = (|| -> Result<(f64, String)> {
        let mut r = rng::keyed(&[opts.seed], 14);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let tape = Tape::<f64>::new();
            let z = tape.constant(random(&mut r, &[1, 10], -5.0, 5.0))?;
            let (i, j): (usize, usize) = (r.random_range(0..10), r.random_range(0..10));
            let lambda: f64 = r.random();
            let mut y_i = Tensor::<f64>::zeros(&[1, 10]);
            let mut y_j = Tensor::<f64>::zeros(&[1, 10]);
            y_i.data_mut()[i] = 1.0;
            y_j.data_mut()[j] = 1.0;
            let mut soft = Tensor::<f64>::zeros(&[1, 10]);
            soft.data_mut()[i] += lambda;
            soft.data_mut()[j] += 1.0 - lambda;
            let a = tape.item(loss_mix(&tape, z, &y_i, &y_j, &[lambda], ClsLoss::SoftmaxCe)?);
            let b = tape.item(tape.softmax_cross_entropy(z, &soft)?);
            worst = worst.max((a - b).abs());
        }
        Ok((worst, "1000 cases".into()))
    })();
    out.push(judged("identity.mix_equals_soft_label_ce", outcome, IDENTITY_TOLERANCE));

    let outcome = (|| -> Result<(f64, String)> {
        let mut r = rng::keyed(&[opts.seed], 15);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let dim = r.random_range(2..130);
            let unit = |r: &mut rng::Rng| {
                let mut v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                v
            };
            let (u, v) = (unit(&mut r), unit(&mut r));
            let tape = Tape::<f64>::new();
            let a = tape.constant(Tensor::new(vec![1, dim], u.clone())?)?;
            let b = tape.constant(Tensor::new(vec![1, dim], v.clone())?)?;
            let l = tape.value(loss_cos(&tape, a, b)?).data()[0];
            let d2: f64 = u.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
            worst = worst.max((d2 - (2.0 + 2.0 * l)).abs());
        }
        Ok((worst, "1000 unit pairs".into()))
    })();
    out.push(judged("identity.squared_distance_vs_cosine", outcome, IDENTITY_TOLERANCE));

    let outcome = (|| -> Result<(f64, String)> {
        let mut r = rng::keyed(&[opts.seed], 16);
        let mut worst = 0.0f64;
        let mut cases = 0;
        for alpha in [0.5, 1.0, 10.0] {
            let params = BetaParams { alpha, mix_ratio: 1.0 };
            for _ in 0..1000 {
                let lambda = sample_beta(&params, &mut r)?;
                worst = worst.max((lambda_weight(lambda, true).total() - 1.0).abs());
                cases += 1;
            }
        }
        worst = worst.max((lambda_weight(1.0, false).total() - 1.0).abs());
        Ok((worst, format!("{cases} mixed rows")))
    })();
    out.push(judged("identity.contrastive_weights_sum_to_one", outcome, 0.0));
    out
}

fn beta_suite(opts: &VerifyOptions) -> SuiteResult {
    let outcome = (|| -> Result<(f64, String)> {
        let mut r = rng::keyed(&[opts.seed], 17);
        let params = BetaParams::default();
        let n = 100_000;
        let draws = (0..n).map(|_| sample_beta(&params, &mut r)).collect::<Result<Vec<_>>>()?;
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let var_dev = (var - 1.0 / 84.0).abs() * 84.0;
        let mean_ok = (BETA_MEAN_RANGE.0..=BETA_MEAN_RANGE.1).contains(&mean);
        let err = if mean_ok { var_dev } else { f64::INFINITY };
        Ok((err, format!("mean {mean:.5}, var {var:.6} (1/84 = {:.6})", 1.0 / 84.0)))
    })();
    judged("sampler.beta_10_10_moments", outcome, BETA_VAR_TOLERANCE)
}

/// Power spectrum of one frame by the defining sum, with its own window.
pub fn naive_power_spectrum(frame: &[f32], n_fft: usize) -> Vec<f64> {
    let n_win = frame.len();
    let x: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(n, &s)| f64::from(s) * (0.5 - 0.5 * (2.0 * PI * n as f64 / n_win as f64).cos()))
        .collect();
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let phase = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                re += v * phase.cos();
                im -= v * phase.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn feature_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let fbank = FBank::standard();
    let spec = fbank.spec().clone();
    let mut r = rng::keyed(&[opts.seed], 18);
    let waves: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..crate::dataset::CLIP_SAMPLES).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .collect();

    let outcome = (|| -> Result<(f64, String)> {
        let mut worst = 0.0f64;
        let mut frames = 0;
        for wave in &waves {
            let power = fbank.stft_power(wave)?;
            for _ in 0..4 {
                let t = r.random_range(0..power.rows);
                let start = t * spec.hop_length;
                let oracle = naive_power_spectrum(&wave[start..start + spec.win_length], spec.n_fft);
                let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let diff = power.row(t).iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                worst = worst.max(diff / scale);
                frames += 1;
            }
        }
        Ok((worst, format!("{frames} frames, error relative to the frame's peak bin")))
    })();
    let dft = judged("features.fft_matches_direct_dft", outcome, DFT_TOLERANCE);

    let outcome = (|| -> Result<(f64, String)> {
        let mut bad = 0.0;
        for wave in &waves {
            let f = fbank.log_fbank(wave)?;
            if (f.rows, f.cols) != (N_FRAMES, N_MELS) || !f.data.iter().all(|v| v.is_finite()) {
                bad += 1.0;
            }
        }
        Ok((bad, format!("{} inputs, expected {N_FRAMES}x{N_MELS}", waves.len())))
    })();
    vec![dft, judged("features.log_fbank_shape", outcome, 0.0)]
}

/// Runs every suite once, in a fixed order.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut suites = primitive_suites(opts);
    suites.push(cosmix_loss_suite(opts));
    suites.extend(identity_suites(opts));
    suites.push(beta_suite(opts));
    suites.extend(feature_suites(opts));
    VerifyReport {
        suites,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_dft_of_a_pure_tone_peaks_at_its_bin() {
        let frame: Vec<f32> = (0..400).map(|n| (2.0 * PI * 32.0 * n as f64 / 512.0).cos() as f32).collect();
        let p = naive_power_spectrum(&frame, 512);
        assert_eq!(p.len(), 257);
        let peak = p.iter().enumerate().fold(0, |best, (k, &v)| if v > p[best] { k } else { best });
        assert_eq!(peak, 32);
    }

    #[test]
    fn report_marks_failures() {
        let report = VerifyReport {
            suites: vec![
                judged("a", Ok((0.5, String::new())), 1.0),
                judged("b", Ok((2.0, String::new())), 1.0),
            ],
            seconds: 0.0,
        };
        assert!(!report.passed());
        assert_eq!(report.failures().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["b"]);
        assert!(report.to_text().starts_with("PASS a"));
    }
}
