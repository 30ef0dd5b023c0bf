use rand::seq::index::sample;

use super::{BoundParams, ParameterSet, Tape, Var};
use crate::{rng, Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check a random subset of this many coordinates when the model is larger.
    pub max_coords: Option<usize>,
    /// Smallest denominator of the relative error. Derivatives far below
    /// this are compared in absolute terms, where difference quotients are
    /// dominated by rounding in `f`.
    pub denom_floor: f64,
    pub seed: u64,
    /// Passed to every tape built by the check; see [`Tape::with_sabotage`].
    pub sabotage: Option<super::OpKind>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-5,
            max_coords: None,
            denom_floor: 1e-6,
            seed: 0,
            sabotage: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
}

/// Compares reverse-mode gradients of a scalar computation against central
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, denom_floor)`.
pub fn finite_difference_check<F>(f: F, params: &ParameterSet<f64>, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&Tape<f64>, &BoundParams) -> Result<Var>,
{
    finite_difference_check_with(&f, &f, params, opts)
}

/// Like [`finite_difference_check`], but the differences are taken of
/// `numeric`, which must agree with `analytic` at `params`. Computations with
/// stop-gradients use this: `numeric` holds the stopped branches fixed at
/// their values at `params`.
pub fn finite_difference_check_with<A, N>(
    analytic: A,
    numeric: N,
    params: &ParameterSet<f64>,
    opts: &FdOptions,
) -> Result<FdReport>
where
    A: Fn(&Tape<f64>, &BoundParams) -> Result<Var>,
    N: Fn(&Tape<f64>, &BoundParams) -> Result<Var>,
{
    let eval = |p: &ParameterSet<f64>| -> Result<f64> {
        let tape = Tape::with_sabotage(opts.sabotage);
        let bound = tape.bind(p)?;
        let loss = numeric(&tape, &bound)?;
        Ok(tape.item(loss))
    };

    let tape = Tape::with_sabotage(opts.sabotage);
    let bound = tape.bind(params)?;
    let loss = analytic(&tape, &bound)?;
    let base = tape.item(loss);
    let grads = tape.backward(loss)?.for_params(&bound, params);
    drop(tape);

    let again = eval(params)?;
    if (again - base).abs() > 1e-12 * base.abs().max(1.0) {
        return Err(Error::Contract(format!(
            "numeric computation disagrees with the analytic one at the base point: {base} vs {again}"
        )));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(limit) if coords.len() > limit => {
            let mut picks = sample(&mut rng::seeded(opts.seed), coords.len(), limit).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        coords_checked: chosen.len(),
        worst: None,
        worst_values: (0.0, 0.0),
    };
    let mut probe = params.clone();
    for (p, i) in chosen {
        let name = params.names()[p].clone();
        let orig = params.get(&name).expect("known name").data()[i];
        let set = |probe: &mut ParameterSet<f64>, v: f64| {
            probe.get_mut(&name).expect("known name").data_mut()[i] = v;
        };
        set(&mut probe, orig + opts.h);
        let plus = eval(&probe)?;
        set(&mut probe, orig - opts.h);
        let minus = eval(&probe)?;
        set(&mut probe, orig);

        let numeric = (plus - minus) / (2.0 * opts.h);
        let analytic = grads.get(&name).expect("known name").data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(opts.denom_floor);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), i));
            report.worst_values = (analytic, numeric);
        }
    }
    Ok(report)
}
