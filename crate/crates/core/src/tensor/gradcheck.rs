use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Number of coordinates to compare; every coordinate when the store is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates redrawn because a perturbation crossed a kink.
    pub redrawn: usize,
}

struct Eval<T: Real> {
    loss: f64,
    kinks: Vec<bool>,
    tape: Tape<T>,
    bound: Bound,
}

fn evaluate<T, F>(params: &ParamStore<T>, f: &mut F, trainable: bool) -> Result<Eval<T>>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, trainable);
    let out = f(&mut tape, &bound)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check", tape.shape(out), &[1]));
    }
    let loss = tape.scalar(out).to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    if trainable {
        tape.backward(out)?;
    }
    Ok(Eval {
        loss,
        kinks: tape.kink_signature(),
        tape,
        bound,
    })
}

/// Compare analytic gradients of a scalar loss against central differences.
///
/// Coordinates whose ±h perturbation changes the branch of any piecewise
/// operator (relu, min2, clamp) are redrawn, since finite differences are
/// meaningless across a kink.
pub fn finite_difference_check<T, F>(params: &mut ParamStore<T>, mut loss_fn: F, opts: &FdOptions) -> Result<FdReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &Bound) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    let base = evaluate(params, &mut loss_fn, true)?;
    let analytic: Vec<Vec<f64>> = base
        .bound
        .vars()
        .iter()
        .map(|&v| match base.tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
            None => vec![0.0; base.tape.value(v).len()],
        })
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.len()).map(move |ci| (pi, ci)))
        .collect();
    if coords.is_empty() {
        return Ok(FdReport {
            max_rel_error: 0.0,
            checked: 0,
            redrawn: 0,
        });
    }
    let exhaustive = coords.len() <= opts.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        redrawn: 0,
    };
    let target = if exhaustive { coords.len() } else { opts.samples };
    let max_attempts = if exhaustive { coords.len() } else { target * 50 };
    let mut attempt = 0;
    while report.checked < target && attempt < max_attempts {
        let (pi, ci) = if exhaustive {
            coords[attempt]
        } else {
            coords[rng.gen_range(0..coords.len())]
        };
        attempt += 1;
        let id = super::params::ParamId(pi);
        let orig = params.get(id).value[ci];
        let h = T::lit(opts.h);
        params.get_mut(id).value[ci] = orig + h;
        let plus = evaluate(params, &mut loss_fn, false);
        params.get_mut(id).value[ci] = orig - h;
        let minus = evaluate(params, &mut loss_fn, false);
        params.get_mut(id).value[ci] = orig;
        let (plus, minus) = (plus?, minus?);
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            report.redrawn += 1;
            continue;
        }
        // the exact perturbation after rounding to T
        let step = ((orig + h).to_f64().unwrap() - (orig - h).to_f64().unwrap()).abs();
        let numeric = (plus.loss - minus.loss) / step;
        let a = analytic[pi][ci];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    if report.checked == 0 {
        return Err(Error::Numeric("every sampled coordinate sits on a kink".into()));
    }
    Ok(report)
}
