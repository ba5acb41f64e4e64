use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, ParamId, ParamStore, Tape, Var};
use crate::par;

/// Which parameter entries a gradient check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateSelection {
    All,
    /// At most `per_param` entries of every parameter, chosen with `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinates whose gradient is zero to within the rounding error of
    /// the difference quotient; they are left out of `max_rel_error`.
    pub rounding_limited: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// The parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Finest relative error a scored coordinate must be able to resolve.
pub const RESOLUTION: f64 = 1e-6;

/// Extra steps of h/10, h/100 tried when a coordinate is off by more than
/// [`RESOLUTION`]. A kink of ReLU or max inside `[x - h, x + h]` spoils the
/// difference at `h` but not at a step that stays clear of it, whereas an
/// error in the analytic value persists at every step.
pub const REFINEMENTS: usize = 2;

/// Rounding error bound of a central difference: a few ulps of the loss
/// divided by the step.
pub fn rounding_floor(plus: f64, minus: f64, h: f64) -> f64 {
    16.0 * f64::EPSILON * plus.abs().max(minus.abs()) / h
}

/// Compares tape gradients of `loss` against central differences with step `h`.
///
/// `loss` records a scalar on the tape it is given, reading parameters from
/// the store it is given. It is evaluated once for the analytic gradient and
/// twice per checked coordinate; coordinates are spread across threads.
/// A coordinate is counted as rounding-limited instead of scored when its
/// discrepancy is within [`rounding_floor`] and the gradient is small enough
/// that rounding alone could reach a relative error of [`RESOLUTION`].
/// Otherwise its error is the smallest over the steps `h`, `h/10`, `h/100`.
pub fn gradient_check<'a, F, E>(
    params: &ParamStore,
    h: f64,
    selection: CoordinateSelection,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamStore, &mut Tape<'a>) -> Result<Var, E> + Sync,
    E: From<DiffError> + Send,
{
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = loss(store, &mut t)?;
        Ok(t.value(v).item())
    };

    let mut jobs: Vec<(ParamId, usize, f64)> = Vec::new();
    for id in params.ids() {
        let n = params.value(id).len();
        let analytic = grads.param(id);
        let coords: Vec<usize> = match selection {
            CoordinateSelection::All => (0..n).collect(),
            CoordinateSelection::Sample { per_param, seed } => {
                if n <= per_param {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut picked = sample(&mut rng, n, per_param).into_vec();
                    picked.sort_unstable();
                    picked
                }
            }
        };
        for c in coords {
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[c]);
            jobs.push((id, c, a));
        }
    }

    let errors: Vec<Result<Option<f64>, E>> = par::map(&jobs, |&(id, c, a)| {
        let mut store = params.clone();
        let base = store.value(id).data()[c];
        let mut difference = |step: f64| -> Result<(f64, f64), E> {
            store.value_mut(id).data_mut()[c] = base + step;
            let plus = eval(&store)?;
            store.value_mut(id).data_mut()[c] = base - step;
            let minus = eval(&store)?;
            Ok(((plus - minus) / (2.0 * step), rounding_floor(plus, minus, step)))
        };
        let (numeric, floor) = difference(h)?;
        if (a - numeric).abs() <= floor && (a.abs() + numeric.abs()) * RESOLUTION <= floor {
            return Ok(None);
        }
        let mut err = relative_error(a, numeric);
        let mut step = h;
        for _ in 0..REFINEMENTS {
            if err <= RESOLUTION {
                break;
            }
            step /= 10.0;
            err = err.min(relative_error(a, difference(step)?.0));
        }
        Ok(Some(err))
    });

    let mut report: Vec<ParamCheck> = params
        .iter()
        .map(|p| ParamCheck {
            name: p.name.clone(),
            coordinates: 0,
            max_rel_error: 0.0,
            rounding_limited: 0,
        })
        .collect();
    for ((id, _, _), err) in jobs.iter().zip(errors) {
        let entry = &mut report[id.index()];
        entry.coordinates += 1;
        match err? {
            Some(e) => entry.max_rel_error = entry.max_rel_error.max(e),
            None => entry.rounding_limited += 1,
        }
    }
    Ok(GradCheckReport { params: report })
}
