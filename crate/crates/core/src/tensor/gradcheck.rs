//! Central finite-difference verification of analytic gradients.

use super::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Floor of the relative-error denominator: gradients smaller than this are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of the scalar graph produced by
/// `build` against central differences with step `eps`.
///
/// The graph is evaluated in `f64` on a cast copy of `store`. Up to
/// `samples_per_param` coordinates of each trainable parameter are probed
/// (all of them when the parameter is smaller). Every evaluation builds a
/// fresh tape with the same `seed`, so dropout masks repeat exactly.
pub fn grad_check<S, F>(
    store: &ParamStore<S>,
    mode: super::Mode,
    build: F,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut params: ParamStore<f64> = store.cast();
    let analytic = {
        let mut tape = Tape::new(&params, mode, seed);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(p, mode, seed);
        let loss = build(&mut tape)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::contract("grad_check", "loss head must be scalar"));
        }
        Ok(v.data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let len = params.get(id).value.len();
        let coords: Vec<usize> = if len <= samples_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = params.get(id).value.data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + eps;
            let plus = eval(&params)?;
            params.get_mut(id).value.data_mut()[idx] = orig - eps;
            let minus = eval(&params)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.param(id).map_or(0.0, |g| g[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((params.get(id).name.clone(), idx, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
