use super::params::{BoundParams, ParamGrads, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Relative error used by the checker: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare tape gradients of a scalar function against central differences
/// over every trainable coordinate. Returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = bound.gradients(&tape.backward(loss)?);
    compare_gradients(&f, params, &grads, h)
}

/// The numeric half of [`finite_diff_check`] against a supplied gradient.
pub fn compare_gradients<F>(
    f: &F,
    params: &ParamStore,
    analytic: &ParamGrads,
    h: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        Ok(f(&tape, &bound)?.item())
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.numel());
        for i in 0..n {
            let orig = params.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Pin a closure to the higher-ranked signature the checker expects; closures
/// built away from the call site need this to infer their lifetimes.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    f
}
