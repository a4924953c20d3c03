//! Central finite-difference oracle for the tape.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::{Grads, ParamSet};
use crate::tape::{GradScope, Tape, Var};
use crate::tensor::Tensor;

/// A scalar function built on a fresh tape from registered parameters.
pub trait TapeFn: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> {}
impl<F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>> TapeFn for F {}

/// Gradients smaller than this are compared in absolute terms. A central
/// difference with step 1e-5 on an O(1) loss carries about 1e-11 of rounding
/// error, which would dominate a relative comparison of tinier entries.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error used by every gradient check: `|a - n| / max(REL_ERR_FLOOR, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERR_FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad_of_input(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Evaluates `f` on a throwaway tape and returns the scalar value.
pub fn evaluate(f: &impl TapeFn, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.register(params, GradScope::Trainable);
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Analytic gradients of `f` for the trainable entries of `params`.
pub fn analytic_grads(f: &impl TapeFn, params: &ParamSet) -> Result<Grads> {
    let mut tape = Tape::new();
    let vars = tape.register(params, GradScope::Trainable);
    let loss = f(&mut tape, &vars)?;
    Ok(tape.backward(loss)?.for_params(params))
}

/// Central-difference gradients for the trainable entries of `params`.
pub fn numeric_grads(f: &impl TapeFn, params: &ParamSet, h: f64) -> Result<Grads> {
    let mut probe = params.clone();
    let mut out = Grads::new();
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).expect("listed").len();
        let mut g = Tensor::zeros(params.get(&name).expect("listed").shape());
        for i in 0..n {
            let orig = probe.get(&name).expect("listed").data()[i];
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig + h;
            let up = evaluate(f, &probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig - h;
            let down = evaluate(f, &probe)?;
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Largest [`rel_err`] over every entry shared by the two maps.
pub fn max_rel_err(analytic: &Grads, numeric: &Grads) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, n) in numeric.iter() {
        let Some(a) = analytic.get(name) else {
            return f64::INFINITY;
        };
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}

/// Compares tape gradients of `f` against central differences with step `h`.
pub fn grad_check_max_rel_err(f: impl TapeFn, params: &ParamSet, h: f64) -> Result<f64> {
    let analytic = analytic_grads(&f, params)?;
    let numeric = numeric_grads(&f, params, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}
