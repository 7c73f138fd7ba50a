//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so a check is independent of the
//! backward rules it validates.

use rand::seq::index::sample;

use super::{Array, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of scalar `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &Array, h: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut probe = x.clone();
    let mut out = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// with respect to every parameter in `store`.
///
/// With `max_coords`, only that many randomly chosen scalar coordinates are
/// probed. Returns the relative error over the probed coordinates.
pub fn check_param_gradients(
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
    max_coords: Option<(usize, &mut Rng)>,
) -> Result<f64> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &analytic_store)?;
    g.backward_into(loss, &mut analytic_store)?;

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<usize> = match max_coords {
        Some((n, rng)) if n < coords.len() => sample(rng, coords.len(), n).into_vec(),
        _ => (0..coords.len()).collect(),
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };

    let mut probe = store.clone();
    let mut analytic = Vec::with_capacity(chosen.len());
    let mut numeric = Vec::with_capacity(chosen.len());
    for &c in &chosen {
        let (id, i) = coords[c];
        let orig = probe.value(id).data()[i];
        probe.value_mut(id).data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.value_mut(id).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
        analytic.push(analytic_store.grad(id).data()[i]);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Compares analytic and numeric gradients with respect to a set of input
/// arrays entered into the graph as variables.
pub fn check_input_gradients(
    inputs: &[Array],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        match grads.wrt(vars[k]) {
            Some(a) => analytic.extend_from_slice(a.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, input.len())),
        }
        let num = numeric_gradient(input, h, |probe| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| g.constant(if j == k { probe.clone() } else { a.clone() }))
                .collect();
            let loss = build(&mut g, &vars).expect("forward pass failed during probing");
            g.value(loss).data()[0]
        });
        numeric.extend_from_slice(num.data());
    }
    Ok(relative_error(&analytic, &numeric))
}
