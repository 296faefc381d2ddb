use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Compare analytic gradients of `f` against central differences with step
/// `eps`, perturbing every element of every parameter in `store`.
///
/// The error of a parameter tensor is `|a - n| / max(|a|, |n|, 1e-8)` with
/// `|.|` the Euclidean norm over its elements; the maximum over parameters is
/// returned. `store` is left with the analytic gradients.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::non_finite("grad_check objective"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::non_finite("grad_check objective"));
    }
    g.backward(loss, store)?;

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.get(id).gradient.clone();
        let mut diff_sq = 0.0f64;
        let mut an_sq = 0.0f64;
        let mut num_sq = 0.0f64;
        for i in 0..analytic.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            // the perturbation actually applied, after f32 rounding
            let step = ((orig + eps) as f64) - ((orig - eps) as f64);
            let numeric = (plus - minus) / step;
            let a = analytic.data()[i] as f64;
            diff_sq += (a - numeric).powi(2);
            an_sq += a * a;
            num_sq += numeric * numeric;
        }
        let denom = an_sq.sqrt().max(num_sq.sqrt()).max(1e-8);
        worst = worst.max(diff_sq.sqrt() / denom);
    }
    Ok(worst)
}
