//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};

/// Relative error between an analytic and a numeric derivative, floored so
/// that near-zero gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn eval<T, F>(owner: &T, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &T) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss(&mut tape, owner)?;
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares tape gradients against central differences for every trainable
/// scalar in `store` and returns the worst relative error.
///
/// `loss` must build a scalar on the given tape from the store's parameters
/// (it may also read other, frozen stores it captured). Values in `store`
/// are restored bit-for-bit after each perturbation.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_owned(store, |s| s, eps, loss)
}

/// [`grad_check`] for a store held inside `owner`, such as a model or an
/// adapter state, reached through `store_of`.
pub fn grad_check_owned<T, S, F>(owner: &mut T, store_of: S, eps: f64, loss: F) -> Result<f64>
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: Fn(&mut Tape, &T) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("grad_check eps {eps}")));
    }
    let first = eval(owner, &loss)?;
    let second = eval(owner, &loss)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let v = loss(&mut tape, owner)?;
    let grads = tape.backward(v)?;

    let mut worst: f64 = 0.0;
    let n = store_of(owner).len();
    for id in 0..n {
        let store = store_of(owner);
        if !store.group(id).trainable {
            continue;
        }
        let analytic = grads.get(store, id).map(|g| g.data().to_vec());
        let numel = store.group(id).numel();
        for j in 0..numel {
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let original = store_of(owner).value(id).data()[j];
            store_of(owner).value_mut(id).data_mut()[j] = original + eps;
            let plus = eval(owner, &loss);
            store_of(owner).value_mut(id).data_mut()[j] = original - eps;
            let minus = eval(owner, &loss);
            store_of(owner).value_mut(id).data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
