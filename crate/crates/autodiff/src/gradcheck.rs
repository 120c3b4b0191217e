//! Central finite-difference gradient verification. This is the independent
//! oracle the property suites check every primitive against; it never calls
//! the backward pass itself.

use crate::error::{AdError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
///
/// `f` evaluates the scalar objective at the given parameter values; it is
/// called twice per coordinate with one entry nudged by +/- eps.
pub fn grad_check<T, F>(mut f: F, params: &[Tensor<T>], analytic: &[Vec<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AdError::BadEpsilon { eps });
    }
    assert_eq!(params.len(), analytic.len(), "one adjoint per parameter");
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        assert_eq!(grads.len(), params[pi].numel());
        for i in 0..grads.len() {
            let orig = work[pi].values()[i];
            work[pi].values_mut()[i] = orig + T::from_f64(eps);
            let up = f(&work)?;
            work[pi].values_mut()[i] = orig - T::from_f64(eps);
            let down = f(&work)?;
            work[pi].values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(AdError::NonFinite {
                    what: "grad_check objective".to_string(),
                });
            }
            let fd = (up - down) / (2.0 * eps);
            let a = grads[i].as_f64();
            let rel = (a - fd).abs() / f64::max(1.0, a.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Convenience wrapper for tape-built objectives: runs backward once for the
/// analytic adjoints, then compares them against central differences of the
/// re-recorded forward.
pub fn tape_grad_check<T, F>(build: F, params: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let mut marked: Vec<Tensor<T>> = params.to_vec();
    for p in &mut marked {
        p.set_requires_grad(true);
    }
    let tape = Tape::new();
    let vars: Vec<Var<T>> = marked.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&tape, &vars)?;
    let mut grads: Gradients<T> = tape.backward(&loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|v| grads.take(v).expect("leaf adjoint missing"))
        .collect();
    grad_check(
        |ps| {
            let tape = Tape::new();
            let vars: Vec<Var<T>> = ps.iter().map(|p| tape.leaf(p)).collect();
            let loss = build(&tape, &vars)?;
            Ok(loss.scalar_value().as_f64())
        },
        &marked,
        &analytic,
        eps,
    )
}

/// Adjoints from one backward pass written onto the store's tensors.
pub fn write_back_grads<T: Scalar>(
    store: &mut ParamStore<T>,
    bindings: &[(crate::params::ParamId, Var<T>)],
    grads: &mut Gradients<T>,
) {
    for (id, var) in bindings {
        if let Some(g) = grads.take(var) {
            store.get_mut(*id).accumulate_adjoint(&g);
        }
    }
}
