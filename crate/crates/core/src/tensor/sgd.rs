//! SGD with classical momentum.

use crate::error::Result;
use crate::tensor::ParamSet;

/// One update: `v <- momentum * v + g; w <- w - lr * v`.
///
/// `velocity` must share names/shapes with `params` (usually created once via
/// [`ParamSet::zeros_like`]) and is updated in place.
pub fn sgd_step(
    params: &mut ParamSet,
    velocity: &mut ParamSet,
    grads: &ParamSet,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    params.check_compatible(velocity, "sgd_step")?;
    params.check_compatible(grads, "sgd_step")?;
    for (((_, w), (_, v)), (_, g)) in params
        .iter_mut()
        .zip(velocity.iter_mut())
        .zip(grads.iter())
    {
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}
