//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::seeding::{rng_for, Stream};
use crate::tensor::ParamSet;

/// Compare `analytic` gradients of `f` at `point` against central
/// differences on up to `samples_per_tensor` randomly chosen coordinates of
/// each tensor. Returns the max over sampled coordinates of
/// `|analytic - central| / (|analytic| + 1e-8)`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    point: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    point.check_compatible(analytic, "finite_diff_check")?;
    let mut rng = rng_for(seed, 0, Stream::Fixture, 0);
    let mut worst = 0.0f64;
    let names: Vec<String> = point.names().cloned().collect();
    for name in names {
        let len = point.get(&name).unwrap().len();
        let mut coords: Vec<usize> = (0..len).collect();
        coords.shuffle(&mut rng);
        coords.truncate(samples_per_tensor.min(len));
        coords.sort_unstable();
        for c in coords {
            let mut probe = point.clone();
            let base = point.get(&name).unwrap().data()[c];
            probe.get_mut(&name).unwrap().data_mut()[c] = base + eps;
            let up = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[c] = base - eps;
            let down = f(&probe)?;
            let central = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).unwrap().data()[c];
            let rel = (a - central).abs() / (a.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(ps: &ParamSet) -> Result<f64> {
        // f = sum 0.5 * w_i^2 + 3 w_i
        let mut total = 0.0;
        for (_, t) in ps.iter() {
            for v in t.data() {
                total += 0.5 * v * v + 3.0 * v;
            }
        }
        Ok(total)
    }

    fn quadratic_grad(ps: &ParamSet) -> ParamSet {
        let mut g = ps.zeros_like();
        for (name, t) in ps.iter() {
            let gt = g.get_mut(name).unwrap();
            for (gd, v) in gt.data_mut().iter_mut().zip(t.data()) {
                *gd = v + 3.0;
            }
        }
        g
    }

    fn fixture() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(vec![3], vec![0.4, -1.2, 2.5]).unwrap());
        ps.insert("b", Tensor::scalar(0.9));
        ps
    }

    #[test]
    fn quadratic_passes_tightly() {
        let ps = fixture();
        let g = quadratic_grad(&ps);
        let err = finite_diff_check(&mut quadratic, &ps, &g, 1e-5, 8, 0).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let ps = fixture();
        let mut g = quadratic_grad(&ps);
        g.get_mut("a").unwrap().data_mut()[1] += 0.5;
        let err = finite_diff_check(&mut quadratic, &ps, &g, 1e-5, 8, 0).unwrap();
        assert!(err > 0.1, "harness failed to detect corruption: {err}");
    }
}
