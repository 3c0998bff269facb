//! Dense f64 tensors with reverse-mode gradients.
//!
//! [`Tensor`] is an immutable value; [`Graph`](graph::Graph) records ops on a
//! tape and [`Graph::backward`](graph::Graph::backward) accumulates gradients
//! in reverse topological order. All arithmetic is 64-bit.

mod gradcheck;
mod graph;
mod serialize;
mod sgd;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, NodeId};
pub use serialize::{read_param_set, write_param_set};
pub use sgd::sgd_step;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense tensor. Values are always finite; ops that would produce
/// NaN/Inf fail instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor_new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// He-uniform fill: `U(-limit, limit)` with `limit = sqrt(6 / fan_in)`.
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
        let limit = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "scalar_value",
                detail: format!("shape {:?} is not scalar", self.shape),
            })
        }
    }

    /// Flat index for a `[H, W, C]` tensor.
    #[inline]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx3(y, x, c)]
    }

    /// Flat index for an `[R, C]` tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[self.idx2(r, c)]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Max absolute element-wise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Named parameter collection with stable (sorted-by-name) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names with same shapes: the precondition for EMA blending and
    /// optimizer updates.
    pub fn compatible_with(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn check_compatible(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.compatible_with(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: "parameter sets have different names or shapes".into(),
            })
        }
    }

    /// Zero tensors with this set's names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        out
    }

    /// In-place convex blend: `self = alpha * self + (1 - alpha) * other`.
    pub fn ema_blend_from(&mut self, other: &ParamSet, alpha: f64) -> Result<()> {
        self.check_compatible(other, "ema_blend")?;
        for ((_, t), (_, s)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (w, ws) in t.data_mut().iter_mut().zip(s.data()) {
                *w = alpha * *w + (1.0 - alpha) * *ws;
            }
        }
        Ok(())
    }

    /// Max absolute difference over all parameters (requires compatibility).
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other, "max_abs_diff")?;
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shape_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn param_set_iteration_is_sorted() {
        let mut ps = ParamSet::new();
        ps.insert("zeta", Tensor::scalar(1.0));
        ps.insert("alpha", Tensor::scalar(2.0));
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, vec!["alpha", "zeta"]);
    }

    #[test]
    fn ema_blend_scalar() {
        let mut teacher = ParamSet::new();
        teacher.insert("w", Tensor::scalar(1.0));
        let mut student = ParamSet::new();
        student.insert("w", Tensor::scalar(0.0));
        teacher.ema_blend_from(&student, 0.999).unwrap();
        assert!((teacher.get("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
        student.insert("extra", Tensor::scalar(0.0));
        assert!(teacher.ema_blend_from(&student, 0.5).is_err());
    }
}
