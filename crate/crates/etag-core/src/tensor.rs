//! Dense row-major f64 tensors.
//!
//! The carrier type for every feature, logit and parameter in the crate.
//! Gradients live in `grad` once a backward pass has run; `requires_grad`
//! marks leaves the tape should differentiate. Image batches use the
//! `[n, c, h, w]` layout.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::shape(format!(
                "value count {} does not match shape {:?} (numel {})",
                values.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values, grad: None, requires_grad: false }
    }

    /// Gaussian init with the given standard deviation; used for weights via
    /// the fan-in rule `std = sqrt(2 / fan_in)`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let values = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor { shape, values, grad: None, requires_grad: false }
    }

    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut values = vec![0.0; labels.len() * num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::domain(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            values[i * num_classes + y] = 1.0;
        }
        Tensor::new(vec![labels.len(), num_classes], values)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Frozen copy: identical values, gradients disabled, stale grad dropped.
    pub fn frozen(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.values[0])
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[i * cols..(i + 1) * cols]
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::domain("cannot stack an empty list".to_string()))?;
        let mut values = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            values.extend_from_slice(&t.values);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, values)
    }

    /// Selects rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::shape("select_rows needs at least 1-d".to_string()));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut values = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::domain(format!("row {r} out of range {}", self.shape[0])));
            }
            values.extend_from_slice(&self.values[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, values)
    }

    /// Counter-clockwise rotation by `k * 90` degrees of the spatial plane.
    ///
    /// Accepts `[c, h, w]` or `[n, c, h, w]` with square spatial extent;
    /// one application maps `new[r][c] = old[c][h - 1 - r]` per channel.
    pub fn rotate90(&self, k: usize) -> Result<Self> {
        if k > 3 {
            return Err(Error::domain(format!("rotation index {k} outside 0..=3")));
        }
        let (h, w) = match self.shape.len() {
            3 => (self.shape[1], self.shape[2]),
            4 => (self.shape[2], self.shape[3]),
            _ => {
                return Err(Error::shape(format!(
                    "rotate90 expects [c,h,w] or [n,c,h,w], got {:?}",
                    self.shape
                )))
            }
        };
        if h != w {
            return Err(Error::shape(format!("rotate90 needs square images, got {h}x{w}")));
        }
        let planes = self.numel() / (h * w);
        let mut out = self.clone();
        for _ in 0..k {
            let src = out.values.clone();
            for p in 0..planes {
                let base = p * h * w;
                for r in 0..h {
                    for c in 0..w {
                        out.values[base + r * w + c] = src[base + c * w + (h - 1 - r)];
                    }
                }
            }
        }
        out.grad = None;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(Tensor::one_hot(&[3], 3).is_err());
        let t = Tensor::one_hot(&[0, 2], 3).unwrap();
        assert_eq!(t.values(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rotate90_identity_and_quarter_turns() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(img.rotate90(0).unwrap().values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(img.rotate90(1).unwrap().values(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(img.rotate90(2).unwrap().values(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn rotate90_rejects_bad_inputs() {
        let img = Tensor::zeros(vec![1, 2, 2]);
        assert!(matches!(img.rotate90(4), Err(Error::Domain(_))));
        let rect = Tensor::zeros(vec![1, 2, 3]);
        assert!(matches!(rect.rotate90(1), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_strips_grad_state() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]).with_grad();
        t.grad = Some(vec![0.5, 0.5]);
        let f = t.frozen();
        assert!(!f.requires_grad);
        assert!(f.grad.is_none());
        assert_eq!(f.values(), t.values());
    }
}
