use rand::Rng;

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![R::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Samples every element from `uniform(-bound, bound)`.
    pub fn uniform<G: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut G) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[R]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![R::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, factor: R) {
        if let Some(grad) = self.grad.as_mut() {
            grad.iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element-wise cast, used to replay a model in another precision.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::lit(x.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Shape-checked element access for 2-d tensors.
    pub fn at2(&self, row: usize, col: usize) -> R {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates_with_matching_shape() {
        let mut t = Tensor::<f32>::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
