use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape may not contain a zero dimension: {shape:?}")]
    ZeroDimension { shape: Vec<usize> },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

/// Dense row-major f64 tensor with an optional gradient buffer of the same
/// shape. The leading dimension is the batch dimension wherever a batch is
/// meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: values.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading batch dimension.
    pub fn stack(items: &[Tensor]) -> Result<Self, TensorError> {
        let first = items.first().ok_or(TensorError::ZeroDimension {
            shape: vec![0],
        })?;
        let mut values = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            values.extend_from_slice(&t.values);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Allocates the gradient buffer (zero filled) if absent and returns it.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.get_or_insert_with(|| vec![0.0; self.values.len()])
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Removes and returns the gradient buffer, leaving the tensor gradless.
    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Puts back a gradient buffer captured by [`Tensor::take_grad`].
    pub fn restore_grad(&mut self, grad: Option<Vec<f64>>) -> Result<(), TensorError> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(TensorError::LengthMismatch {
                    shape: self.shape.clone(),
                    expected: self.values.len(),
                    actual: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Row `i` of a tensor viewed as `[batch, row_len]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[0];
        assert!(i < n, "row {i} out of {n}");
        let stride = self.values.len() / n;
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }
}
