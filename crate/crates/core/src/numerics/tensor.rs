use super::NumericsError;

/// Dense row-major `f64` tensor.
///
/// Invariants: `data.len()` equals the product of `shape`, and every extent
/// is at least 1. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Marks leaves whose gradient the caller intends to read back.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                details: format!("every extent must be >= 1, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                details: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(f).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent along `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Value at a 2-D index. Panics out of range; only meant for small hosts
    /// like tests and report formatting.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_length_mismatch() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn scalar_uses_shape_one() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.shape(), &[1]);
        assert_eq!(s.data(), &[4.5]);
    }

    #[test]
    fn eye_has_unit_diagonal() {
        let e = Tensor::eye(3);
        assert_eq!(e.at2(0, 0), 1.0);
        assert_eq!(e.at2(1, 2), 0.0);
        assert_eq!(e.numel(), 9);
    }
}
