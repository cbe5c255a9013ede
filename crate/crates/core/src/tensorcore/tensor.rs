use crate::error::{Error, Result};

/// Dense row-major array of `f64` with rank 1 to 3.
///
/// Matrix-style ops view a tensor as `rows × cols`, where `cols` is the last
/// dimension and `rows` is the product of the leading ones (1 for a vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim("tensor", "rank 1..=3", format!("rank {}", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::dim(
                "tensor",
                format!("{numel} values for shape {shape:?}"),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: Vec::new(),
            requires_grad: false,
        })
    }

    /// Builds a matrix without validation; callers guarantee `values.len() == rows * cols`.
    pub(crate) fn matrix_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Self {
            shape: vec![rows, cols],
            values,
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    pub(crate) fn with_shape_unchecked(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::with_shape_unchecked(shape.to_vec(), vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::with_shape_unchecked(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "equal row lengths", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Turns on gradient tracking with a zeroed gradient buffer.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = vec![0.0; self.values.len()];
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// Detached copy without gradient tracking.
    pub fn detached(&self) -> Self {
        Self::with_shape_unchecked(self.shape.clone(), self.values.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
