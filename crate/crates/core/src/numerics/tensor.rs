use super::NumericsError;

/// Dense row-major array of `f64` with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.iter().any(|&s| s == 0) {
            return Err(NumericsError::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::Contract("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensor has at least one dimension")
    }

    /// Number of last-dimension slices.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Softmax along the last dimension of a plain tensor.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    out.requires_grad = false;
    out.grad = None;
    for (src, dst) in x.data.chunks(n).zip(out.data.chunks_mut(n)) {
        softmax_row(src, dst);
    }
    out
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    let inv = 1.0 / total;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}
