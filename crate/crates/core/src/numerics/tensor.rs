use crate::error::{Error, Result};
use crate::num::Real;

/// Dense row-major tensor. Rank 0 (shape `[]`) is a scalar; `len` is the
/// product of the shape, so a scalar has `len == 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); len] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.data.len());
        self.data[0]
    }

    /// 2-D element access.
    pub fn at(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, c: F) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &Tensor<F>) -> F {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax_1d(&self) -> Result<Tensor<F>> {
        let ls = self.log_softmax_1d()?;
        Ok(ls.map(|x| x.exp()))
    }

    /// Numerically stable log-softmax over a rank-1 tensor. Rejects
    /// non-finite inputs: downstream losses assume a valid distribution.
    pub fn log_softmax_1d(&self) -> Result<Tensor<F>> {
        if self.rank() != 1 || self.is_empty() {
            return Err(Error::Dim(format!(
                "log_softmax expects a non-empty vector, got shape {:?}",
                self.shape
            )));
        }
        if !self.all_finite() {
            return Err(Error::Numeric("log_softmax on non-finite input".into()));
        }
        let max = self.data.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = self.data.iter().map(|&x| (x - max).exp()).sum();
        let lz = z.ln() + max;
        Ok(self.map(|x| x - lz))
    }
}

impl<F: std::fmt::Debug> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// `[m,k] x [k,n] -> [m,n]`, ikj loop order for locality.
pub(crate) fn mm<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    debug_assert_eq!(k, b.shape[0]);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// `[m,k] x [k] -> [m]`.
pub(crate) fn matvec<F: Real>(a: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    debug_assert_eq!(k, x.len());
    let mut out = vec![F::zero(); m];
    for (o, row) in out.iter_mut().zip(a.data.chunks_exact(k)) {
        *o = row.iter().zip(&x.data).map(|(&av, &xv)| av * xv).sum();
    }
    Tensor { shape: vec![m], data: out }
}
