use super::{NumericsError, Real};

/// Dense row-major array of rank 1 to 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(NumericsError::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::Shape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("valid zero shape")
    }

    pub fn scalar(x: T) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose last axis is the row.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(NumericsError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::of(x.f64())).collect() }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(NumericsError::Axis { axis, rank: shape.len() });
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    let mut buf = vec![0f64; extent];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            let max = (0..extent).map(|j| src[at(j)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[at(j)].f64() - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = T::of(b / sum);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Softmax over a contiguous row in place, accumulating in f64.
pub(crate) fn softmax_row_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0f64;
    for x in row.iter_mut() {
        let e = (*x - max).exp();
        sum += e.f64();
        *x = e;
    }
    let inv = T::of(1.0 / sum);
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Log of the softmax normaliser of a row. Exponentials are taken in `T`,
/// the sum in f64.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp().f64()).sum();
    max.f64() + sum.ln()
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`L x V`), counted only where `mask` is set.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<f64, NumericsError> {
    let rows = logits.rows();
    let vocab = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(NumericsError::Shape(format!("{rows} logit rows but {} targets and {} mask entries", targets.len(), mask.len())));
    }
    let mut total = 0f64;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= vocab {
            return Err(NumericsError::TargetOutOfRange { target: t, vocab });
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[t].f64();
        count += 1;
    }
    if count == 0 {
        return Err(NumericsError::EmptyLossSupport);
    }
    Ok(total / count as f64)
}
