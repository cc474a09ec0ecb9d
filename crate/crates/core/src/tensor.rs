//! Dense row-major tensors and the plain (non-recording) kernels used by both
//! the autodiff tape and tape-free inference.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Norm below which a row is treated as zero by [`Tensor::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], x: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![x; n],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected a matrix, got shape {:?}", s)),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        crate::scalar::compensated_sum(self.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions {} and {}", k, k2));
        }
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (l, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(&other.data[l * p..(l + 1) * p]) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_row_broadcast(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2("add_row_broadcast")?;
        if bias.data.len() != c || bias.shape.len() != 1 {
            return shape_err(
                "add_row_broadcast",
                format!("bias {:?} for {}x{} matrix", bias.shape, r, c),
            );
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x = *x + b;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    /// Row-wise `softmax(x / tau)`, stabilized by the row maximum.
    pub fn softmax_rows(&self, tau: T) -> Result<Self> {
        check_tau(tau)?;
        let (_, c) = self.dims2("softmax_rows")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = ((*x - max) / tau).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        Ok(out)
    }

    /// Row-wise `log_softmax(x / tau)` via log-sum-exp.
    pub fn log_softmax_rows(&self, tau: T) -> Result<Self> {
        check_tau(tau)?;
        let (_, c) = self.dims2("log_softmax_rows")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for x in row.iter_mut() {
                *x = *x / tau;
            }
            let lse = crate::scalar::log_sum_exp(row);
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        Ok(out)
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Result<Vec<T>> {
        let (_, c) = self.dims2("row_norms")?;
        Ok(self
            .data
            .chunks(c)
            .map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect())
    }

    /// Scales each row to unit Euclidean norm. Rows with norm at or below
    /// [`NORM_EPS`] are rejected.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (_, c) = self.dims2("l2_normalize_rows")?;
        let norms = self.row_norms()?;
        let eps = T::lit(NORM_EPS);
        let mut out = self.clone();
        for (i, (row, &n)) in out.data.chunks_mut(c).zip(&norms).enumerate() {
            if !(n > eps) {
                return Err(Error::DegenerateInput(format!(
                    "row {} has norm {} (cannot normalize)",
                    i, n
                )));
            }
            for x in row.iter_mut() {
                *x = *x / n;
            }
        }
        Ok(out)
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, c) = self.dims2("argmax_rows")?;
        Ok(self
            .data
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &x) in row.iter().enumerate().skip(1) {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Gathers rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![idx.len(), c],
            data,
        })
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

pub(crate) fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {}", tau)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn matmul_scalar_and_identity() {
        let a = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);

        let x = Tensor::from_rows(&[
            vec![1.0, -2.0, 0.5],
            vec![3.0, 4.0, -1.0],
            vec![0.0, 7.0, 2.0],
        ])
        .unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for &p in x.softmax_rows(1.0).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap();
        let p = x.softmax_rows(1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = Tensor::<f64>::from_rows(&[vec![100.0, 0.0]]).unwrap();
        let p = x.softmax_rows(1.0).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1] < 1e-40 && p.data()[1] > 0.0);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        let x = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(x.softmax_rows(0.0), Err(Error::Parameter(_))));
        assert!(matches!(x.softmax_rows(-1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalize_rows() {
        let x = Tensor::<f64>::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(y.l2_normalize_rows().unwrap(), y);
        let z = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(z.l2_normalize_rows(), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 3.0, 3.0]]).unwrap();
        assert_eq!(x.argmax_rows().unwrap(), vec![0, 1]);
    }

    #[test]
    fn works_in_single_precision() {
        let x = Tensor::<f32>::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-6);
    }
}
