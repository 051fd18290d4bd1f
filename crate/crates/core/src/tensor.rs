//! Dense row-major arrays and the handful of linear-algebra helpers the
//! models need.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; for 1-D tensors this is the length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// `x @ w` for `x: (m, k)` and `w: (k, n)`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (x.rows(), x.cols());
    let n = w.cols();
    assert_eq!(w.rows(), k, "matmul inner dims {k} vs {}", w.rows());
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &x.data,
        k as isize,
        1,
        &w.data,
        n as isize,
        1,
        T::zero(),
        &mut out.data,
        n as isize,
        1,
    );
    out
}

/// `grad_w += x^T @ dy` for the weight of `y = x @ w`.
pub fn accumulate_weight_grad<T: Scalar>(grad_w: &mut Tensor<T>, x: &Tensor<T>, dy: &Tensor<T>) {
    let (m, k) = (x.rows(), x.cols());
    let n = dy.cols();
    assert_eq!(dy.rows(), m);
    assert_eq!(grad_w.shape, vec![k, n]);
    T::gemm(
        k,
        m,
        n,
        T::one(),
        &x.data,
        1,
        k as isize,
        &dy.data,
        n as isize,
        1,
        T::one(),
        &mut grad_w.data,
        n as isize,
        1,
    );
}

/// `dx += dy @ w^T` for the input of `y = x @ w`.
pub fn accumulate_input_grad<T: Scalar>(dx: &mut Tensor<T>, dy: &Tensor<T>, w: &Tensor<T>) {
    let (k, n) = (w.rows(), w.cols());
    let m = dy.rows();
    assert_eq!(dy.cols(), n);
    assert_eq!(dx.shape, vec![m, k]);
    T::gemm(
        m,
        n,
        k,
        T::one(),
        &dy.data,
        n as isize,
        1,
        &w.data,
        1,
        n as isize,
        T::one(),
        &mut dx.data,
        k as isize,
        1,
    );
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// In-place softmax over a slice with max subtraction.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln softmax(row)[i]` for every entry.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (x.rows(), x.cols(), w.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += x.data[i * k + p] * w.data[p * n + j];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    fn ramp(shape: &[usize], offset: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i as f64 + offset) * 0.37).sin()).collect(),
        )
    }

    #[test]
    fn matmul_matches_naive() {
        let x = ramp(&[5, 3], 0.0);
        let w = ramp(&[3, 4], 1.0);
        let got = matmul(&x, &w);
        let want = naive(&x, &w);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_helpers_match_transposed_products() {
        let x = ramp(&[5, 3], 0.0);
        let w = ramp(&[3, 4], 1.0);
        let dy = ramp(&[5, 4], 2.0);

        let mut gw = Tensor::zeros(&[3, 4]);
        accumulate_weight_grad(&mut gw, &x, &dy);
        let xt = Tensor::from_vec(
            &[3, 5],
            (0..15).map(|i| x.data[(i % 5) * 3 + i / 5]).collect(),
        );
        let want = naive(&xt, &dy);
        for (a, b) in gw.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut dx = Tensor::zeros(&[5, 3]);
        accumulate_input_grad(&mut dx, &dy, &w);
        let wt = Tensor::from_vec(
            &[4, 3],
            (0..12).map(|i| w.data[(i % 3) * 4 + i / 3]).collect(),
        );
        let want = naive(&dy, &wt);
        for (a, b) in dx.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_inputs() {
        let mut row = vec![1000.0f32, 999.0, -1000.0];
        softmax_in_place(&mut row);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert!(softplus(-1000.0f32) >= 0.0);
    }
}
