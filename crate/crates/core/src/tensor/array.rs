//! Plain dense arrays: row-major storage plus shape bookkeeping.

use super::{sc, Scalar};

/// N-dimensional array of scalars in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Tensor<T> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        assert!(
            n == data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            dims,
            n,
            data.len()
        );
        Tensor { dims, data }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Tensor<T> {
        let dims = dims.into();
        let n = dims.iter().product();
        Tensor { dims, data: vec![T::zero(); n] }
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: T) -> Tensor<T> {
        let dims = dims.into();
        let n = dims.iter().product();
        Tensor { dims, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor { dims: vec![], data: vec![v] }
    }

    pub fn from_f64s(dims: impl Into<Vec<usize>>, data: &[f64]) -> Tensor<T> {
        Tensor::from_vec(dims, data.iter().map(|&v| sc(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        assert!(self.numel() == 1, "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert!(
            self.dims == other.dims,
            "elementwise op: shape mismatch {:?} vs {:?}",
            self.dims,
            other.dims
        );
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(
            self.dims == other.dims,
            "add_assign: shape mismatch {:?} vs {:?}",
            self.dims,
            other.dims
        );
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, f: T) {
        for a in self.data.iter_mut() {
            *a *= f;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, dims: impl Into<Vec<usize>>) -> Tensor<T> {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        assert!(
            n == self.numel(),
            "reshape {:?} -> {:?}: element count mismatch",
            self.dims,
            dims
        );
        Tensor { dims, data: self.data.clone() }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v.into_f64()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.into_f64())).collect(),
        }
    }

    /// Flat offset of a multi-index. Debug builds check bounds per axis.
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.dims[i], "index {:?} out of {:?}", idx, self.dims);
            off = off * self.dims[i] + ix;
        }
        off
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.into_f64() - b.into_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|v| v as f32).collect());
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn zip_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        let _ = a.zip(&b, |x, y| x + y);
    }

    #[test]
    fn strides_match_shape() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        let empty: Vec<usize> = vec![];
        assert_eq!(strides(&empty), Vec::<usize>::new());
    }
}
