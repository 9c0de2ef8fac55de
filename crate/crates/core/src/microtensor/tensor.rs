use super::real::Real;
use super::TensorError;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidArgument(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }
}

/// Splits `shape` around `axis` into `(outer, dim, inner)` extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::UnknownAxis { op, axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn f64_sum_of_many_f32() {
        let t = Tensor::<f32>::full(&[10_000_000], 0.1);
        let exact = 0.1f32 as f64 * 1e7;
        assert!((t.sum_f64() - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn split_axis_extents() {
        assert_eq!(split_axis("t", &[2, 3, 4], 1).unwrap(), (2, 3, 4));
        assert!(matches!(split_axis("t", &[2, 3], 2), Err(TensorError::UnknownAxis { axis: 2, rank: 2, .. })));
    }
}
