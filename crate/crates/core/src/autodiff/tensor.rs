use std::fmt;

use super::dual::{Dual, Real};
use crate::error::{Error, Result};

/// Dense row-major tensor over a [`Real`] scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Tensor whose elements carry a tangent with respect to the discount logit.
pub type DualTensor = Tensor<Dual>;

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Compensated (Neumaier) sum, so long reductions lose at most a few ulps.
    pub fn sum(&self) -> T {
        let mut sum = T::zero();
        let mut c = T::zero();
        for &x in &self.data {
            let t = sum + x;
            if sum.value().abs() >= x.value().abs() {
                c += (sum - t) + x ;
            } else {
                c += (x - t) + sum ;
            }
            sum = t;
        }
        sum + c
    }

    /// Primal values as a plain tensor.
    pub fn values(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.value()).collect(),
        }
    }

    /// Tangents as a plain tensor (zeros for `f64`).
    pub fn tangents(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.tangent()).collect(),
        }
    }

    /// Same values with the tangent removed.
    pub fn detach(&self) -> Self {
        self.map(|x| x.detach())
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    /// Row-major 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = T::gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (n as isize, 1));
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

impl Tensor<f64> {
    /// Embeds plain values into another scalar type with zero tangent.
    pub fn lift<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

impl Tensor<Dual> {
    /// Assembles a dual tensor from value and tangent planes.
    pub fn from_parts(value: &Tensor<f64>, tangent: &Tensor<f64>) -> Result<Self> {
        value.check_same_shape(tangent)?;
        Ok(Tensor {
            shape: value.shape.clone(),
            data: value
                .data
                .iter()
                .zip(&tangent.data)
                .map(|(&v, &t)| Dual::new(v, t))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn dual_parts_roundtrip() {
        let v = Tensor::vector(vec![1.0, 2.0]);
        let t = Tensor::vector(vec![0.5, -0.5]);
        let d = DualTensor::from_parts(&v, &t).unwrap();
        assert_eq!(d.values(), v);
        assert_eq!(d.tangents(), t);
        assert_eq!(d.detach().tangents().data(), &[0.0, 0.0]);
    }
}
