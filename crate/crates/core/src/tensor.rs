//! Dense row-major `f64` tensors.

use crate::error::{DalError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Initialisation schemes for fresh tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// i.i.d. uniform on `[-a, a]`.
    Uniform(f64),
    /// Uniform with `a = sqrt(6 / (fan_in + fan_out))`; fans are the
    /// first and last dims (both equal to the length for rank 1).
    Xavier,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(DalError::InvalidShape(format!("zero dim in {shape:?}")));
    }
    Ok(shape.iter().product())
}

/// Xavier/Glorot bound for a shape.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [first, .., last] => (*first, *last),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(DalError::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn init(shape: &[usize], scheme: Init, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let bound = match scheme {
            Init::Zeros => return Self::zeros(shape),
            Init::Uniform(a) if a > 0.0 && a.is_finite() => a,
            Init::Uniform(a) => {
                return Err(DalError::InvalidArgument(format!(
                    "uniform bound must be positive, got {a}"
                )))
            }
            Init::Xavier => xavier_bound(shape),
        };
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    // Internal constructor for shapes already validated by an op.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_init() {
        let mut rng = Rng::new(0);
        let t = Tensor::init(&[2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(t.shape(), &[2, 2]);
    }

    #[test]
    fn uniform_respects_bound() {
        let mut rng = Rng::new(1);
        let t = Tensor::init(&[4], Init::Uniform(0.1), &mut rng).unwrap();
        assert!(t.data().iter().all(|x| x.abs() <= 0.1));
        let big = Tensor::init(&[1000], Init::Uniform(0.1), &mut rng).unwrap();
        assert!(big.data().iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn xavier_bound_3x5() {
        assert!((xavier_bound(&[3, 5]) - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((xavier_bound(&[3, 5]) - 0.8660).abs() < 1e-4);
        let mut rng = Rng::new(2);
        let t = Tensor::init(&[3, 5], Init::Xavier, &mut rng).unwrap();
        assert!(t.data().iter().all(|x| x.abs() <= 0.8661));
    }

    #[test]
    fn bad_shapes_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            Tensor::init(&[0, 3], Init::Zeros, &mut rng),
            Err(DalError::InvalidShape(_))
        ));
        assert!(Tensor::init(&[3], Init::Uniform(0.0), &mut rng).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = Tensor::init(&[8, 8], Init::Xavier, &mut Rng::new(9)).unwrap();
        let b = Tensor::init(&[8, 8], Init::Xavier, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }
}
