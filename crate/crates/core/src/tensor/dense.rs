use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::Scalar;
use crate::error::{ensure, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a tensor, used to route gradients from a tape
/// back to the leaf they belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major tensor with an optional gradient accumulator.
///
/// `grad` is allocated exactly when `requires_grad` is set. Cloning yields a
/// tensor with a new identity.
#[derive(Debug)]
pub struct Tensor<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            Dimension,
            "shape {:?} holds {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("consistent shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(&[1], vec![value]).expect("consistent shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect()).expect("consistent shape")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape viewed as a matrix: all leading dims fold into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, lead)) => (lead.iter().product(), cols),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access. Frozen code paths never call this.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.matrix_dims();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if flag {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `g` into the accumulator. No-op on tensors that do not require grad.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        let Some(acc) = self.grad.as_mut() else {
            return Ok(());
        };
        ensure!(
            acc.len() == g.len(),
            Dimension,
            "gradient of length {} for tensor of {} elements",
            g.len(),
            acc.len()
        );
        for (a, &b) in acc.iter_mut().zip(g) {
            *a = *a + b;
        }
        Ok(())
    }

    /// SHA-256 over shape and little-endian element bytes.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.to_le_bytes());
        h.finalize().into()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|x| U::lit(x.as_f64())).collect();
        Tensor::new(&self.shape, data)
            .expect("same shape")
            .with_requires_grad(self.requires_grad)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_elements() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.matrix_dims(), (2, 3));
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 3);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn frozen_tensor_ignores_accumulation() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clone_gets_new_identity_same_checksum() {
        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        let c = t.clone();
        assert_ne!(t.id(), c.id());
        assert_eq!(t.checksum(), c.checksum());
    }
}
