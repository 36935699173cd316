use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, NumCast, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar type a tensor can hold. f32 is the training default; f64 backs the
/// gradient checks and oracle tests where tolerances are tight.
pub trait Element: Float + fmt::Debug + fmt::Display + Default + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self {
        NumCast::from(v).expect("f64 -> element cast")
    }

    fn into_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("element -> f64 cast")
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

struct Inner<E> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
}

/// Dense row-major tensor with shared storage: cloning a `Tensor` is cheap
/// and aliases the same buffer. Data is interior-mutable so optimizers can
/// update parameters in place; the gradient buffer lives beside the data and
/// accumulates additively every time a backward pass reaches this tensor.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} describes {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, requires_grad))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![E::zero(); n], requires_grad)
    }

    pub fn full(shape: &[usize], value: E, requires_grad: bool) -> Self {
        let n: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n], requires_grad)
    }

    pub fn scalar(value: E) -> Self {
        Self::raw(vec![1], vec![value], false)
    }

    /// Convenience constructor used widely in tests: casts f64 literals into
    /// the element type.
    pub fn from_f64s(shape: &[usize], values: &[f64], requires_grad: bool) -> Result<Self> {
        let data = values.iter().map(|&v| E::from_f64(v)).collect();
        Self::new(shape, data, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// In-place access for optimizers and stat buffers. Panics if the buffer
    /// is currently borrowed (i.e. mid-op); callers update parameters only
    /// between forward/backward passes.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn set_data(&self, values: Vec<E>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "set_data: expected {} elements, got {}",
                self.len(),
                values.len()
            )));
        }
        *self.inner.data.borrow_mut() = values;
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.into_f64()).collect()
    }

    /// Value of a single-element tensor. Panics on anything larger; use only
    /// where the shape is a structural guarantee (losses, scalars).
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert!(d.len() == 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first
    /// touch. No-op for tensors that do not require gradients, so backward
    /// closures can call it unconditionally.
    pub fn accum_grad(&self, delta: &[E]) {
        if !self.inner.requires_grad {
            return;
        }
        assert!(delta.len() == self.len(), "gradient length mismatch");
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b = *b + *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>{:?} requires_grad={}",
            E::DTYPE,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}
