use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::element::Element;
use crate::error::Result;
use crate::tensor::Tensor;

/// Storage behind a [`Parameter`].
#[derive(Debug)]
pub struct ParamSlot<T> {
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Shared, mutable handle to a trainable tensor.
///
/// Clones alias the same storage: an update through one handle is visible
/// through every other, which is how weight sharing is expressed.
#[derive(Clone, Debug)]
pub struct Parameter<T>(Arc<RwLock<ParamSlot<T>>>);

impl<T: Element> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Parameter(Arc::new(RwLock::new(ParamSlot {
            value: Arc::new(value),
            grad: None,
            requires_grad: true,
        })))
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        let p = Self::new(value);
        p.write().requires_grad = false;
        p
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ParamSlot<T>> {
        self.0.read().expect("parameter lock poisoned")
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, ParamSlot<T>> {
        self.0.write().expect("parameter lock poisoned")
    }

    /// Cheap handle to the current value.
    pub fn value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.read().value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.read().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.read().value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.read().requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.read().grad.clone()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.write();
        if slot.value.shape() != value.shape() {
            return Err(crate::error::dim_err!(
                "parameter shape {:?} cannot take value of shape {:?}",
                slot.value.shape(),
                value.shape()
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to the value, copying only if a graph still holds it.
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        let mut slot = self.write();
        f(Arc::make_mut(&mut slot.value));
    }

    pub fn accumulate_grad(&self, g: &Tensor<T>) -> Result<()> {
        let mut slot = self.write();
        match slot.grad.as_mut() {
            Some(acc) => acc.add_assign(g)?,
            None => slot.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.write().grad = None;
    }

    /// Identity of the underlying storage.
    pub fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}
