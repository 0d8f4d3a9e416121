use crate::tensor::{Scalar, Tensor};

/// Stable identity of a trainable parameter within one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor plus its accumulated gradient.
///
/// Gradients accumulate across backward passes until [`Param::zero_grad`].
#[derive(Debug, Clone)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(id: ParamId, name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            id,
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> crate::Result<()> {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                g.expect_shape(self.value.shape(), "accumulate_grad")?;
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

/// Hands out sequential parameter ids while a model is being built.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    next: usize,
}

impl ParamAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create<T: Scalar>(&mut self, name: impl Into<String>, value: Tensor<T>) -> Param<T> {
        let id = ParamId(self.next);
        self.next += 1;
        Param::new(id, name, value)
    }

    pub fn count(&self) -> usize {
        self.next
    }
}
