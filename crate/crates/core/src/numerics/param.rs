use serde::{Deserialize, Serialize};

use super::tensor::DenseTensor;

/// A named tensor with a same-shaped gradient buffer.
///
/// Buffers such as batch-norm running statistics are stored as
/// non-trainable params so they travel through checkpoints and hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamNode {
    pub name: String,
    pub value: DenseTensor,
    pub grad: DenseTensor,
    pub trainable: bool,
}

impl ParamNode {
    pub fn new(name: impl Into<String>, value: DenseTensor, trainable: bool) -> Self {
        let grad = DenseTensor::zeros(value.shape());
        ParamNode {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns parameters and can list them in a stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamNode>;
    fn params_mut(&mut self) -> Vec<&mut ParamNode>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
