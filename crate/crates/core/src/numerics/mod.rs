//! Dense tensors, layers, and tape-based reverse-mode gradients.

pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod tape;
pub mod tensor;

pub use layers::{linear_bn_forward, BatchNorm, BnStatsUpdate, Linear, LinearBn, Mode, StatsSink};
pub use param::{ParamNode, Parameterized};
pub use tape::{ComputeTape, Gradients, Tape, Var};
pub use tensor::{dot, l2_normalize, matmul, softmax, softmax_rows, transpose, DenseTensor, EPS_NORM};
