pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{init_linear, randn, Bound, ParamSet};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
