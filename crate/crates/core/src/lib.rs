pub mod archive;
pub mod augment;
pub mod contrastive;
pub mod datasets;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod probe;
pub mod surgery;
pub mod tape;
pub mod tensor;

pub use archive::TensorMap;
pub use error::{Error, Result};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
