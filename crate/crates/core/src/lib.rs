pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod margin;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use patch::{patch_count, PatchGridSpec};
pub use tensor::Tensor;
pub use vit::{Checkpoint, ModelParams, Variant, ViTConfig, EMBED_DIM};
