//! Training and inference around the model components.

pub mod augment;
pub mod checkpoint;
pub mod infer;
pub mod model;
pub mod train;

pub use augment::{make_pair, AffineParams, AugmentSpec};
pub use checkpoint::{load_checkpoint, load_checkpoint_config, load_model, open_checkpoint, registry_for, save_checkpoint};
pub use infer::{discover_parts, swap_reconstruct};
pub use model::{EmbeddingBank, Model, ModelConfig, Precision};
pub use train::{StepReport, TrainConfig, Trainer};
