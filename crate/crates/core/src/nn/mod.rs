//! Small VGG-style CNN with DGDM insertion points and a GAP classifier head.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::{argmax_rows, build_model, BackboneSpec, DgdmMode, Model, Params, StageSpec};
pub use ops::softmax;
pub use train::{train, TrainConfig, TrainLog};
