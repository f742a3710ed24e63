//! Decoder-only micro-transformer with arbitrary boolean attention masks.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod params;
mod tensor;

pub use backward::{
    argmax, gradient, loss_and_gradient, teacher_forced_predictions, training_loss,
    TrainingInstance,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MANIFEST_FILE,
    PAYLOAD_FILE,
};
pub use config::{ModelConfig, Precision};
pub use forward::{attention_scores, embed_sequence, forward_masked, MaskMode, SlotInput};
pub use params::{GradientRecord, LayerParams, ModelParameters};
pub use tensor::{Matrix, Real};

pub(crate) use forward::{attend, embed_inputs, ensure_finite, finish_block, output_head, project};
