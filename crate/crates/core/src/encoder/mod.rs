//! Toy dual-stream encoders: a one-stage anchor-based image encoder with a
//! deformable gradient bridge, and a hashed bag-of-words text encoder.

mod checkpoint;
mod config;
mod model;
mod text;

pub use checkpoint::{diff_keys, Checkpoint, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::EncoderConfig;
pub use model::{
    clip_box, decode_boxes, region_batch, ConceptEmbeddings, Model, RegionBatch, RegionVars,
    INIT_LOGIT_BIAS, INIT_LOGIT_SCALE,
};
pub use text::{tokenize, words, EMPTY_TOKEN};

#[cfg(test)]
mod tests;
