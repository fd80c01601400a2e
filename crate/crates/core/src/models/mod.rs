//! Encoder, projector and predictor heads, frozen snapshots, EMA targets
//! and checkpoints.

mod arch;
mod checkpoint;
mod layers;
mod trinet;

pub use arch::{Arch, ModelConfig};
pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, trinet_container, EmbeddingDump,
};
pub use layers::{BnMode, BnUpdate};
pub use trinet::{
    build_trinet, ema_update, embed, encode_features, snapshot, EmaTarget, Forward, FrozenModel,
    TriNet,
};
