//! File formats: MetaImage volumes, landmark CSV, checkpoints and
//! `key = value` run configuration.

mod checkpoint;
mod config;
mod landmarks;
mod volume;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{model_config_from_text, model_config_to_text, RunConfig};
pub use landmarks::{format_landmarks, parse_landmarks, read_landmarks, write_landmarks};
pub use volume::{
    read_deformation, read_labels, read_scalar, read_volume, write_deformation, write_labels,
    write_scalar, ElementType, Volume,
};
