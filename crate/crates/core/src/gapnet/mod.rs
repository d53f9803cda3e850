//! Part-based prior network: per-part geometry and appearance MLPs over a
//! UV-anchored primitive set, a per-part identity codebook and a screen-space
//! convolutional refiner.

mod codebook;
mod model;

pub use codebook::{combine_identity, combine_identity_op, softmax};
pub use model::{
    code_name, encoding_name, inversion_name, offsets_name, personal_name, AvatarOutput, GapNet, Identity,
    ModelConfig, RenderedImages, APPEARANCE_DIM, GEOMETRY_DIM, RGB_DIM,
};
