//! Parametric head mesh: template, skinning, per-face frames, part labels
//! and the as-rigid-as-possible energy.

mod arap;
mod frames;
mod io;
mod lbs;
mod params;
mod parts;
mod template;

pub use arap::{arap_energy, arap_energy_op, nearest_rotation, Neighborhoods};
pub use frames::{triangle_frames, triangle_frames_op, TriangleFrame, FRAME_WIDTH};
pub use io::SIDECAR_SCHEMA;
pub use lbs::{lbs_op, pose_mesh, pose_mesh_op, rodrigues, rodrigues_jacobian, shaped_vertices, TemplateTensors};
pub use params::HeadParams;
pub use parts::{Part, NUM_PARTS};
pub use template::{azimuth_of_u, part_at_uv, polar_of_v, HeadTemplate, Joint, SyntheticTemplateConfig, EXPR_DIM, SHAPE_DIM};
