//! Cone-beam DRR rendering.
//!
//! [`render_drr`] marches each detector ray through the trilinear field at a
//! fixed step. [`render_drr_exact`] sums exact per-voxel chord lengths and is
//! the reference the marcher is tested against.

mod drr;
mod geometry;
mod image;

pub use drr::{default_step, ray_integral_exact, ray_integral_sampled, render_drr, render_drr_exact};
pub use geometry::{
    pose_from_action, pose_from_action_bounded, Action, BaseView, ConeBeamGeometry, Rig, Vec3,
    DEFAULT_ACTION_BOUND,
};
pub use image::{to_display, ProjectionImage};
