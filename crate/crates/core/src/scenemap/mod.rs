//! Drivable-area products: exact distance transform, the prior over future
//! positions, the scene-context input and waypoint rasterization.

mod context;
mod edt;
pub mod grid_io;
mod ptilde;
mod raster;

pub use context::{build_scene_context, pool_context, SceneContext, SceneStats, CONTEXT_CHANNELS};
pub use edt::{distance_transform, squared_distance_transform, DistanceMap};
pub use ptilde::{build_p_tilde, NormStats, OutOfBounds, PTilde};
pub(crate) use ptilde::clamp_axis;
pub use raster::{rasterize, PointFlags};
