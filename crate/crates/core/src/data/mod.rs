//! Episode data model, ego-frame normalization and file formats.

mod frame;
pub mod io;
mod types;

pub use frame::{from_ego_frame, nearest_agents, split_past_pred, to_ego_frame};
pub use io::{load_episodes, load_mask, load_predictions, save_episodes, save_mask, save_predictions};
pub use types::{
    AgentPrediction, Episode, GridGeometry, Position, PredictionSet, RoadMask, TrackPoint,
    Trajectory, FRAME_DT, MASK_RESOLUTION, MASK_SIZE, PAST_LEN, PRED_LEN,
};
