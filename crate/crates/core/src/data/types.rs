use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames observed up to and including the present.
pub const PAST_LEN: usize = 4;
/// Frames to forecast after the present.
pub const PRED_LEN: usize = 6;
/// Seconds between frames (2 Hz).
pub const FRAME_DT: f64 = 0.5;

pub const MASK_SIZE: usize = 224;
pub const MASK_RESOLUTION: f64 = 0.5;

const MAX_COORD: f64 = 1.0e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn dist(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x.abs() <= MAX_COORD && self.y.abs() <= MAX_COORD
    }
}

impl std::ops::Add for Position {
    type Output = Position;
    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Position {
    type Output = Position;
    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    /// Frame index at 2 Hz.
    pub t: i64,
    pub pos: Position,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub agent_id: i64,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if !self.points.iter().any(|p| p.observed) {
            return Err(Error::Invariant(format!(
                "agent {} has no observed point",
                self.agent_id
            )));
        }
        for w in self.points.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Invariant(format!(
                    "agent {}: time indices not strictly increasing ({} then {})",
                    self.agent_id, w[0].t, w[1].t
                )));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !p.pos.is_valid()) {
            return Err(Error::Invariant(format!(
                "agent {}: position out of range at frame {}",
                self.agent_id, p.t
            )));
        }
        Ok(())
    }

    pub fn point_at(&self, t: i64) -> Option<&TrackPoint> {
        self.points
            .binary_search_by_key(&t, |p| p.t)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn positions(&self) -> Vec<Position> {
        self.points.iter().map(|p| p.pos).collect()
    }
}

/// Binary drivable-area raster centered on `center`, row axis pointing to -y.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadMask {
    height: usize,
    width: usize,
    resolution: f64,
    /// World position of the grid center.
    pub center: Position,
    drivable: Vec<bool>,
}

impl RoadMask {
    pub fn new(
        height: usize,
        width: usize,
        resolution: f64,
        center: Position,
        drivable: Vec<bool>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || drivable.len() != height * width {
            return Err(Error::Format(format!(
                "mask data length {} does not match {height}x{width}",
                drivable.len()
            )));
        }
        if !(resolution > 0.0) {
            return Err(Error::Format(format!("mask resolution {resolution} not positive")));
        }
        if !drivable.iter().any(|&d| d) {
            return Err(Error::Invariant("road mask has no drivable pixel".into()));
        }
        Ok(RoadMask {
            height,
            width,
            resolution,
            center,
            drivable,
        })
    }

    /// Standard 224x224 mask at 0.5 m/px.
    pub fn standard(center: Position, drivable: Vec<bool>) -> Result<Self> {
        Self::new(MASK_SIZE, MASK_SIZE, MASK_RESOLUTION, center, drivable)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        resolution: f64,
        center: Position,
        f: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, resolution, center, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn drivable(&self) -> &[bool] {
        &self.drivable
    }

    pub fn is_drivable(&self, r: usize, c: usize) -> bool {
        self.drivable[r * self.width + c]
    }

    pub fn drivable_count(&self) -> usize {
        self.drivable.iter().filter(|&&d| d).count()
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            height: self.height,
            width: self.width,
            resolution: self.resolution,
            center: self.center,
        }
    }

    pub(crate) fn with_center(mut self, center: Position) -> Self {
        self.center = center;
        self
    }
}

/// World <-> pixel mapping shared by every raster in the crate.
///
/// Pixel `(r, c)` has its center at
/// `center + ((c - (W-1)/2) * res, ((H-1)/2 - r) * res)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub center: Position,
}

impl GridGeometry {
    /// Square grid of `size x size` cells spanning the same extent as `self`.
    pub fn resampled(&self, size: usize) -> GridGeometry {
        GridGeometry {
            height: size,
            width: size,
            resolution: self.resolution * self.width as f64 / size as f64,
            center: self.center,
        }
    }

    /// Fractional (row, col) coordinates of a world position.
    pub fn to_pixel(&self, p: Position) -> (f64, f64) {
        let c = (p.x - self.center.x) / self.resolution + (self.width as f64 - 1.0) / 2.0;
        let r = (self.height as f64 - 1.0) / 2.0 - (p.y - self.center.y) / self.resolution;
        (r, c)
    }

    pub fn pixel_center(&self, r: usize, c: usize) -> Position {
        Position::new(
            self.center.x + (c as f64 - (self.width as f64 - 1.0) / 2.0) * self.resolution,
            self.center.y + ((self.height as f64 - 1.0) / 2.0 - r as f64) * self.resolution,
        )
    }

    /// Nearest pixel, rounding half up on both axes; `None` when off-grid.
    pub fn nearest_pixel(&self, p: Position) -> Option<(usize, usize)> {
        let (r, c) = self.to_pixel(p);
        let (r, c) = ((r + 0.5).floor(), (c + 0.5).floor());
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub agents: Vec<Trajectory>,
    /// Frame index of the present (t = 0).
    pub present_index: i64,
    pub past_len: usize,
    pub pred_len: usize,
    pub road_mask: Arc<RoadMask>,
    pub ego_agent_id: i64,
    /// Source file of the mask, relative to the episode file.
    pub mask_file: Option<String>,
    /// Translation applied by [`crate::data::to_ego_frame`]; world = local + origin.
    pub origin: Position,
}

impl Episode {
    pub fn agent(&self, id: i64) -> Option<&Trajectory> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Frame indices covered by the episode window.
    pub fn frames(&self) -> std::ops::RangeInclusive<i64> {
        let start = self.present_index - self.past_len as i64 + 1;
        start..=self.present_index + self.pred_len as i64
    }

    pub fn validate(&self) -> Result<()> {
        if self.agent(self.ego_agent_id).is_none() {
            return Err(Error::Invariant("ego agent absent".into()));
        }
        let frames: Vec<i64> = self.frames().collect();
        for a in &self.agents {
            a.validate()?;
            let ts: Vec<i64> = a.points.iter().map(|p| p.t).collect();
            if ts != frames {
                return Err(Error::Invariant(format!(
                    "agent {} does not span frames {}..={} exactly",
                    a.agent_id,
                    frames[0],
                    frames[frames.len() - 1]
                )));
            }
        }
        let mut ids: Vec<i64> = self.agents.iter().map(|a| a.agent_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invariant("duplicate agent id".into()));
        }
        Ok(())
    }
}

/// Sampled futures for one agent: `k` hypotheses of `pred_len` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPrediction {
    pub agent_id: i64,
    pub hypotheses: Vec<Vec<Position>>,
}

impl AgentPrediction {
    pub fn k(&self) -> usize {
        self.hypotheses.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub episode_id: String,
    pub k: usize,
    pub agents: Vec<AgentPrediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invariant("prediction set with k = 0".into()));
        }
        let len = self
            .agents
            .first()
            .and_then(|a| a.hypotheses.first())
            .map(Vec::len);
        for a in &self.agents {
            if a.k() != self.k {
                return Err(Error::Invariant(format!(
                    "agent {} has {} hypotheses, expected {}",
                    a.agent_id,
                    a.k(),
                    self.k
                )));
            }
            if a.hypotheses.iter().any(|h| Some(h.len()) != len) {
                return Err(Error::Invariant(format!(
                    "agent {} has hypotheses of unequal length",
                    a.agent_id
                )));
            }
        }
        Ok(())
    }

    pub fn agent(&self, id: i64) -> Option<&AgentPrediction> {
        self.agents.iter().find(|a| a.agent_id == id)
    }
}
