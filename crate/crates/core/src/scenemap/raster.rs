use std::collections::BTreeSet;

use crate::data::{Position, RoadMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointFlags {
    pub off_grid: bool,
    /// Off the drivable area; always set for off-grid points.
    pub off_drivable: bool,
}

/// Maps points to their nearest mask pixel (round half up on row and column).
pub fn rasterize(points: &[Position], mask: &RoadMask) -> (BTreeSet<(usize, usize)>, Vec<PointFlags>) {
    let geom = mask.geometry();
    let mut pixels = BTreeSet::new();
    let flags = points
        .iter()
        .map(|&p| match geom.nearest_pixel(p) {
            Some((r, c)) => {
                pixels.insert((r, c));
                PointFlags {
                    off_grid: false,
                    off_drivable: !mask.is_drivable(r, c),
                }
            }
            None => PointFlags {
                off_grid: true,
                off_drivable: true,
            },
        })
        .collect();
    (pixels, flags)
}
