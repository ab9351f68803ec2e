use crate::data::RoadMask;
use crate::error::{Error, Result};

/// Euclidean pixel distance to the nearest drivable pixel (0 on drivable pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    // Find the first finite sample; infinite samples never contribute a parabola.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance transform: one separable pass over columns,
/// then rows.
pub fn squared_distance_transform(
    height: usize,
    width: usize,
    is_site: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let n = height.max(width);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut f = vec![0.0f64; n];
    let mut d = vec![0.0f64; n];
    let mut grid: Vec<f64> = (0..height * width)
        .map(|i| if is_site(i / width, i % width) { 0.0 } else { f64::INFINITY })
        .collect();
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        dt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = d[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        dt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    grid
}

pub fn distance_transform(mask: &RoadMask) -> Result<DistanceMap> {
    if mask.drivable_count() == 0 {
        return Err(Error::Precondition("mask has no drivable pixel".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let sq = squared_distance_transform(h, w, |r, c| mask.is_drivable(r, c));
    Ok(DistanceMap {
        height: h,
        width: w,
        values: sq.into_iter().map(f64::sqrt).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Position;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mask: &RoadMask) -> Vec<f64> {
        let (h, w) = (mask.height(), mask.width());
        let sites: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| mask.is_drivable(r, c))
            .collect();
        (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                sites
                    .iter()
                    .map(|&(sr, sc)| (r - sr as f64).powi(2) + (c - sc as f64).powi(2))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn all_drivable_is_zero() {
        let m = RoadMask::from_fn(6, 5, 0.5, Position::ORIGIN, |_, _| true).unwrap();
        assert!(distance_transform(&m).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_pixel_corner_is_sqrt8() {
        let m = RoadMask::from_fn(5, 5, 0.5, Position::ORIGIN, |r, c| r == 2 && c == 2).unwrap();
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.get(0, 0), 8f64.sqrt());
        assert_eq!(d.get(4, 4), 8f64.sqrt());
        assert_eq!(d.get(2, 0), 2.0);
        assert_eq!(d, DistanceMap { height: 5, width: 5, values: brute_force(&m) });
    }

    #[test]
    fn random_masks_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h = rng.random_range(1..=20);
            let w = rng.random_range(1..=20);
            let p: f64 = rng.random_range(0.01..0.6);
            let mut cells: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
            let i = rng.random_range(0..h * w);
            cells[i] = true;
            let m = RoadMask::new(h, w, 0.5, Position::ORIGIN, cells).unwrap();
            assert_eq!(distance_transform(&m).unwrap().values, brute_force(&m));
        }
    }

    #[test]
    fn lipschitz_across_neighbours() {
        let m = RoadMask::from_fn(30, 30, 0.5, Position::ORIGIN, |r, c| (r * 7 + c * 3) % 23 == 0)
            .unwrap();
        let d = distance_transform(&m).unwrap();
        for r in 0..30 {
            for c in 0..29 {
                assert!((d.get(r, c) - d.get(r, c + 1)).abs() <= 1.0 + 1e-9);
                assert!((d.get(c, r) - d.get(c + 1, r)).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
