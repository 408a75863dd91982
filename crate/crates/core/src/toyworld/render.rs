//! Top-down rasterizer. The view is centered on the ego pose at the rendered
//! time: forward points up the image, left points to smaller columns, and the
//! ego sits at row `frame_size·3/4`, column `frame_size/2`.

use serde::{Deserialize, Serialize};

use super::{to_ego_frame, Point, Scenario, WorldConfig, TIMELINE};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// H × W intensities in [0, 1], quantized to 1/255 steps.
    pub pixels: Matrix,
    pub t_index: usize,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Maps ego-frame meters to fractional pixel coordinates and back.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Raster {
    pub size: usize,
    pub mpp: f64,
    pub ego_row: f64,
    pub ego_col: f64,
}

impl Raster {
    pub fn new(config: &WorldConfig) -> Self {
        Self {
            size: config.frame_size,
            mpp: config.meters_per_pixel,
            ego_row: (config.frame_size * 3 / 4) as f64,
            ego_col: (config.frame_size / 2) as f64,
        }
    }

    /// Ego-frame position of the center of pixel (r, c).
    pub fn pixel_center(&self, r: usize, c: usize) -> Point {
        [
            (self.ego_row - r as f64) * self.mpp,
            (self.ego_col - c as f64) * self.mpp,
        ]
    }

    /// Pixel index range whose centers may lie within `reach` of the box.
    fn span(&self, lo: Point, hi: Point, reach: f64) -> Option<(usize, usize, usize, usize)> {
        let n = self.size as f64;
        let r0 = (self.ego_row - (hi[0] + reach) / self.mpp).floor().max(0.0);
        let r1 = (self.ego_row - (lo[0] - reach) / self.mpp).ceil().min(n - 1.0);
        let c0 = (self.ego_col - (hi[1] + reach) / self.mpp).floor().max(0.0);
        let c1 = (self.ego_col - (lo[1] - reach) / self.mpp).ceil().min(n - 1.0);
        if r0 > r1 || c0 > c1 {
            return None;
        }
        Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn fill_disc(img: &mut Matrix, raster: &Raster, center: Point, radius: f64, value: f64) {
    if let Some((r0, r1, c0, c1)) = raster.span(center, center, radius) {
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = raster.pixel_center(r, c);
                if (p[0] - center[0]).hypot(p[1] - center[1]) <= radius {
                    img.set(r, c, value);
                }
            }
        }
    }
}

/// Rasterize lane, obstacles and ego marker at timeline index `t_index`
/// (0..36, 15 = current frame).
pub fn render_frame(scenario: &Scenario, t_index: usize, config: &WorldConfig) -> Result<Frame> {
    if t_index >= TIMELINE {
        return Err(Error::InvalidArgument(format!(
            "t_index {t_index} outside 0..{TIMELINE}"
        )));
    }
    let pose = scenario.pose_at(t_index)?;
    let raster = Raster::new(config);
    let n = config.frame_size;
    let mut img = Matrix::filled(n, n, quantize(config.background));

    let lane = to_ego_frame(&scenario.lane, pose);
    let lane_v = quantize(config.lane_intensity);
    for seg in lane.windows(2) {
        let lo = [seg[0][0].min(seg[1][0]), seg[0][1].min(seg[1][1])];
        let hi = [seg[0][0].max(seg[1][0]), seg[0][1].max(seg[1][1])];
        if let Some((r0, r1, c0, c1)) = raster.span(lo, hi, config.lane_half_width) {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = raster.pixel_center(r, c);
                    if seg_dist(p, seg[0], seg[1]) <= config.lane_half_width {
                        img.set(r, c, lane_v);
                    }
                }
            }
        }
    }

    let obs_v = quantize(config.obstacle_intensity);
    for o in &scenario.obstacles {
        let center = to_ego_frame(&[o.center], pose)[0];
        fill_disc(&mut img, &raster, center, o.radius, obs_v);
    }
    fill_disc(
        &mut img,
        &raster,
        [0.0, 0.0],
        config.ego_marker_radius,
        quantize(config.ego_intensity),
    );
    Ok(Frame {
        pixels: img,
        t_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{from_ego_frame, generate_scenario, Obstacle, CURRENT};

    fn empty_world() -> (Scenario, WorldConfig) {
        let cfg = WorldConfig {
            obstacle_count: [0, 0],
            ego_marker_radius: 0.1,
            ..WorldConfig::default()
        };
        let mut s = generate_scenario(1, &cfg).unwrap();
        s.lane.clear();
        (s, cfg)
    }

    #[test]
    fn empty_world_is_background_plus_ego() {
        let (s, mut cfg) = empty_world();
        cfg.background = 0.2;
        cfg.ego_marker_radius = 0.0;
        cfg.ego_intensity = 0.2;
        let f = render_frame(&s, CURRENT, &cfg).unwrap();
        let bg = (0.2f64 * 255.0).round() / 255.0;
        assert!(f.pixels.data().iter().all(|&v| v == bg));
    }

    #[test]
    fn centered_obstacle_is_a_disc() {
        let (mut s, cfg) = empty_world();
        let raster = Raster::new(&cfg);
        let center = raster.pixel_center(16, 16);
        s.obstacles.push(Obstacle {
            center: from_ego_frame(&[center], s.current_pose())[0],
            radius: 2.0,
        });
        let f = render_frame(&s, CURRENT, &cfg).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let p = raster.pixel_center(r, c);
                let inside = (p[0] - center[0]).hypot(p[1] - center[1]) <= 2.0 - 1e-9;
                if inside {
                    assert_eq!(f.pixels.get(r, c), 1.0, "({r},{c})");
                }
            }
        }
        assert_eq!(f.pixels.get(16, 16), 1.0);
        assert_eq!(f.pixels.get(16, 18), 0.0);
        assert_eq!(f.pixels.get(16, 17), 1.0);
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let cfg = WorldConfig::default();
        let s = generate_scenario(12, &cfg).unwrap();
        for t in [0, CURRENT, 35] {
            let a = render_frame(&s, t, &cfg).unwrap();
            let b = render_frame(&s, t, &cfg).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
            assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(render_frame(&s, 36, &cfg).is_err());
    }

    #[test]
    fn ego_marker_sits_at_anchor_pixel() {
        let cfg = WorldConfig::default();
        let s = generate_scenario(2, &cfg).unwrap();
        let f = render_frame(&s, CURRENT, &cfg).unwrap();
        assert_eq!(f.pixels.get(24, 16), (0.7f64 * 255.0).round() / 255.0);
    }
}
