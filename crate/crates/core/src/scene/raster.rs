use serde::{Deserialize, Serialize};

use super::polygon::{fill_centers, Lattice};
use super::{AgentId, Scene};
use crate::error::{Error, Result};
use crate::geometry::{derive_kinematics, Point};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub width_px: usize,
    pub height_px: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Position of the target as fractions of image width and height, measured
    /// from the bottom-left corner.
    pub ego_center: [f64; 2],
    /// Footprint length and width in meters.
    pub footprint: [f64; 2],
    /// Intensity factor per step back in time.
    pub fade: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig::desk()
    }
}

impl RasterConfig {
    pub fn desk() -> Self {
        RasterConfig {
            width_px: 64,
            height_px: 64,
            resolution: 1.0,
            ego_center: [0.25, 0.5],
            footprint: [4.5, 2.0],
            fade: 0.8,
        }
    }

    pub fn large() -> Self {
        RasterConfig {
            width_px: 224,
            height_px: 224,
            resolution: 0.25,
            ..RasterConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::invalid("raster resolution must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fade) {
            return Err(Error::invalid("fade must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Covered extent in meters (width, height).
    pub fn extent(&self) -> [f64; 2] {
        [
            self.width_px as f64 * self.resolution,
            self.height_px as f64 * self.resolution,
        ]
    }

    /// Actor-frame coordinates of the bottom-left corner of the image.
    pub fn origin(&self) -> Point {
        let [w, h] = self.extent();
        [-self.ego_center[0] * w, -self.ego_center[1] * h]
    }
}

/// Image in the actor frame, stored row-major with row 0 at the top and
/// channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Actor-frame coordinates of the bottom-left image corner.
    pub origin: Point,
    pub pixels: Vec<f32>,
}

impl RasterImage {
    pub fn zeros(cfg: &RasterConfig) -> Self {
        RasterImage {
            width: cfg.width_px,
            height: cfg.height_px,
            resolution: cfg.resolution,
            origin: cfg.origin(),
            pixels: vec![0.0; cfg.width_px * cfg.height_px * CHANNELS],
        }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * CHANNELS + channel]
    }

    fn set_max(&mut self, row: usize, col: usize, channel: usize, v: f32) {
        let px = &mut self.pixels[(row * self.width + col) * CHANNELS + channel];
        *px = px.max(v);
    }

    /// Pixel containing an actor-frame point, as (row, col).
    pub fn pixel_of(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.resolution).floor();
        let r = ((p[1] - self.origin[1]) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((self.height - 1 - r as usize, c as usize))
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + ((self.height - 1 - row) as f64 + 0.5) * self.resolution,
        ]
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        self.pixels.iter().skip(channel).step_by(CHANNELS).copied().collect()
    }

    /// Channel-first layout `[C, H, W]` for the convolutional encoder.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..CHANNELS {
            out.extend(self.pixels.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64));
        }
        out
    }

    /// Fill an oriented box centered at `center` with heading `heading`.
    fn stamp_box(&mut self, channel: usize, center: Point, heading: f64, size: [f64; 2], v: f32) {
        let (s, c) = heading.sin_cos();
        let (hl, hw) = (size[0] / 2.0, size[1] / 2.0);
        let reach = hl.hypot(hw);
        let res = self.resolution;
        let col_lo = ((center[0] - reach - self.origin[0]) / res).floor().max(0.0) as usize;
        let col_hi = ((center[0] + reach - self.origin[0]) / res)
            .ceil()
            .min(self.width as f64);
        let row_lo = ((center[1] - reach - self.origin[1]) / res).floor().max(0.0) as usize;
        let row_hi = ((center[1] + reach - self.origin[1]) / res)
            .ceil()
            .min(self.height as f64);
        if col_hi <= 0.0 || row_hi <= 0.0 {
            return;
        }
        for lr in row_lo..row_hi as usize {
            let y = self.origin[1] + (lr as f64 + 0.5) * res - center[1];
            for col in col_lo..col_hi as usize {
                let x = self.origin[0] + (col as f64 + 0.5) * res - center[0];
                let (u, w) = (c * x + s * y, -s * x + c * y);
                if u.abs() <= hl && w.abs() <= hw {
                    self.set_max(self.height - 1 - lr, col, channel, v);
                }
            }
        }
    }
}

/// Render the scene around `agent_id` in its actor frame.
///
/// Channel 0 is the drivable area, channel 1 the history footprints of every
/// other agent, channel 2 the history footprint of the target. Older
/// footprints are dimmed by `fade` per step.
pub fn rasterize(scene: &Scene, agent_id: AgentId, cfg: &RasterConfig) -> Result<RasterImage> {
    cfg.validate()?;
    let pose = scene.actor_pose(agent_id)?;
    let mut img = RasterImage::zeros(cfg);

    let local: Vec<_> = scene.map.drivable.iter().map(|p| p.to_local(&pose)).collect();
    let lattice = Lattice {
        origin: img.origin,
        spacing: cfg.resolution,
        cols: cfg.width_px,
        rows: cfg.height_px,
    };
    for (i, inside) in fill_centers(&local, &lattice).into_iter().enumerate() {
        if inside {
            let (lr, col) = (i / cfg.width_px, i % cfg.width_px);
            img.pixels[((cfg.height_px - 1 - lr) * cfg.width_px + col) * CHANNELS] = 1.0;
        }
    }

    let m = scene.history_len as i64;
    for agent in &scene.agents {
        let channel = if agent.id == agent_id { 2 } else { 1 };
        // one extra leading state so the oldest footprint gets a heading
        let Ok(window) = agent.trajectory.window(scene.ref_time - m, scene.ref_time) else {
            continue;
        };
        let kin = derive_kinematics(&window)?;
        for (k, st) in window.states().iter().enumerate().skip(1) {
            let age = (scene.ref_time - st.t) as i32;
            let v = cfg.fade.powi(age) as f32;
            let center = pose.to_local(st.point());
            // heading of the displacement arriving at this state
            let heading = kin.heading[k - 1] - pose.heading();
            img.stamp_box(channel, center, heading, cfg.footprint, v);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GenConfig, MapData, RoadTemplate};

    fn straight_scene() -> Scene {
        let cfg = GenConfig {
            noise: 0.0,
            ..GenConfig::default()
        };
        generate_scene(&cfg, 5).unwrap()
    }

    #[test]
    fn large_preset_covers_56_meters() {
        assert_eq!(RasterConfig::large().extent(), [56.0, 56.0]);
    }

    #[test]
    fn empty_map_has_empty_drivable_channel() {
        let mut scene = straight_scene();
        scene.map = MapData::default();
        let img = rasterize(&scene, 1, &RasterConfig::desk()).unwrap();
        assert!(img.channel(0).iter().all(|&v| v == 0.0));
        assert!(img.channel(2).contains(&1.0));
    }

    #[test]
    fn target_footprint_centered_at_origin_pixel() {
        let scene = straight_scene();
        let cfg = RasterConfig::large();
        let img = rasterize(&scene, 1, &cfg).unwrap();
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for r in 0..img.height {
            for c in 0..img.width {
                if img.get(r, c, 2) == 1.0 {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        // pixel (row, col) whose corner area contains (0,0)
        let origin_px = img.pixel_of([0.0, 0.0]).unwrap();
        let expect = img.pixel_center(origin_px.0, origin_px.1);
        let centroid_x = img.origin[0] + (sc / n + 0.5) * img.resolution;
        let centroid_y = img.origin[1] + ((img.height as f64 - 1.0 - sr / n) + 0.5) * img.resolution;
        assert!((centroid_x - 0.0).abs() <= img.resolution, "{centroid_x}");
        assert!((centroid_y - 0.0).abs() <= img.resolution, "{centroid_y}");
        assert!((expect[0]).abs() <= img.resolution && (expect[1]).abs() <= img.resolution);
    }

    #[test]
    fn rasterization_is_deterministic_and_bounded() {
        for t in RoadTemplate::ALL {
            let scene = generate_scene(
                &GenConfig {
                    template: t,
                    agents: 3,
                    ..GenConfig::default()
                },
                9,
            )
            .unwrap();
            let a = rasterize(&scene, 1, &RasterConfig::desk()).unwrap();
            let b = rasterize(&scene, 1, &RasterConfig::desk()).unwrap();
            assert_eq!(a, b);
            assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            // the target stands on the road
            let (r, c) = a.pixel_of([0.0, 0.0]).unwrap();
            assert_eq!(a.get(r, c, 0), 1.0);
        }
    }

    #[test]
    fn missing_agent_is_rejected() {
        assert!(rasterize(&straight_scene(), 77, &RasterConfig::desk()).is_err());
    }

    #[test]
    fn pixel_round_trip() {
        let img = RasterImage::zeros(&RasterConfig::desk());
        for (r, c) in [(0, 0), (63, 63), (10, 40)] {
            assert_eq!(img.pixel_of(img.pixel_center(r, c)), Some((r, c)));
        }
        assert_eq!(img.pixel_of([-100.0, 0.0]), None);
    }
}
