//! PNG output for rasters and prediction overlays.

use catf_core::geometry::Point;
use catf_core::scene::RasterImage;
use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

/// Trajectory colors, by credibility rank.
const MODE_COLORS: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 160, 255],
    [255, 200, 0],
    [200, 80, 255],
    [0, 220, 160],
    [255, 128, 0],
];
const TRUTH_COLOR: [u8; 3] = [255, 255, 255];
const HISTORY_COLOR: [u8; 3] = [160, 160, 160];

/// Raster upscaled by `scale`, channels mapped to red, green and blue.
pub fn raster_image(raster: &RasterImage, scale: u32, gain: f32) -> RgbImage {
    RgbImage::from_fn(raster.width as u32 * scale, raster.height as u32 * scale, |x, y| {
        let (row, col) = ((y / scale) as usize, (x / scale) as usize);
        let px = |c| (raster.get(row, col, c).clamp(0.0, 1.0) * gain * 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Image coordinates (x right, y down) of an actor-frame point.
fn to_image(raster: &RasterImage, scale: u32, p: Point) -> (f64, f64) {
    let s = scale as f64;
    let x = (p[0] - raster.origin[0]) / raster.resolution * s;
    let y = (raster.height as f64 - (p[1] - raster.origin[1]) / raster.resolution) * s;
    (x, y)
}

fn dot(img: &mut RgbImage, x: f64, y: f64, radius: i64, color: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if dx * dx + dy * dy <= radius * radius
                && px >= 0
                && py >= 0
                && (px as u32) < img.width()
                && (py as u32) < img.height()
            {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

/// Polyline through actor-frame points, stamped every half pixel.
pub fn draw_path(img: &mut RgbImage, raster: &RasterImage, scale: u32, pts: &[Point], radius: i64, color: [u8; 3]) {
    let px: Vec<(f64, f64)> = pts.iter().map(|&p| to_image(raster, scale, p)).collect();
    if let [only] = px[..] {
        dot(img, only.0, only.1, radius, color);
    }
    for w in px.windows(2) {
        let (a, b) = (w[0], w[1]);
        let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            dot(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), radius, color);
        }
    }
}

/// 8x8 bitmap text magnified `size` times, top-left corner at `(x, y)`.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, size: i64, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = BASIC_LEGACY.get(ch as usize) else {
            continue;
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for sy in 0..size {
                    for sx in 0..size {
                        let px = x + (i as i64 * 8 + col) * size + sx;
                        let py = y + row as i64 * size + sy;
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, Rgb(color));
                        }
                    }
                }
            }
        }
    }
}

/// Two-decimal labels for a distribution. Rounding distributes the leftover
/// hundredths by largest remainder, so the labels always add up to 1.00.
pub fn credibility_labels(credibility: &[f64]) -> Vec<String> {
    let cents: Vec<f64> = credibility.iter().map(|c| c * 100.0).collect();
    let mut out: Vec<i64> = cents.iter().map(|c| c.floor() as i64).collect();
    let missing = 100 - out.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..cents.len()).collect();
    order.sort_by(|&a, &b| {
        (cents[b] - cents[b].floor())
            .total_cmp(&(cents[a] - cents[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(missing.max(0) as usize) {
        out[i] += 1;
    }
    out.iter().map(|c| format!("{}.{:02}", c / 100, c % 100)).collect()
}

pub struct Overlay<'a> {
    pub raster: &'a RasterImage,
    pub history: &'a [Point],
    pub truth: &'a [Point],
    pub modes: &'a [Vec<Point>],
    pub labels: &'a [String],
}

/// Raster with history, ground truth and each predicted mode labeled by its
/// credibility at the trajectory end. `modes` are drawn in the given order.
pub fn overlay_image(o: &Overlay, scale: u32) -> RgbImage {
    let mut img = raster_image(o.raster, scale, 0.5);
    draw_path(&mut img, o.raster, scale, o.history, 1, HISTORY_COLOR);
    draw_path(&mut img, o.raster, scale, o.truth, 1, TRUTH_COLOR);
    for (i, traj) in o.modes.iter().enumerate().rev() {
        draw_path(&mut img, o.raster, scale, traj, 1, MODE_COLORS[i % MODE_COLORS.len()]);
    }
    for (i, (traj, label)) in o.modes.iter().zip(o.labels).enumerate() {
        if let Some(&end) = traj.last() {
            let (x, y) = to_image(o.raster, scale, end);
            let w = (label.len() * 16) as i64;
            let x = (x as i64 + 4).min(img.width() as i64 - w).max(0);
            let y = (y as i64 - 8).clamp(0, img.height() as i64 - 16);
            draw_text(&mut img, x, y, label, 2, MODE_COLORS[i % MODE_COLORS.len()]);
        }
    }
    img
}
