//! Point-inclusion tests for object shapes and mask rasterization.
//!
//! Shapes live in a unit frame: the object's center is the origin and
//! coordinates are divided by its radius after undoing its rotation.

use ndarray::Array2;

use super::catalog::ShapeKind;
use super::scene::{PlacedObject, SceneManifest};

fn inside_regular_polygon(x: f64, y: f64, sides: usize, start: f64) -> bool {
    // Convex polygon inscribed in the unit circle: inside all edge half-planes.
    let apothem = (std::f64::consts::PI / sides as f64).cos();
    (0..sides).all(|i| {
        let mid = start + (i as f64 + 0.5) * std::f64::consts::TAU / sides as f64;
        x * mid.cos() + y * mid.sin() <= apothem
    })
}

fn inside_star(x: f64, y: f64) -> bool {
    // Five-pointed star with inner radius 0.45. Fold the angle into one
    // tip-to-notch sector and test against that edge.
    let r = (x * x + y * y).sqrt();
    if r > 1.0 {
        return false;
    }
    let sector = std::f64::consts::TAU / 10.0;
    let t = (y.atan2(x) - std::f64::consts::FRAC_PI_2).rem_euclid(2.0 * sector);
    let t = if t > sector { 2.0 * sector - t } else { t };
    let (ax, ay) = (1.0, 0.0);
    let (bx, by) = (0.45 * sector.cos(), 0.45 * sector.sin());
    let (px, py) = (r * t.cos(), r * t.sin());
    // The origin lies on the positive side of the tip->notch edge.
    (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
}

/// Whether the unit-frame point lies inside the shape.
pub fn shape_contains(shape: ShapeKind, x: f64, y: f64) -> bool {
    match shape {
        ShapeKind::Circle => x * x + y * y <= 1.0,
        ShapeKind::Square => x.abs() <= 0.7 && y.abs() <= 0.7,
        ShapeKind::Triangle => inside_regular_polygon(x, y, 3, -std::f64::consts::FRAC_PI_2),
        ShapeKind::Star => inside_star(x, y),
        ShapeKind::Cross => (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95),
        ShapeKind::Ring => {
            let r2 = x * x + y * y;
            (0.5 * 0.5..=1.0).contains(&r2)
        }
        ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
        ShapeKind::Hexagon => inside_regular_polygon(x, y, 6, 0.0),
    }
}

impl PlacedObject {
    /// Maps pixel-space coordinates into the object's unit frame.
    pub fn to_unit_frame(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.rotation.sin_cos();
        ((c * dx + s * dy) / self.radius, (-s * dx + c * dy) / self.radius)
    }

    /// Pixel (row, col) coverage test at the pixel center.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (ux, uy) = self.to_unit_frame(col as f64 + 0.5, row as f64 + 0.5);
        shape_contains(self.shape, ux, uy)
    }
}

/// Rasterizes the known-class objects of a manifest into a label mask
/// (`0` background, `class_id + 1` per object). Later objects overwrite
/// earlier ones.
pub fn rasterize_mask(manifest: &SceneManifest, height: usize, width: usize) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((height, width));
    for obj in &manifest.objects {
        let (r0, r1, c0, c1) = obj.pixel_bounds(height, width);
        for row in r0..r1 {
            for col in c0..c1 {
                if obj.covers(row, col) {
                    mask[[row, col]] = crate::data_synth::label_of(obj.class_id);
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_contains_its_center_region() {
        for shape in ShapeKind::ALL {
            let hits = (0..400)
                .filter(|i| {
                    let x = (i % 20) as f64 / 10.0 - 0.95;
                    let y = (i / 20) as f64 / 10.0 - 0.95;
                    shape_contains(shape, x, y)
                })
                .count();
            assert!(hits > 40, "{shape:?} too thin: {hits}");
            assert!(!shape_contains(shape, 1.2, 1.2));
        }
    }

    #[test]
    fn ring_has_a_hole() {
        assert!(!shape_contains(ShapeKind::Ring, 0.0, 0.0));
        assert!(shape_contains(ShapeKind::Ring, 0.75, 0.0));
    }

    #[test]
    fn star_tips_and_notches() {
        assert!(shape_contains(ShapeKind::Star, 0.0, 0.95));
        assert!(shape_contains(ShapeKind::Star, 0.0, 0.0));
        // Between two tips at mid radius lies a notch.
        let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU / 10.0;
        assert!(!shape_contains(ShapeKind::Star, 0.8 * a.cos(), 0.8 * a.sin()));
    }
}
