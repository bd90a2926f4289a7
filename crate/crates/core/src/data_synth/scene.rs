//! Procedural shape scenes with pixel-exact label masks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{ClassCatalog, DistractorFamily, ShapeKind, TextureFamily};
use super::raster::{rasterize_mask, shape_contains};
use crate::error::{invalid, QsrError, Result};

/// Knobs for [`generate_scene`]. Radii are fractions of `min(height, width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub min_textures: usize,
    pub max_textures: usize,
    pub foreground_radius: (f64, f64),
    pub distractor_radius: (f64, f64),
    pub max_retries: usize,
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_distractors: 1,
            max_distractors: 3,
            min_textures: 1,
            max_textures: 2,
            foreground_radius: (0.12, 0.21),
            distractor_radius: (0.10, 0.17),
            max_retries: 200,
            noise: 0.03,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(invalid(format!("image size {}x{} below 32x32", self.height, self.width)));
        }
        if self.min_distractors > self.max_distractors || self.max_distractors > 3 {
            return Err(invalid("distractor range must satisfy min <= max <= 3"));
        }
        if self.min_textures == 0 || self.min_textures > self.max_textures {
            return Err(invalid("need at least one unlabelled texture region"));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi < 0.5;
        if !ok(self.foreground_radius) || !ok(self.distractor_radius) {
            return Err(invalid("radius ranges must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// One known-class object. Geometry is in pixels, `rotation` in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class_id: u32,
    pub shape: ShapeKind,
    pub texture: TextureFamily,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
    pub color: [u8; 3],
    pub secondary: [u8; 3],
}

impl PlacedObject {
    /// Half-open (row0, row1, col0, col1) box enclosing every covered pixel.
    pub fn pixel_bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
        (
            clip((self.cy - self.radius - 1.0).floor(), height),
            clip((self.cy + self.radius + 1.0).ceil(), height),
            clip((self.cx - self.radius - 1.0).floor(), width),
            clip((self.cx + self.radius + 1.0).ceil(), width),
        )
    }
}

/// Unlabelled elliptical clutter region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureRegion {
    pub family: DistractorFamily,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub rotation: f64,
    pub frequency: f64,
    pub phase: f64,
    pub color: [u8; 3],
    pub secondary: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub objects: Vec<PlacedObject>,
    pub textures: Vec<TextureRegion>,
    pub background: [[u8; 3]; 2],
}

/// Image in `[0, 1]` (channels-first) plus a label mask where `0` is
/// background and `class_id + 1` marks a known-class pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaskPair {
    pub class_id: u32,
    pub image: Array3<f32>,
    pub mask: Array2<u8>,
    pub scene_manifest: Option<SceneManifest>,
}

impl ImageMaskPair {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

fn darken(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round() as u8)
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn object_texel(obj: &PlacedObject, ux: f64, uy: f64) -> [f64; 3] {
    let (lx, ly) = (ux * obj.radius, uy * obj.radius);
    let second = match obj.texture {
        TextureFamily::Solid => false,
        TextureFamily::Stripes => (lx / 3.0).floor().rem_euclid(2.0) == 1.0,
        TextureFamily::Checker => ((lx / 3.0).floor() + (ly / 3.0).floor()).rem_euclid(2.0) == 1.0,
        TextureFamily::Dots => {
            let gx = lx - (lx / 4.0).round() * 4.0;
            let gy = ly - (ly / 4.0).round() * 4.0;
            gx * gx + gy * gy <= 1.6 * 1.6
        }
    };
    rgb(if second { obj.secondary } else { obj.color })
}

fn region_texel(region: &TextureRegion, px: f64, py: f64, grain: f64) -> Option<[f64; 3]> {
    let (dx, dy) = (px - region.cx, py - region.cy);
    let (s, c) = region.rotation.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    if (u / region.half_w).powi(2) + (v / region.half_h).powi(2) > 1.0 {
        return None;
    }
    let (a, b) = (rgb(region.color), rgb(region.secondary));
    let t = match region.family {
        DistractorFamily::Grain => grain,
        DistractorFamily::Waves => 0.5 + 0.5 * (region.frequency * u + region.phase).sin(),
        DistractorFamily::Blotch => {
            let f = region.frequency * 0.35;
            0.5 + 0.5 * ((f * u + region.phase).sin() * (f * v - region.phase).cos())
        }
    };
    Some(mix(a, b, t))
}

const HUE_JITTER: f64 = 12.0 / 360.0;

fn class_color<R: Rng>(rng: &mut R, hue_deg: u16) -> [u8; 3] {
    let hue = f64::from(hue_deg) / 360.0 + rng.random_range(-HUE_JITTER..=HUE_JITTER);
    hsv(hue, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0))
}

fn place<R: Rng>(
    rng: &mut R,
    params: &SceneParams,
    radius_range: (f64, f64),
    placed: &[PlacedObject],
) -> Option<(f64, f64, f64)> {
    let side = params.height.min(params.width) as f64;
    for _ in 0..params.max_retries {
        let radius = rng.random_range(radius_range.0..=radius_range.1) * side;
        let (lo, hi_x, hi_y) = (radius + 1.0, params.width as f64 - radius - 1.0, params.height as f64 - radius - 1.0);
        if lo > hi_x || lo > hi_y {
            continue;
        }
        let cx = rng.random_range(lo..=hi_x);
        let cy = rng.random_range(lo..=hi_y);
        let clear = placed.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d > o.radius + radius + 1.5
        });
        if clear {
            return Some((cx, cy, radius));
        }
    }
    None
}

fn build_manifest(catalog: &ClassCatalog, class_id: u32, rng: &mut ChaCha8Rng, params: &SceneParams) -> Result<SceneManifest> {
    let (h, w) = (params.height as f64, params.width as f64);
    let background = [
        hsv(rng.random::<f64>(), rng.random_range(0.0..0.35), rng.random_range(0.25..0.8)),
        hsv(rng.random::<f64>(), rng.random_range(0.0..0.35), rng.random_range(0.25..0.8)),
    ];
    let n_textures = rng.random_range(params.min_textures..=params.max_textures);
    let textures = (0..n_textures)
        .map(|_| {
            let family = catalog.distractor_families[rng.random_range(0..catalog.distractor_families.len())];
            let color = hsv(rng.random::<f64>(), rng.random_range(0.1..0.9), rng.random_range(0.3..0.95));
            TextureRegion {
                family,
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                half_w: rng.random_range(0.15..0.4) * w,
                half_h: rng.random_range(0.15..0.4) * h,
                rotation: rng.random_range(0.0..std::f64::consts::PI),
                frequency: rng.random_range(0.5..1.3),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                color,
                secondary: darken(color, rng.random_range(0.3..0.6)),
            }
        })
        .collect();

    let mut objects: Vec<PlacedObject> = Vec::new();
    let mut others: Vec<u32> = catalog.class_ids().filter(|&c| c != class_id).collect();
    let n_distractors = rng.random_range(params.min_distractors..=params.max_distractors).min(others.len());
    let mut wanted = vec![class_id];
    for _ in 0..n_distractors {
        let pick = rng.random_range(0..others.len());
        wanted.push(others.swap_remove(pick));
    }
    for (i, cls) in wanted.into_iter().enumerate() {
        let range = if i == 0 { params.foreground_radius } else { params.distractor_radius };
        let (cx, cy, radius) = place(rng, params, range, &objects).ok_or_else(|| {
            QsrError::Generation(format!("could not place object of class {cls} after {} tries", params.max_retries))
        })?;
        let desc = catalog.get(cls)?;
        let color = class_color(rng, desc.hue_deg);
        objects.push(PlacedObject {
            class_id: cls,
            shape: desc.shape,
            texture: desc.texture,
            cx,
            cy,
            radius,
            rotation: rng.random_range(0.0..std::f64::consts::TAU),
            color,
            secondary: darken(color, rng.random_range(0.25..0.45)),
        });
    }
    Ok(SceneManifest { objects, textures, background })
}

fn render(manifest: &SceneManifest, rng: &mut ChaCha8Rng, params: &SceneParams) -> Array3<f32> {
    let (h, w) = (params.height, params.width);
    let (top, bottom) = (rgb(manifest.background[0]), rgb(manifest.background[1]));
    let mut image = Array3::<f32>::zeros((3, h, w));
    for row in 0..h {
        for col in 0..w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut color = mix(top, bottom, py / h as f64);
            for region in &manifest.textures {
                let grain = rng.random::<f64>();
                if let Some(c) = region_texel(region, px, py, grain) {
                    color = c;
                }
            }
            for obj in &manifest.objects {
                let (ux, uy) = obj.to_unit_frame(px, py);
                if shape_contains(obj.shape, ux, uy) {
                    color = object_texel(obj, ux, uy);
                }
            }
            for (ch, value) in color.iter().enumerate() {
                let noisy = value + rng.random_range(-params.noise..=params.noise);
                image[[ch, row, col]] = f32::from((noisy.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0;
            }
        }
    }
    image
}

/// Renders one scene whose foreground object has class `class_id`.
/// Output is a pure function of the arguments.
pub fn generate_scene(catalog: &ClassCatalog, class_id: u32, rng_seed: u64, params: &SceneParams) -> Result<ImageMaskPair> {
    params.validate()?;
    catalog.get(class_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let manifest = build_manifest(catalog, class_id, &mut rng, params)?;
    let image = render(&manifest, &mut rng, params);
    let mask = rasterize_mask(&manifest, params.height, params.width);
    for obj in &manifest.objects {
        let label = super::label_of(obj.class_id);
        if !mask.iter().any(|&m| m == label) {
            return Err(QsrError::Generation(format!("object of class {} rasterized to zero pixels", obj.class_id)));
        }
    }
    Ok(ImageMaskPair { class_id, image, mask, scene_manifest: Some(manifest) })
}
