use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::diffusion::text::{compose_prompt, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::numkit::{Grid2D, Rng};

pub const CANVAS: u32 = 64;
pub const BACKGROUND: [u8; 3] = [24, 24, 24];
/// Neutral fill used for layout sketches; not one of the named colors.
pub const LAYOUT_GRAY: [u8; 3] = [128, 128, 128];
pub const MIN_SIZE: u32 = 18;
pub const MAX_SIZE: u32 = 30;
pub const MAX_OBJECTS: usize = 4;
const PLACEMENT_TRIES: usize = 200;
const SCENE_RESTARTS: usize = 50;

pub fn palette(color: &str) -> Option<[u8; 3]> {
    Some(match color {
        "red" => [220, 40, 40],
        "green" => [40, 180, 60],
        "blue" => [50, 80, 230],
        "yellow" => [230, 210, 40],
        "cyan" => [40, 200, 210],
        "magenta" => [200, 50, 200],
        "orange" => [240, 140, 30],
        "white" => [235, 235, 235],
        _ => return None,
    })
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn intersection(&self, o: &BBox) -> u32 {
        let w = self.x1.min(o.x1).saturating_sub(self.x0.max(o.x0));
        let h = self.y1.min(o.y1).saturating_sub(self.y0.max(o.y0));
        w * h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    /// Tight bounds of the rendered mask.
    pub bbox: BBox,
    pub z_order: usize,
    /// Square placement box the shape is drawn into.
    pub frame: BBox,
}

impl SceneObject {
    pub fn label(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn prompt(&self) -> String {
        compose_prompt(&self.objects.iter().map(|o| o.label()).collect::<Vec<_>>())
    }

    pub fn shape_prompt(&self) -> String {
        compose_prompt(
            &self
                .objects
                .iter()
                .map(|o| o.shape.clone())
                .collect::<Vec<_>>(),
        )
    }
}

fn star_polygon(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let rad = if k % 2 == 0 { r } else { 0.45 * r };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect()
}

fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Whether pixel `(px, py)` (sampled at its center) belongs to `shape`
/// drawn into the square `frame`.
pub fn shape_covers(shape: &str, frame: &BBox, px: u32, py: u32) -> bool {
    let s = frame.width() as f64;
    let (x, y) = (
        px as f64 + 0.5 - frame.x0 as f64,
        py as f64 + 0.5 - frame.y0 as f64,
    );
    if x < 0.0 || y < 0.0 || x > s || y > s {
        return false;
    }
    match shape {
        "circle" => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        "square" => {
            let m = 0.1 * s;
            x >= m && x <= s - m && y >= m && y <= s - m
        }
        "triangle" => {
            // apex top-center, base along the bottom
            let t = y / s;
            t >= 0.05 && t <= 0.95 && (x - s / 2.0).abs() <= 0.5 * s * (t - 0.05) / 0.9
        }
        "star" => in_polygon(&star_polygon(s / 2.0, s / 2.0 + 0.04 * s, s / 2.0), x, y),
        _ => false,
    }
}

/// Tight bounds of the shape's mask inside `frame`, or `None` if empty.
pub fn mask_bounds(shape: &str, frame: &BBox) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for py in frame.y0..frame.y1.min(CANVAS) {
        for px in frame.x0..frame.x1.min(CANVAS) {
            if shape_covers(shape, frame, px, py) {
                b = Some(match b {
                    None => BBox {
                        x0: px,
                        y0: py,
                        x1: px + 1,
                        y1: py + 1,
                    },
                    Some(b) => BBox {
                        x0: b.x0.min(px),
                        y0: b.y0.min(py),
                        x1: b.x1.max(px + 1),
                        y1: b.y1.max(py + 1),
                    },
                });
            }
        }
    }
    b
}

/// Draws the scene; `fill` overrides every object's color (layout sketches).
pub fn render(spec: &SceneSpec, fill: Option<[u8; 3]>) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel(CANVAS, CANVAS, Rgb(BACKGROUND));
    let mut order: Vec<&SceneObject> = spec.objects.iter().collect();
    order.sort_by_key(|o| o.z_order);
    for o in order {
        let rgb = match fill {
            Some(f) => f,
            None => palette(&o.color).ok_or_else(|| Error::Vocabulary(o.color.clone()))?,
        };
        if !SHAPES.contains(&o.shape.as_str()) {
            return Err(Error::Vocabulary(o.shape.clone()));
        }
        for py in o.frame.y0..o.frame.y1.min(CANVAS) {
            for px in o.frame.x0..o.frame.x1.min(CANVAS) {
                if shape_covers(&o.shape, &o.frame, px, py) {
                    img.put_pixel(px, py, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

/// What each object of a generated scene looks like.
#[derive(Clone, Debug, PartialEq)]
pub enum ObjectPlan {
    /// Distinct shapes and distinct colors, drawn at random.
    Distinct,
    /// Every object shares one shape and one color; sizes differ by at most a pixel.
    Duplicated,
}

fn pick_distinct(rng: &mut Rng, pool: &[&'static str], n: usize) -> Vec<&'static str> {
    let mut v: Vec<&'static str> = pool.to_vec();
    rng.shuffle(&mut v);
    v.truncate(n);
    v
}

pub fn gen_scene(rng: &mut Rng, n_objects: usize) -> Result<(RgbImage, SceneSpec)> {
    gen_scene_with(rng, n_objects, &ObjectPlan::Distinct)
}

pub fn gen_scene_with(
    rng: &mut Rng,
    n_objects: usize,
    plan: &ObjectPlan,
) -> Result<(RgbImage, SceneSpec)> {
    if n_objects == 0 || n_objects > MAX_OBJECTS {
        return Err(Error::argument(format!(
            "n_objects must lie in [1, {MAX_OBJECTS}], got {n_objects}"
        )));
    }
    let (shapes, colors, sizes): (Vec<&str>, Vec<&str>, Vec<u32>) = match plan {
        ObjectPlan::Distinct => (
            pick_distinct(rng, &SHAPES, n_objects),
            pick_distinct(rng, &COLORS, n_objects),
            (0..n_objects)
                .map(|_| rng.below(MIN_SIZE as usize, MAX_SIZE as usize + 1) as u32)
                .collect(),
        ),
        ObjectPlan::Duplicated => {
            let s = SHAPES[rng.below(0, SHAPES.len())];
            let c = COLORS[rng.below(0, COLORS.len())];
            let base = rng.below(MIN_SIZE as usize, MAX_SIZE as usize) as u32;
            (
                vec![s; n_objects],
                vec![c; n_objects],
                (0..n_objects)
                    .map(|_| base + rng.below(0, 2) as u32)
                    .collect(),
            )
        }
    };
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut restarts = 0;
    while objects.len() < n_objects {
        let i = objects.len();
        let size = sizes[i];
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let x0 = rng.below(0, (CANVAS - size) as usize + 1) as u32;
            let y0 = rng.below(0, (CANVAS - size) as usize + 1) as u32;
            let frame = BBox {
                x0,
                y0,
                x1: x0 + size,
                y1: y0 + size,
            };
            let Some(bbox) = mask_bounds(shapes[i], &frame) else {
                continue;
            };
            let ok = objects.iter().all(|o| {
                let smaller = o.bbox.area().min(bbox.area());
                5 * o.bbox.intersection(&bbox) <= smaller
            });
            if ok {
                placed = Some((frame, bbox));
                break;
            }
        }
        match placed {
            Some((frame, bbox)) => objects.push(SceneObject {
                shape: shapes[i].to_string(),
                color: colors[i].to_string(),
                bbox,
                z_order: i,
                frame,
            }),
            None if restarts < SCENE_RESTARTS => {
                restarts += 1;
                objects.clear();
            }
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} after {SCENE_RESTARTS} layout restarts",
                    i + 1
                )))
            }
        }
    }
    let spec = SceneSpec { objects };
    let img = render(&spec, None)?;
    Ok((img, spec))
}

/// Bounding-box invariants: inside the canvas, strictly smaller than it,
/// pairwise overlap at most 20% of the smaller box, and tight around the mask.
pub fn check_scene(spec: &SceneSpec) -> Result<()> {
    let n = spec.objects.len();
    if n == 0 || n > MAX_OBJECTS {
        return Err(Error::Generation(format!("{n} objects")));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        let b = o.bbox;
        if b.is_empty() || b.x1 > CANVAS || b.y1 > CANVAS || b.area() >= CANVAS * CANVAS {
            return Err(Error::Generation(format!(
                "object {i}: bbox {b:?} outside canvas"
            )));
        }
        if mask_bounds(&o.shape, &o.frame) != Some(b) {
            return Err(Error::Generation(format!("object {i}: bbox is not tight")));
        }
        for p in &spec.objects[..i] {
            if 5 * p.bbox.intersection(&b) > p.bbox.area().min(b.area()) {
                return Err(Error::Generation(format!("object {i}: overlap above 20%")));
            }
        }
    }
    Ok(())
}

/// 64×64 RGB to an 8×8 grid of 12 channels: each position holds the
/// 2×2 sub-block means (4×4 pixels each) of its 8×8 patch, scaled to [-1, 1].
pub fn encode_latent(img: &RgbImage) -> Result<Grid2D> {
    if img.dimensions() != (CANVAS, CANVAS) {
        return Err(Error::argument(format!(
            "expected a {CANVAS}×{CANVAS} image"
        )));
    }
    let mut z = Grid2D::zeros(64, 12);
    for gy in 0..8u32 {
        for gx in 0..8u32 {
            let row = z.row_mut((gy * 8 + gx) as usize);
            for sy in 0..2u32 {
                for sx in 0..2u32 {
                    let mut acc = [0u32; 3];
                    for dy in 0..4 {
                        for dx in 0..4 {
                            let p = img.get_pixel(gx * 8 + sx * 4 + dx, gy * 8 + sy * 4 + dy);
                            for c in 0..3 {
                                acc[c] += p[c] as u32;
                            }
                        }
                    }
                    for c in 0..3 {
                        row[((sy * 2 + sx) * 3 + c as u32) as usize] =
                            acc[c] as f64 / 16.0 / 127.5 - 1.0;
                    }
                }
            }
        }
    }
    Ok(z)
}

/// Inverse of [`encode_latent`] up to the 4×4 averaging.
pub fn decode_latent(z: &Grid2D) -> Result<RgbImage> {
    if z.shape() != (64, 12) {
        return Err(Error::Shape {
            op: "decode_latent",
            left: (64, 12),
            right: z.shape(),
        });
    }
    let mut img = RgbImage::new(CANVAS, CANVAS);
    for py in 0..CANVAS {
        for px in 0..CANVAS {
            let (gx, gy) = (px / 8, py / 8);
            let (sx, sy) = ((px % 8) / 4, (py % 8) / 4);
            let row = z.row((gy * 8 + gx) as usize);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let v = (row[((sy * 2 + sx) * 3) as usize + c] + 1.0) * 127.5;
                rgb[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(px, py, Rgb(rgb));
        }
    }
    Ok(img)
}

/// Position weights of a pixel box on the 8×8 latent grid: the fraction of
/// each patch covered by the box.
pub fn bbox_coverage(b: &BBox) -> Vec<f64> {
    let mut out = vec![0.0; 64];
    for gy in 0..8u32 {
        for gx in 0..8u32 {
            let cell = BBox {
                x0: gx * 8,
                y0: gy * 8,
                x1: gx * 8 + 8,
                y1: gy * 8 + 8,
            };
            out[(gy * 8 + gx) as usize] = cell.intersection(b) as f64 / 64.0;
        }
    }
    out
}

pub fn crop(img: &RgbImage, b: &BBox) -> RgbImage {
    image::imageops::crop_imm(img, b.x0, b.y0, b.width(), b.height()).to_image()
}
