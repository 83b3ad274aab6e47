//! Cross-modal embedders: a deterministic stub and an HTTP client.

use std::io::Cursor;
use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};

use crate::diffusion::text::{COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::numkit::{matmul, Grid2D, Rng};

use super::render::{mask_bounds, palette, BBox, BACKGROUND};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

pub const STUB_DIM: usize = 24;
const RESIDUAL_DIM: usize = STUB_DIM - SHAPES.len() - COLORS.len();
const RESIDUAL_NORM: f64 = 0.05;
const GRID: usize = 8;
const SHAPE_TEMPERATURE: f64 = 0.02;
const COLOR_SHARPNESS: f64 = 20.0;

/// `[shape part ‖ color part ‖ residual]`, unit-normalized. Text gets exact
/// one-hot parts; images get soft assignments from template matching.
#[derive(Clone, Debug, Default)]
pub struct StubEmbedder;

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn scaled_residual(mut r: Vec<f64>) -> Vec<f64> {
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        r.iter_mut().for_each(|x| *x *= RESIDUAL_NORM / n);
    }
    r
}

fn label_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Splits "a red circle and a blue square", "red circle" or "circle" into labels.
fn labels(text: &str) -> Vec<&str> {
    let t = text.trim();
    let t = t.strip_prefix("a ").unwrap_or(t);
    t.split(" and a ").map(str::trim).collect()
}

fn occupancy(mask: &[bool], w: usize, b: &BBox) -> Vec<f64> {
    let mut occ = vec![0.0; GRID * GRID];
    let (bw, bh) = (b.width() as f64, b.height() as f64);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = b.x0 as f64 + (gx as f64 + (sx as f64 + 0.5) / 4.0) * bw / GRID as f64;
                    let y = b.y0 as f64 + (gy as f64 + (sy as f64 + 0.5) / 4.0) * bh / GRID as f64;
                    if mask[y as usize * w + x as usize] {
                        hits += 1;
                    }
                }
            }
            occ[gy * GRID + gx] = hits as f64 / 16.0;
        }
    }
    occ
}

fn templates() -> &'static Vec<Vec<f64>> {
    static T: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    T.get_or_init(|| {
        let frame = BBox {
            x0: 0,
            y0: 0,
            x1: 48,
            y1: 48,
        };
        SHAPES
            .iter()
            .map(|s| {
                let b = mask_bounds(s, &frame).expect("template shape renders");
                let mask: Vec<bool> = (0..48 * 48)
                    .map(|i| {
                        super::render::shape_covers(s, &frame, (i % 48) as u32, (i / 48) as u32)
                    })
                    .collect();
                occupancy(&mask, 48, &b)
            })
            .collect()
    })
}

fn projection() -> &'static Grid2D {
    static P: OnceLock<Grid2D> = OnceLock::new();
    P.get_or_init(|| {
        Rng::new(0x5eed)
            .derive("stub-projection")
            .normal_grid(GRID * GRID + 3, RESIDUAL_DIM)
    })
}

/// Nearest of background and the palette for each pixel; `None` is background.
fn classify(p: &[u8; 3]) -> Option<usize> {
    let d = |c: [u8; 3]| -> i32 { (0..3).map(|k| (p[k] as i32 - c[k] as i32).pow(2)).sum() };
    let mut best = (d(BACKGROUND), None);
    for (i, name) in COLORS.iter().enumerate() {
        let dc = d(palette(name).unwrap());
        if dc < best.0 {
            best = (dc, Some(i));
        }
    }
    best.1
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl StubEmbedder {
    fn text_parts(label: &str) -> Result<([f64; 4], [f64; 8])> {
        let words: Vec<&str> = label.split_whitespace().collect();
        let (color, shape) = match words.as_slice() {
            [s] => (None, *s),
            [c, s] => (Some(*c), *s),
            _ => return Err(Error::Vocabulary(label.to_string())),
        };
        let mut sv = [0.0; 4];
        let si = SHAPES
            .iter()
            .position(|x| *x == shape)
            .ok_or_else(|| Error::Vocabulary(label.to_string()))?;
        sv[si] = 1.0;
        let mut cv = [0.0; 8];
        if let Some(c) = color {
            let ci = COLORS
                .iter()
                .position(|x| *x == c)
                .ok_or_else(|| Error::Vocabulary(label.to_string()))?;
            cv[ci] = 1.0;
        }
        Ok((sv, cv))
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        STUB_DIM
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; STUB_DIM];
        for l in labels(text) {
            let (s, c) = Self::text_parts(l)?;
            for (i, x) in s.iter().chain(c.iter()).enumerate() {
                v[i] += x;
            }
        }
        let mut rng = Rng::new(label_hash(text.trim()));
        let r = scaled_residual((0..RESIDUAL_DIM).map(|_| rng.normal()).collect());
        v[SHAPES.len() + COLORS.len()..].copy_from_slice(&r);
        Ok(unit(v))
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Embedder("empty image".into()));
        }
        let classes: Vec<Option<usize>> = img.pixels().map(|p| classify(&p.0)).collect();
        let mut counts = [0usize; 8];
        for c in classes.iter().flatten() {
            counts[*c] += 1;
        }
        let fg: usize = counts.iter().sum();
        let mut v = vec![0.0; STUB_DIM];
        let mut feat = vec![0.0; GRID * GRID + 3];
        if fg > 0 {
            let frac: Vec<f64> = counts
                .iter()
                .map(|&c| COLOR_SHARPNESS * c as f64 / fg as f64)
                .collect();
            let color = softmax(&frac);
            let dominant = (0..8).max_by_key(|&i| counts[i]).unwrap();
            let mask: Vec<bool> = classes.iter().map(|c| *c == Some(dominant)).collect();
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    let (x, y) = (i as u32 % w, i as u32 / w);
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
            let occ = occupancy(&mask, w as usize, &BBox { x0, y0, x1, y1 });
            let logits: Vec<f64> = templates()
                .iter()
                .map(|t| {
                    let d2 = t
                        .iter()
                        .zip(&occ)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        / occ.len() as f64;
                    -d2 / SHAPE_TEMPERATURE
                })
                .collect();
            let shape = softmax(&logits);
            v[..4].copy_from_slice(&shape);
            v[4..12].copy_from_slice(&color);
            feat[..GRID * GRID].copy_from_slice(&occ);
            let mut mean = [0.0; 3];
            for (p, m) in img.pixels().zip(&mask) {
                if *m {
                    for k in 0..3 {
                        mean[k] += p[k] as f64 / 255.0;
                    }
                }
            }
            let n = mask.iter().filter(|m| **m).count() as f64;
            for k in 0..3 {
                feat[GRID * GRID + k] = mean[k] / n;
            }
        }
        let r = matmul(&Grid2D::row_vector(&feat), projection())?;
        let r = scaled_residual(r.into_data());
        v[12..].copy_from_slice(&r);
        Ok(unit(v))
    }
}

/// Client for an external embedding service: `POST {kind, payload}` with
/// `kind` in `text|image` (images as base64 PNG) answered by `{vector: [...]}`.
pub struct ServiceEmbedder {
    url: String,
    agent: ureq::Agent,
    retries: usize,
    dim: OnceLock<usize>,
}

impl ServiceEmbedder {
    pub fn new(url: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retries,
            dim: OnceLock::new(),
        }
    }

    fn request(&self, kind: &str, payload: String) -> Result<Vec<f64>> {
        let body = serde_json::json!({ "kind": kind, "payload": payload });
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.agent.post(&self.url).send_json(body.clone()) {
                Ok(resp) => {
                    #[derive(serde::Deserialize)]
                    struct Reply {
                        vector: Vec<f64>,
                    }
                    let r: Reply = resp
                        .into_json()
                        .map_err(|e| Error::Embedder(format!("{}: bad response: {e}", self.url)))?;
                    if r.vector.is_empty() || r.vector.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Embedder(format!(
                            "{}: empty or non-finite vector",
                            self.url
                        )));
                    }
                    let d = *self.dim.get_or_init(|| r.vector.len());
                    if d != r.vector.len() {
                        return Err(Error::Embedder(format!(
                            "{}: vector length {} after earlier length {d}",
                            self.url,
                            r.vector.len()
                        )));
                    }
                    return Ok(unit(r.vector));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Embedder(format!(
            "{}: giving up after {} attempts: {last}",
            self.url,
            self.retries + 1
        )))
    }
}

impl Embedder for ServiceEmbedder {
    fn dim(&self) -> usize {
        self.dim.get().copied().unwrap_or(0)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.request("text", text.to_string())
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let mut png = Vec::new();
        img.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| Error::Embedder(format!("encoding png: {e}")))?;
        self.request(
            "image",
            base64::engine::general_purpose::STANDARD.encode(png),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cosine;
    use crate::scenekit::render::{crop, gen_scene, render, SceneObject, SceneSpec};

    fn single(shape: &str, color: &str) -> RgbImage {
        let frame = BBox {
            x0: 20,
            y0: 20,
            x1: 46,
            y1: 46,
        };
        let spec = SceneSpec {
            objects: vec![SceneObject {
                shape: shape.into(),
                color: color.into(),
                bbox: mask_bounds(shape, &frame).unwrap(),
                z_order: 0,
                frame,
            }],
        };
        crop(&render(&spec, None).unwrap(), &spec.objects[0].bbox)
    }

    #[test]
    fn matching_pairs_are_close_and_disjoint_pairs_far() {
        let e = StubEmbedder;
        for s in SHAPES {
            for c in COLORS {
                let img = e.embed_image(&single(s, c)).unwrap();
                let txt = e.embed_text(&format!("{c} {s}")).unwrap();
                assert!(
                    cosine(&img, &txt) >= 0.95,
                    "{c} {s}: {}",
                    cosine(&img, &txt)
                );
            }
        }
        let a = e.embed_text("red circle").unwrap();
        let b = e.embed_image(&single("star", "blue")).unwrap();
        assert!(cosine(&a, &b) <= 0.3);
    }

    #[test]
    fn unit_norm_and_vocabulary() {
        let e = StubEmbedder;
        let v = e.embed_text("green triangle").unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert!(matches!(
            e.embed_text("purple circle"),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(e.embed_text("red"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn scene_crops_mostly_match_their_labels() {
        let e = StubEmbedder;
        let (mut ok, mut total) = (0, 0);
        for i in 0..100 {
            let (img, spec) = gen_scene(&mut Rng::new(i), 1 + (i as usize % 4)).unwrap();
            for o in &spec.objects {
                let c = cosine(
                    &e.embed_image(&crop(&img, &o.bbox)).unwrap(),
                    &e.embed_text(&o.label()).unwrap(),
                );
                total += 1;
                ok += (c >= 0.9) as usize;
            }
        }
        assert!(ok as f64 >= 0.9 * total as f64, "{ok}/{total}");
    }
}
