use image::RgbImage;

use crate::attention::RelevanceMap;
use crate::error::{Error, Result};
use crate::numkit::{cosine, Rng};
use crate::scenekit::{BBox, Embedder};

/// Mean absolute per-pixel difference (averaged over channels) inside and
/// outside `bbox`. `None` when the box leaves no outside pixels.
pub fn bbox_delta(a: &RgbImage, b: &RgbImage, bbox: &BBox) -> Result<Option<(f64, f64)>> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::argument(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    if bbox.is_empty() || bbox.x1 > w || bbox.y1 > h {
        return Err(Error::argument(format!(
            "bbox {bbox:?} outside a {w}×{h} image"
        )));
    }
    if bbox.area() == w * h {
        return Ok(None);
    }
    let (mut sin, mut sout, mut nin, mut nout) = (0.0, 0.0, 0usize, 0usize);
    for (x, y, pa) in a.enumerate_pixels() {
        let pb = b.get_pixel(x, y);
        let d = (0..3)
            .map(|c| (pa[c] as f64 - pb[c] as f64).abs())
            .sum::<f64>()
            / 3.0;
        if bbox.contains(x, y) {
            sin += d;
            nin += 1;
        } else {
            sout += d;
            nout += 1;
        }
    }
    Ok(Some((sin / nin as f64, sout / nout as f64)))
}

/// Histogram intersection of the sum-to-one forms of two maps.
pub fn attention_overlap(a: &RelevanceMap, b: &RelevanceMap) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "attention_overlap",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    let norm = |m: &RelevanceMap| -> Result<Vec<f64>> {
        let s = m.sum();
        if !(s > 0.0) || !s.is_finite() || m.values.iter().any(|v| *v < 0.0) {
            return Err(Error::DegenerateMap {
                mean: s / m.len().max(1) as f64,
            });
        }
        Ok(m.values.iter().map(|v| v / s).collect())
    };
    let (pa, pb) = (norm(a)?, norm(b)?);
    Ok(pa.iter().zip(&pb).map(|(x, y)| x.min(*y)).sum())
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::argument("nothing to average"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean cosine between each image and its prompt.
pub fn text_match_score(
    images: &[RgbImage],
    prompts: &[String],
    embedder: &dyn Embedder,
) -> Result<f64> {
    if images.len() != prompts.len() {
        return Err(Error::argument("one prompt per image"));
    }
    let c = images
        .iter()
        .zip(prompts)
        .enumerate()
        .map(|(i, (img, p))| {
            let wrap = |e: Error| Error::Embedder(format!("prompt {i}: {e}"));
            Ok(cosine(
                &embedder.embed_image(img).map_err(wrap)?,
                &embedder.embed_text(p).map_err(wrap)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    mean(&c)
}

/// Mean cosine between each image and its reference image.
pub fn image_match_score(
    images: &[RgbImage],
    refs: &[RgbImage],
    embedder: &dyn Embedder,
) -> Result<f64> {
    if images.len() != refs.len() {
        return Err(Error::argument("one reference per image"));
    }
    let c = images
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (img, r))| {
            let wrap = |e: Error| Error::Embedder(format!("prompt {i}: {e}"));
            Ok(cosine(
                &embedder.embed_image(img).map_err(wrap)?,
                &embedder.embed_image(r).map_err(wrap)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    mean(&c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl BootstrapInterval {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

/// Percentile bootstrap of `mean(x − y)` over paired observations.
pub fn paired_bootstrap(
    x: &[f64],
    y: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapInterval> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::argument(
            "paired bootstrap needs equal, non-empty samples",
        ));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::argument(
            "bootstrap needs resamples > 0 and a level in (0, 1)",
        ));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len();
    let mut rng = Rng::new(seed).derive("bootstrap");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| d[rng.below(0, n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapInterval {
        mean: mean(&d)?,
        lo: q(tail),
        hi: q(1.0 - tail),
    })
}
