//! Strategies for merging the text-conditioned stream with `M` image-conditioned
//! streams: plain addition, relevance-weighted addition, and relevance-weighted
//! addition with a learned per-position gate on the text stream.
//!
//! Per-position weights scale whole rows of `Z` (every channel of a position).

use crate::attention::{LatentFeatures, RelevanceMap};
use crate::error::{Error, Result};
use crate::numkit::{matmul, sigmoid_scalar, Grid2D};

/// `f`: linear layer `D -> 1` followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct TextWeightLayer {
    pub w_f: Grid2D,
    pub b_f: f64,
}

impl TextWeightLayer {
    /// Zero weights: the normalized gate is exactly 1 everywhere.
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_f: Grid2D::zeros(dim, 1),
            b_f: 0.0,
        }
    }

    /// Raw gate `sigmoid(Z w_f + b_f)` per position, in (0, 1).
    pub fn raw(&self, z_text: &Grid2D) -> Result<Vec<f64>> {
        let logits = matmul(z_text, &self.w_f)?;
        Ok(logits
            .data()
            .iter()
            .map(|v| sigmoid_scalar(v + self.b_f))
            .collect())
    }
}

/// `v / mean(v)`; a constant vector maps to exact ones.
pub fn mean_normalized(v: &[f64]) -> Result<Vec<f64>> {
    let first = match v.first() {
        Some(f) => *f,
        None => return Err(Error::DegenerateMap { mean: 0.0 }),
    };
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::DegenerateMap { mean });
    }
    if v.iter().all(|x| *x == first) {
        return Ok(vec![1.0; v.len()]);
    }
    Ok(v.iter().map(|x| x / mean).collect())
}

fn check_streams(z_text: &LatentFeatures, z_imgs: &[LatentFeatures]) -> Result<()> {
    for z in z_imgs {
        if z.z.shape() != z_text.z.shape() {
            return Err(Error::Shape {
                op: "merge streams",
                left: z_text.z.shape(),
                right: z.z.shape(),
            });
        }
    }
    Ok(())
}

/// `out += w ⊙ z`, row-wise.
pub(crate) fn add_weighted_rows(out: &mut Grid2D, z: &Grid2D, w: &[f64]) {
    let cols = z.cols();
    for (r, &wr) in w.iter().enumerate() {
        let src = &z.data()[r * cols..(r + 1) * cols];
        for (o, s) in out.row_mut(r).iter_mut().zip(src) {
            *o += wr * s;
        }
    }
}

/// `Z_text + Σᵢ Z_imgⁱ`. An empty list returns `z_text` unchanged.
pub fn uniform_merge(z_text: &LatentFeatures, z_imgs: &[LatentFeatures]) -> Result<LatentFeatures> {
    check_streams(z_text, z_imgs)?;
    let mut out = z_text.z.clone();
    for z in z_imgs {
        out.add_assign(&z.z)?;
    }
    Ok(z_text.with_z(out))
}

fn normalized_maps(maps: &[RelevanceMap], positions: usize) -> Result<Vec<Vec<f64>>> {
    maps.iter()
        .map(|m| {
            if m.len() != positions {
                return Err(Error::Shape {
                    op: "relevance map length",
                    left: (positions, 1),
                    right: (m.len(), 1),
                });
            }
            mean_normalized(&m.values)
        })
        .collect()
}

fn merge_with_weights(
    z_text: &LatentFeatures,
    text_weights: Option<&[f64]>,
    z_imgs: &[LatentFeatures],
    maps: &[RelevanceMap],
) -> Result<LatentFeatures> {
    check_streams(z_text, z_imgs)?;
    if z_imgs.len() != maps.len() {
        return Err(Error::argument(format!(
            "{} image streams but {} relevance maps",
            z_imgs.len(),
            maps.len()
        )));
    }
    let weights = normalized_maps(maps, z_text.positions())?;
    let mut out = match text_weights {
        Some(tw) => z_text.z.scale_rows(tw)?,
        None => z_text.z.clone(),
    };
    for (z, w) in z_imgs.iter().zip(&weights) {
        add_weighted_rows(&mut out, &z.z, w);
    }
    Ok(z_text.with_z(out))
}

/// `Z_text + Σᵢ (Aᵢ / mean Aᵢ) ⊙ Z_imgⁱ`.
pub fn weighted_merge(
    z_text: &LatentFeatures,
    z_imgs: &[LatentFeatures],
    maps: &[RelevanceMap],
) -> Result<LatentFeatures> {
    if z_imgs.is_empty() {
        return Err(Error::argument(
            "weighted merge needs at least one image stream",
        ));
    }
    merge_with_weights(z_text, None, z_imgs, maps)
}

/// Mean-normalized gate `f(Z_text) / mean f(Z_text)` per position.
pub fn text_weight(z_text: &LatentFeatures, f: &TextWeightLayer) -> Result<Vec<f64>> {
    mean_normalized(&f.raw(&z_text.z)?)
}

/// `(f / mean f) ⊙ Z_text + Σᵢ (Aᵢ / mean Aᵢ) ⊙ Z_imgⁱ`.
pub fn trained_weighted_merge(
    z_text: &LatentFeatures,
    z_imgs: &[LatentFeatures],
    maps: &[RelevanceMap],
    f: &TextWeightLayer,
) -> Result<LatentFeatures> {
    let tw = text_weight(z_text, f)?;
    merge_with_weights(z_text, Some(&tw), z_imgs, maps)
}
