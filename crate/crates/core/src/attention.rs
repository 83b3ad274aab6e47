//! Single-head cross-attention, decoupled (text + image) cross-attention and
//! object relevance maps derived from the text cross-attention.

use crate::error::{Error, Result};
use crate::numkit::{matmul, matmul_nt, softmax_rows, Grid2D};

/// Projection weights of one decoupled cross-attention layer.
///
/// `w_k_img`/`w_v_img` are a single pair shared by every reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnProjections {
    pub w_q: Grid2D,
    pub w_k_text: Grid2D,
    pub w_v_text: Grid2D,
    pub w_k_img: Grid2D,
    pub w_v_img: Grid2D,
    pub head_dim: usize,
}

impl AttnProjections {
    pub fn new(
        w_q: Grid2D,
        w_k_text: Grid2D,
        w_v_text: Grid2D,
        w_k_img: Grid2D,
        w_v_img: Grid2D,
    ) -> Result<Self> {
        let d = w_q.cols();
        let check = |name: &'static str, g: &Grid2D| -> Result<()> {
            if g.cols() != d {
                return Err(Error::Shape {
                    op: name,
                    left: w_q.shape(),
                    right: g.shape(),
                });
            }
            Ok(())
        };
        if w_q.rows() != d {
            return Err(Error::Shape {
                op: "w_q must be square",
                left: w_q.shape(),
                right: (d, d),
            });
        }
        check("w_k_text", &w_k_text)?;
        check("w_v_text", &w_v_text)?;
        check("w_k_img", &w_k_img)?;
        check("w_v_img", &w_v_img)?;
        if w_k_text.rows() != w_v_text.rows() || w_k_img.rows() != w_v_img.rows() {
            return Err(Error::Shape {
                op: "key/value input dims",
                left: w_k_text.shape(),
                right: w_v_text.shape(),
            });
        }
        Ok(Self {
            w_q,
            w_k_text,
            w_v_text,
            w_k_img,
            w_v_img,
            head_dim: d,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_k_text.rows()
    }

    pub fn image_dim(&self) -> usize {
        self.w_k_img.rows()
    }

    /// Softmax temperature `√d`.
    pub fn scale(&self) -> f64 {
        (self.head_dim as f64).sqrt()
    }
}

/// Spatial latent features `Z`, one row per position in row-major `(h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeatures {
    pub h: usize,
    pub w: usize,
    pub z: Grid2D,
}

impl LatentFeatures {
    pub fn new(h: usize, w: usize, z: Grid2D) -> Result<Self> {
        if z.rows() != h * w {
            return Err(Error::Shape {
                op: "latent features",
                left: (h, w),
                right: z.shape(),
            });
        }
        Ok(Self { h, w, z })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub(crate) fn with_z(&self, z: Grid2D) -> Self {
        Self {
            h: self.h,
            w: self.w,
            z,
        }
    }
}

/// Non-negative per-position relevance of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub values: Vec<f64>,
}

impl RelevanceMap {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn uniform(positions: usize) -> Self {
        Self {
            values: vec![1.0 / positions as f64; positions],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len().max(1) as f64
    }

    /// Rescaled to sum 1.
    pub fn to_distribution(&self) -> Result<RelevanceMap> {
        let s = self.sum();
        if !(s > 0.0) || self.values.iter().any(|v| *v < 0.0) {
            return Err(Error::DegenerateMap { mean: self.mean() });
        }
        Ok(RelevanceMap::new(
            self.values.iter().map(|v| v / s).collect(),
        ))
    }
}

/// Attention output and probabilities for queries `q` over keys `k`.
pub(crate) struct Attended {
    pub probs: Grid2D,
    pub out: Grid2D,
}

pub(crate) fn attend(q: &Grid2D, k: &Grid2D, v: &Grid2D, scale: f64) -> Result<Attended> {
    let logits = matmul_nt(q, k)?;
    let probs = softmax_rows(&logits, scale);
    let out = matmul(&probs, v)?;
    Ok(Attended { probs, out })
}

/// Per-token spatial softmax `softmax_rows(K Qᵀ / scale)` and its row mean.
pub(crate) fn spatial_relevance(
    q: &Grid2D,
    k: &Grid2D,
    scale: f64,
) -> Result<(Grid2D, RelevanceMap)> {
    if k.rows() == 0 {
        return Err(Error::argument("relevance needs at least one text token"));
    }
    let logits = matmul_nt(k, q)?;
    let probs = softmax_rows(&logits, scale);
    let mut values = probs.sum_cols();
    let inv = 1.0 / k.rows() as f64;
    for v in values.iter_mut() {
        *v *= inv;
    }
    Ok((probs, RelevanceMap::new(values)))
}

/// `softmax((Z W_q)(c W_k)ᵀ / √d) (c W_v)`.
pub fn cross_attention(
    z: &LatentFeatures,
    c: &Grid2D,
    proj_k: &Grid2D,
    proj_v: &Grid2D,
    proj_q: &Grid2D,
) -> Result<LatentFeatures> {
    let q = matmul(&z.z, proj_q)?;
    let k = matmul(c, proj_k)?;
    let v = matmul(c, proj_v)?;
    if k.cols() != q.cols() {
        return Err(Error::Shape {
            op: "cross_attention q/k",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let scale = (q.cols() as f64).sqrt();
    Ok(z.with_z(attend(&q, &k, &v, scale)?.out))
}

/// `Z_text + Z_img`, each a cross-attention over its own condition with the
/// shared query projection.
pub fn decoupled_cross_attention(
    z: &LatentFeatures,
    c_text: &Grid2D,
    c_img: &Grid2D,
    proj: &AttnProjections,
) -> Result<LatentFeatures> {
    let z_text = cross_attention(z, c_text, &proj.w_k_text, &proj.w_v_text, &proj.w_q)?;
    let z_img = cross_attention(z, c_img, &proj.w_k_img, &proj.w_v_img, &proj.w_q)?;
    Ok(z.with_z(z_text.z.add(&z_img.z)?))
}

/// Relevance of every latent position to one object: the spatial softmax of
/// the object's text keys against the layer's queries, averaged over the
/// object's tokens. Sums to 1.
pub fn relevance_map(
    z: &LatentFeatures,
    c_text_i: &Grid2D,
    proj: &AttnProjections,
) -> Result<RelevanceMap> {
    if c_text_i.rows() == 0 {
        return Err(Error::argument("object text features are empty"));
    }
    let q = matmul(&z.z, &proj.w_q)?;
    let k = matmul(c_text_i, &proj.w_k_text)?;
    Ok(spatial_relevance(&q, &k, proj.scale())?.1)
}

/// `a / mean(a)`.
pub fn normalize_relevance(a: &RelevanceMap) -> Result<RelevanceMap> {
    let mean = a.mean();
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::DegenerateMap { mean });
    }
    Ok(RelevanceMap::new(
        a.values.iter().map(|v| v / mean).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn proj(rng: &mut Rng, d: usize, dt: usize, di: usize) -> AttnProjections {
        AttnProjections::new(
            rng.init_grid(d, d, 0.5),
            rng.init_grid(dt, d, 0.5),
            rng.init_grid(dt, d, 0.5),
            rng.init_grid(di, d, 0.5),
            rng.init_grid(di, d, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = Rng::new(1);
        let p = proj(&mut rng, 4, 3, 2);
        let z = LatentFeatures::new(2, 2, rng.normal_grid(4, 4)).unwrap();
        let c = rng.normal_grid(1, 3);
        let out = cross_attention(&z, &c, &p.w_k_text, &p.w_v_text, &p.w_q).unwrap();
        let v = matmul(&c, &p.w_v_text).unwrap();
        for r in 0..4 {
            for k in 0..4 {
                assert!((out.z.get(r, k) - v.get(0, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_tokens_match_single() {
        let mut rng = Rng::new(2);
        let p = proj(&mut rng, 4, 3, 2);
        let z = LatentFeatures::new(1, 3, rng.normal_grid(3, 4)).unwrap();
        let c = rng.normal_grid(1, 3);
        let cc = c.vstack(&c).unwrap();
        let a = cross_attention(&z, &c, &p.w_k_text, &p.w_v_text, &p.w_q).unwrap();
        let b = cross_attention(&z, &cc, &p.w_k_text, &p.w_v_text, &p.w_q).unwrap();
        assert!(a.z.max_abs_diff(&b.z) < 1e-12);
    }

    #[test]
    fn decoupled_zero_streams() {
        let mut rng = Rng::new(3);
        let mut p = proj(&mut rng, 4, 3, 2);
        let z = LatentFeatures::new(2, 2, rng.normal_grid(4, 4)).unwrap();
        let ct = rng.normal_grid(3, 3);
        let ci = rng.normal_grid(2, 2);
        let text = cross_attention(&z, &ct, &p.w_k_text, &p.w_v_text, &p.w_q).unwrap();
        let img = cross_attention(&z, &ci, &p.w_k_img, &p.w_v_img, &p.w_q).unwrap();

        let both = decoupled_cross_attention(&z, &ct, &ci, &p).unwrap();
        assert!(both.z.bit_eq(&text.z.add(&img.z).unwrap()));

        let saved = p.w_v_img.clone();
        p.w_v_img = Grid2D::zeros(2, 4);
        assert!(decoupled_cross_attention(&z, &ct, &ci, &p)
            .unwrap()
            .z
            .bit_eq(&text.z));
        p.w_v_img = saved;
        p.w_v_text = Grid2D::zeros(3, 4);
        let only_img = decoupled_cross_attention(&z, &ct, &ci, &p).unwrap();
        assert!(only_img.z.bit_eq(&img.z));
    }

    #[test]
    fn constant_latents_give_uniform_relevance() {
        let mut rng = Rng::new(4);
        let p = proj(&mut rng, 4, 3, 2);
        let row = rng.normal_grid(1, 4);
        let z = LatentFeatures::new(2, 3, Grid2D::from_fn(6, 4, |_, c| row.get(0, c))).unwrap();
        let a = relevance_map(&z, &rng.normal_grid(2, 3), &p).unwrap();
        for v in &a.values {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_object_text_rejected() {
        let mut rng = Rng::new(5);
        let p = proj(&mut rng, 4, 3, 2);
        let z = LatentFeatures::new(1, 2, rng.normal_grid(2, 4)).unwrap();
        assert!(matches!(
            relevance_map(&z, &Grid2D::zeros(0, 3), &p),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_relevance(&RelevanceMap::new(vec![0.1, 0.3])).unwrap();
        assert!((n.values[0] - 0.5).abs() < 1e-12 && (n.values[1] - 1.5).abs() < 1e-12);
        let u = normalize_relevance(&RelevanceMap::uniform(5)).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let twice = normalize_relevance(&n).unwrap();
        assert!(twice
            .values
            .iter()
            .zip(&n.values)
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(
            normalize_relevance(&RelevanceMap::new(vec![0.0, 0.0])),
            Err(Error::DegenerateMap { .. })
        ));
    }

    #[test]
    fn projection_shapes_validated() {
        let e = AttnProjections::new(
            Grid2D::zeros(4, 4),
            Grid2D::zeros(3, 4),
            Grid2D::zeros(3, 5),
            Grid2D::zeros(2, 4),
            Grid2D::zeros(2, 4),
        );
        assert!(e.is_err());
    }
}
