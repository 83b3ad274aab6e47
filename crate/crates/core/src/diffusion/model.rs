//! Forward and manual backward pass of the toy denoiser.
//!
//! Each block is pre-norm self-attention, then the decoupled cross-attention
//! with one of the merge strategies, then a SiLU MLP; every sub-block is
//! residual. Layer norms carry no affine parameters.

use crate::attention::{attend, spatial_relevance, RelevanceMap};
use crate::error::{Error, Result};
use crate::evalkit::{inject_noise, NoiseStrategy};
use crate::merge::{add_weighted_rows, mean_normalized};
use crate::numkit::backward::{
    accumulate_input_grad, accumulate_weight_grad, layer_norm, layer_norm_backward,
    mean_normalize_backward, silu, silu_backward, softmax_rows_backward,
};
use crate::numkit::{matmul, matmul_tn, Grid2D};

use super::config::{MergeMode, TrainMode};
use super::params::{is_trainable, DenoiserParams};
use super::text::{locate, NULL_TOKEN};

/// One reference object: its text tokens (used for the relevance map) and
/// its embedder vector (the image condition).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCondition {
    pub tokens: Vec<usize>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub prompt: Vec<usize>,
    pub objects: Vec<ObjectCondition>,
    pub drop_text: bool,
    pub drop_images: bool,
}

impl Conditions {
    pub fn new(prompt: Vec<usize>, objects: Vec<ObjectCondition>) -> Self {
        Self {
            prompt,
            objects,
            drop_text: false,
            drop_images: false,
        }
    }

    /// Both conditions dropped: the classifier-free-guidance branch.
    pub fn unconditional(&self) -> Self {
        Self {
            drop_text: true,
            drop_images: true,
            ..self.clone()
        }
    }

    fn effective_prompt(&self) -> Vec<usize> {
        if self.drop_text {
            vec![NULL_TOKEN]
        } else {
            self.prompt.clone()
        }
    }

    fn image_count(&self) -> usize {
        if self.drop_images {
            0
        } else {
            self.objects.len()
        }
    }
}

/// Noise added to `Z_text` in selected layers (relevance verification).
#[derive(Clone, Debug)]
pub struct TextNoise {
    pub layers: Vec<usize>,
    /// One `(H·W)×D` draw per entry of `layers`.
    pub eps: Vec<Grid2D>,
    pub strategy: NoiseStrategy,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub text_noise: Option<&'a TextNoise>,
    /// Raw relevance maps `[layer][object]` used instead of recomputing them.
    pub relevance_override: Option<&'a [Vec<RelevanceMap>]>,
    /// Per-object position weights replacing the relevance weights (region-restricted baseline).
    pub local_masks: Option<&'a [Vec<f64>]>,
    /// Merge strategy replacing the one stored in the config.
    pub merge_mode: Option<MergeMode>,
}

impl ForwardOptions<'_> {
    fn hooked(&self) -> bool {
        self.text_noise.is_some() || self.relevance_override.is_some() || self.local_masks.is_some()
    }
}

pub struct ForwardOutput {
    pub eps: Grid2D,
    /// Raw relevance maps `[layer][object]` of every object text.
    pub maps: Vec<Vec<RelevanceMap>>,
    /// How much of each reference's features lands on every position,
    /// `[layer][image]`: merge weight times the row norm of `Z_imgⁱ`.
    pub injection: Vec<Vec<RelevanceMap>>,
}

struct Stream {
    cond: Grid2D,
    k: Grid2D,
    v: Grid2D,
    probs: Grid2D,
    out: Grid2D,
}

struct Relevance {
    k: Grid2D,
    probs: Grid2D,
    raw: Vec<f64>,
    weights: Vec<f64>,
}

struct LayerTrace {
    h1: Grid2D,
    inv1: Vec<f64>,
    q: Grid2D,
    k: Grid2D,
    v: Grid2D,
    probs: Grid2D,
    ctx: Grid2D,
    h2: Grid2D,
    inv2: Vec<f64>,
    qx: Grid2D,
    text: Stream,
    images: Vec<Stream>,
    rel: Vec<Relevance>,
    image_weights: Vec<Option<Vec<f64>>>,
    gate: Option<(Vec<f64>, Vec<f64>)>,
    h3: Grid2D,
    inv3: Vec<f64>,
    u: Grid2D,
    s: Grid2D,
}

pub(crate) struct Trace {
    x_t: Grid2D,
    time_feat: Grid2D,
    prompt: Vec<usize>,
    object_tokens: Vec<(Vec<usize>, Vec<usize>)>,
    object_feats: Vec<Grid2D>,
    embeddings: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
    hf: Grid2D,
    invf: Vec<f64>,
    mode: MergeMode,
    hooked: bool,
}

/// Sinusoidal features of the timestep, `[sin(t ω_k) ‖ cos(t ω_k)]`.
pub fn time_features(t: usize, dim: usize) -> Grid2D {
    let half = dim / 2;
    let mut out = Grid2D::zeros(1, dim);
    for k in 0..half {
        let w = libm::exp(-libm::log(10000.0) * k as f64 / half as f64);
        out.set(0, k, libm::sin(t as f64 * w));
        out.set(0, k + half, libm::cos(t as f64 * w));
    }
    out
}

fn embed_tokens(p: &DenoiserParams, tokens: &[usize], positions: &[usize]) -> Result<Grid2D> {
    let c = &p.config;
    let mut out = Grid2D::zeros(tokens.len(), c.text_dim);
    for (r, (&tok, &pos)) in tokens.iter().zip(positions).enumerate() {
        if tok >= c.vocab {
            return Err(Error::Vocabulary(format!("token id {tok}")));
        }
        if pos >= c.max_text_len {
            return Err(Error::argument(format!(
                "text position {pos} beyond max_text_len {}",
                c.max_text_len
            )));
        }
        for ((o, e), q) in out
            .row_mut(r)
            .iter_mut()
            .zip(p.token_embed.row(tok))
            .zip(p.text_pos.row(pos))
        {
            *o = e + q;
        }
    }
    Ok(out)
}

fn image_tokens(p: &DenoiserParams, embedding: &[f64]) -> Result<Grid2D> {
    let c = &p.config;
    if embedding.len() != c.clip_dim {
        return Err(Error::Shape {
            op: "reference embedding",
            left: (1, c.clip_dim),
            right: (1, embedding.len()),
        });
    }
    let flat = matmul(&Grid2D::row_vector(embedding), &p.img_proj)?;
    Grid2D::new(c.image_tokens, c.image_dim, flat.into_data())
}

fn stream(q: &Grid2D, cond: Grid2D, w_k: &Grid2D, w_v: &Grid2D, scale: f64) -> Result<Stream> {
    let k = matmul(&cond, w_k)?;
    let v = matmul(&cond, w_v)?;
    let a = attend(q, &k, &v, scale)?;
    Ok(Stream {
        cond,
        k,
        v,
        probs: a.probs,
        out: a.out,
    })
}

pub fn denoiser_forward(
    params: &DenoiserParams,
    x_t: &Grid2D,
    t: usize,
    conds: &Conditions,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let (out, trace) = forward_traced(params, x_t, t, conds, opts)?;
    let maps = trace
        .layers
        .iter()
        .map(|l| {
            l.rel
                .iter()
                .map(|r| RelevanceMap::new(r.raw.clone()))
                .collect()
        })
        .collect();
    let m = conds.image_count();
    let injection = trace
        .layers
        .iter()
        .map(|l| {
            l.images[..m]
                .iter()
                .zip(&l.image_weights)
                .map(|(s, w)| {
                    let values = (0..s.out.rows())
                        .map(|r| {
                            let norm = s.out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                            w.as_ref().map_or(norm, |w| w[r] * norm)
                        })
                        .collect();
                    RelevanceMap::new(values)
                })
                .collect()
        })
        .collect();
    Ok(ForwardOutput {
        eps: out,
        maps,
        injection,
    })
}

pub(crate) fn forward_traced(
    params: &DenoiserParams,
    x_t: &Grid2D,
    t: usize,
    conds: &Conditions,
    opts: &ForwardOptions<'_>,
) -> Result<(Grid2D, Trace)> {
    let c = &params.config;
    let (n, d) = (c.positions(), c.dim);
    if x_t.shape() != (n, c.latent_channels) {
        return Err(Error::Shape {
            op: "denoiser input",
            left: (n, c.latent_channels),
            right: x_t.shape(),
        });
    }
    let mode = opts.merge_mode.unwrap_or(c.merge_mode);
    let prompt = conds.effective_prompt();
    if prompt.is_empty() {
        return Err(Error::argument("empty prompt"));
    }
    let prompt_pos: Vec<usize> = (0..prompt.len()).collect();
    let c_text = embed_tokens(params, &prompt, &prompt_pos)?;

    let mut object_tokens = Vec::with_capacity(conds.objects.len());
    let mut object_feats = Vec::with_capacity(conds.objects.len());
    let mut from = 0;
    for o in &conds.objects {
        if o.tokens.is_empty() {
            return Err(Error::argument("object text is empty"));
        }
        let pos = locate(&prompt, &o.tokens, from);
        if let Some(last) = pos.last() {
            if prompt.get(pos[0]..=*last) == Some(&o.tokens[..]) {
                from = last + 1;
            }
        }
        object_feats.push(embed_tokens(params, &o.tokens, &pos)?);
        object_tokens.push((o.tokens.clone(), pos));
    }
    let m = conds.image_count();
    let embeddings: Vec<Vec<f64>> = conds.objects[..m]
        .iter()
        .map(|o| o.embedding.clone())
        .collect();
    let mut img_conds = Vec::with_capacity(m.max(1));
    for e in &embeddings {
        img_conds.push(image_tokens(params, e)?);
    }
    if m == 0 {
        img_conds.push(params.null_img.clone());
    }
    if let Some(masks) = opts.local_masks {
        if masks.len() < m || masks.iter().any(|w| w.len() != n) {
            return Err(Error::argument(
                "one length-(H·W) mask per reference object is required",
            ));
        }
    }

    let time_feat = time_features(t, c.time_dim);
    let temb = matmul(&time_feat, &params.time_proj)?;
    let mut x = matmul(x_t, &params.in_proj)?;
    x.add_row_broadcast(params.in_bias.row(0))?;
    x.add_assign(&params.pos_embed)?;
    x.add_row_broadcast(temb.row(0))?;

    let sa_scale = (d as f64).sqrt();
    let mut layers = Vec::with_capacity(c.layers);
    for (li, lp) in params.layers.iter().enumerate() {
        // self-attention
        let (h1, inv1) = layer_norm(&x);
        let q = matmul(&h1, &lp.sa_q)?;
        let k = matmul(&h1, &lp.sa_k)?;
        let v = matmul(&h1, &lp.sa_v)?;
        let att = attend(&q, &k, &v, sa_scale)?;
        x.add_assign(&matmul(&att.out, &lp.sa_o)?)?;

        // cross-attention and merge
        let (h2, inv2) = layer_norm(&x);
        let xs = lp.xa.scale();
        let qx = matmul(&h2, &lp.xa.w_q)?;
        let text = stream(&qx, c_text.clone(), &lp.xa.w_k_text, &lp.xa.w_v_text, xs)?;
        let mut images = Vec::with_capacity(img_conds.len());
        for ic in &img_conds {
            images.push(stream(&qx, ic.clone(), &lp.xa.w_k_img, &lp.xa.w_v_img, xs)?);
        }
        let mut rel = Vec::with_capacity(object_feats.len());
        for (oi, of) in object_feats.iter().enumerate() {
            let kt = matmul(of, &lp.xa.w_k_text)?;
            let (probs, mut map) = spatial_relevance(&qx, &kt, xs)?;
            if let Some(ov) = opts.relevance_override {
                let layer_maps = ov
                    .get(li)
                    .ok_or_else(|| Error::argument("relevance override misses a layer"))?;
                map = layer_maps
                    .get(oi)
                    .cloned()
                    .ok_or_else(|| Error::argument("relevance override misses an object"))?;
            }
            let weights = if mode.uses_relevance() || opts.text_noise.is_some() {
                mean_normalized(&map.values)?
            } else {
                Vec::new()
            };
            rel.push(Relevance {
                k: kt,
                probs,
                raw: map.values,
                weights,
            });
        }
        let image_weights: Vec<Option<Vec<f64>>> = (0..images.len())
            .map(|i| {
                if m == 0 {
                    None
                } else if let Some(masks) = opts.local_masks {
                    Some(masks[i].clone())
                } else if mode.uses_relevance() {
                    Some(rel[i].weights.clone())
                } else {
                    None
                }
            })
            .collect();

        let mut z_text = text.out.clone();
        if let Some(noise) = opts.text_noise {
            if let Some(slot) = noise.layers.iter().position(|&l| l == li) {
                let eps = noise
                    .eps
                    .get(slot)
                    .ok_or_else(|| Error::argument("text noise misses a layer draw"))?;
                let map = match noise.strategy {
                    NoiseStrategy::Uniform => None,
                    NoiseStrategy::Weighted => Some(RelevanceMap::new(
                        rel.get(noise.target)
                            .ok_or_else(|| Error::argument("noise target object out of range"))?
                            .raw
                            .clone(),
                    )),
                };
                z_text = inject_noise(&z_text, eps, noise.strategy, map.as_ref())?;
            }
        }
        let gate = if mode.uses_gate() {
            let raw = lp.gate.raw(&z_text)?;
            let gw = mean_normalized(&raw)?;
            Some((raw, gw))
        } else {
            None
        };
        let mut merged = match &gate {
            Some((_, gw)) => z_text.scale_rows(gw)?,
            None => z_text,
        };
        for (s, w) in images.iter().zip(&image_weights) {
            match w {
                Some(w) => add_weighted_rows(&mut merged, &s.out, w),
                None => merged.add_assign(&s.out)?,
            }
        }
        x.add_assign(&merged)?;

        // MLP
        let (h3, inv3) = layer_norm(&x);
        let mut u = matmul(&h3, &lp.mlp_w1)?;
        u.add_row_broadcast(lp.mlp_b1.row(0))?;
        let s = silu(&u);
        let mut y = matmul(&s, &lp.mlp_w2)?;
        y.add_row_broadcast(lp.mlp_b2.row(0))?;
        x.add_assign(&y)?;

        layers.push(LayerTrace {
            h1,
            inv1,
            q,
            k,
            v,
            probs: att.probs,
            ctx: att.out,
            h2,
            inv2,
            qx,
            text,
            images,
            rel,
            image_weights,
            gate,
            h3,
            inv3,
            u,
            s,
        });
    }
    let (hf, invf) = layer_norm(&x);
    let mut eps = matmul(&hf, &params.out_proj)?;
    eps.add_row_broadcast(params.out_bias.row(0))?;
    if !eps.is_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    let trace = Trace {
        x_t: x_t.clone(),
        time_feat,
        prompt,
        object_tokens,
        object_feats,
        embeddings,
        layers,
        hf,
        invf,
        mode,
        hooked: opts.hooked(),
    };
    Ok((eps, trace))
}

fn add_col_sums(acc: &mut Grid2D, dy: &Grid2D) {
    for (a, s) in acc.data_mut().iter_mut().zip(dy.sum_cols()) {
        *a += s;
    }
}

/// `y = x·w`: accumulates `dw` when `want`, and returns `dy·wᵀ`.
fn linear_back(x: &Grid2D, w: &Grid2D, dy: &Grid2D, dw: &mut Grid2D, want: bool) -> Result<Grid2D> {
    if want {
        accumulate_weight_grad(dw, x, dy)?;
    }
    let mut dx = Grid2D::zeros(x.rows(), x.cols());
    accumulate_input_grad(&mut dx, dy, w)?;
    Ok(dx)
}

fn row_dots(a: &Grid2D, b: &Grid2D) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
        .collect()
}

/// Backward through `attend(q, k, v)`; returns `(dq, dk, dv)`.
fn attend_back(
    q: &Grid2D,
    k: &Grid2D,
    v: &Grid2D,
    probs: &Grid2D,
    dout: &Grid2D,
    scale: f64,
) -> Result<(Grid2D, Grid2D, Grid2D)> {
    let mut dp = Grid2D::zeros(probs.rows(), probs.cols());
    accumulate_input_grad(&mut dp, dout, v)?;
    let mut dv = Grid2D::zeros(v.rows(), v.cols());
    accumulate_weight_grad(&mut dv, probs, dout)?;
    let ds = softmax_rows_backward(probs, &dp, scale)?;
    let dq = matmul(&ds, k)?;
    let mut dk = Grid2D::zeros(k.rows(), k.cols());
    accumulate_weight_grad(&mut dk, &ds, q)?;
    Ok((dq, dk, dv))
}

/// Reverse pass for `loss` whose gradient with respect to the output is
/// `d_eps`. Accumulates into `grads` every tensor trainable under `mode`.
pub(crate) fn backward(
    params: &DenoiserParams,
    trace: &Trace,
    d_eps: &Grid2D,
    grads: &mut DenoiserParams,
    mode: TrainMode,
) -> Result<()> {
    if trace.hooked {
        return Err(Error::Capability("backward through forward hooks".into()));
    }
    let all = mode == TrainMode::Pretrain;
    let want = |name: &str| is_trainable(name, mode);
    let c = &params.config;
    let d = c.dim;

    if all {
        accumulate_weight_grad(&mut grads.out_proj, &trace.hf, d_eps)?;
        add_col_sums(&mut grads.out_bias, d_eps);
    }
    let mut dhf = Grid2D::zeros(trace.hf.rows(), d);
    accumulate_input_grad(&mut dhf, d_eps, &params.out_proj)?;
    let mut dx = layer_norm_backward(&trace.hf, &trace.invf, &dhf)?;

    let mut d_ctext = Grid2D::zeros(trace.layers[0].text.cond.rows(), c.text_dim);
    let mut d_objects: Vec<Grid2D> = trace
        .object_feats
        .iter()
        .map(|f| Grid2D::zeros(f.rows(), f.cols()))
        .collect();
    let n_img = trace.layers[0].images.len();
    let mut d_imgs: Vec<Grid2D> = (0..n_img)
        .map(|_| Grid2D::zeros(c.image_tokens, c.image_dim))
        .collect();
    let sa_scale = (d as f64).sqrt();

    for (li, (lt, lp)) in trace.layers.iter().zip(&params.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        // MLP
        if all {
            accumulate_weight_grad(&mut g.mlp_w2, &lt.s, &dx)?;
            add_col_sums(&mut g.mlp_b2, &dx);
        }
        let mut ds = Grid2D::zeros(lt.s.rows(), lt.s.cols());
        accumulate_input_grad(&mut ds, &dx, &lp.mlp_w2)?;
        let du = silu_backward(&lt.u, &ds)?;
        let dh3 = linear_back(&lt.h3, &lp.mlp_w1, &du, &mut g.mlp_w1, all)?;
        if all {
            add_col_sums(&mut g.mlp_b1, &du);
        }
        dx.add_assign(&layer_norm_backward(&lt.h3, &lt.inv3, &dh3)?)?;

        // merge
        let dmerged = &dx;
        let mut dqx = Grid2D::zeros(lt.qx.rows(), lt.qx.cols());
        let xs = lp.xa.scale();
        for (si, (s, w)) in lt.images.iter().zip(&lt.image_weights).enumerate() {
            let dz = match w {
                Some(w) => {
                    if lt.rel.len() > si && trace.mode.uses_relevance() {
                        let dw = row_dots(dmerged, &s.out);
                        let r = &lt.rel[si];
                        let da = mean_normalize_backward(&r.raw, &r.weights, &dw);
                        let inv = 1.0 / r.k.rows() as f64;
                        let dprobs =
                            Grid2D::from_fn(r.probs.rows(), r.probs.cols(), |_, p| da[p] * inv);
                        let dlogits = softmax_rows_backward(&r.probs, &dprobs, xs)?;
                        // logits = K Qᵀ
                        dqx.add_assign(&matmul_tn(&dlogits, &r.k)?)?;
                        let dk = matmul(&dlogits, &lt.qx)?;
                        let dfeat = linear_back(
                            &trace.object_feats[si],
                            &lp.xa.w_k_text,
                            &dk,
                            &mut g.xa.w_k_text,
                            all,
                        )?;
                        d_objects[si].add_assign(&dfeat)?;
                    }
                    dmerged.scale_rows(w)?
                }
                None => dmerged.clone(),
            };
            let (dq, dk, dv) = attend_back(&lt.qx, &s.k, &s.v, &s.probs, &dz, xs)?;
            dqx.add_assign(&dq)?;
            let mut dc = linear_back(
                &s.cond,
                &lp.xa.w_k_img,
                &dk,
                &mut g.xa.w_k_img,
                want(&format!("layers.{li}.xa.w_k_img")),
            )?;
            dc.add_assign(&linear_back(
                &s.cond,
                &lp.xa.w_v_img,
                &dv,
                &mut g.xa.w_v_img,
                want(&format!("layers.{li}.xa.w_v_img")),
            )?)?;
            d_imgs[si].add_assign(&dc)?;
        }
        // text stream, possibly gated
        let dzt = match &lt.gate {
            Some((raw, gw)) => {
                let zt = &lt.text.out;
                let dgw = row_dots(dmerged, zt);
                let dg = mean_normalize_backward(raw, gw, &dgw);
                let dlogit: Vec<f64> = dg.iter().zip(raw).map(|(d, s)| d * s * (1.0 - s)).collect();
                let dl = Grid2D::column_vector(&dlogit);
                accumulate_weight_grad(&mut g.gate.w_f, zt, &dl)?;
                g.gate.b_f += dlogit.iter().sum::<f64>();
                let mut dz = dmerged.scale_rows(gw)?;
                accumulate_input_grad(&mut dz, &dl, &lp.gate.w_f)?;
                dz
            }
            None => dmerged.clone(),
        };
        let (dq, dk, dv) = attend_back(&lt.qx, &lt.text.k, &lt.text.v, &lt.text.probs, &dzt, xs)?;
        dqx.add_assign(&dq)?;
        d_ctext.add_assign(&linear_back(
            &lt.text.cond,
            &lp.xa.w_k_text,
            &dk,
            &mut g.xa.w_k_text,
            all,
        )?)?;
        d_ctext.add_assign(&linear_back(
            &lt.text.cond,
            &lp.xa.w_v_text,
            &dv,
            &mut g.xa.w_v_text,
            all,
        )?)?;
        let dh2 = linear_back(&lt.h2, &lp.xa.w_q, &dqx, &mut g.xa.w_q, all)?;
        dx.add_assign(&layer_norm_backward(&lt.h2, &lt.inv2, &dh2)?)?;

        // self-attention
        let dctx = linear_back(&lt.ctx, &lp.sa_o, &dx, &mut g.sa_o, all)?;
        let (dq, dk, dv) = attend_back(&lt.q, &lt.k, &lt.v, &lt.probs, &dctx, sa_scale)?;
        let mut dh1 = linear_back(&lt.h1, &lp.sa_q, &dq, &mut g.sa_q, all)?;
        dh1.add_assign(&linear_back(&lt.h1, &lp.sa_k, &dk, &mut g.sa_k, all)?)?;
        dh1.add_assign(&linear_back(&lt.h1, &lp.sa_v, &dv, &mut g.sa_v, all)?)?;
        dx.add_assign(&layer_norm_backward(&lt.h1, &lt.inv1, &dh1)?)?;
    }
    if !all {
        return Ok(());
    }

    // input embedding
    accumulate_weight_grad(&mut grads.in_proj, &trace.x_t, &dx)?;
    add_col_sums(&mut grads.in_bias, &dx);
    grads.pos_embed.add_assign(&dx)?;
    let dtemb = Grid2D::row_vector(&dx.sum_cols());
    accumulate_weight_grad(&mut grads.time_proj, &trace.time_feat, &dtemb)?;

    // text and image encoders
    let mut scatter = |tokens: &[usize], pos: &[usize], dfeat: &Grid2D| {
        for (r, (&tok, &p)) in tokens.iter().zip(pos).enumerate() {
            for (e, q) in grads.token_embed.row_mut(tok).iter_mut().zip(dfeat.row(r)) {
                *e += q;
            }
            for (e, q) in grads.text_pos.row_mut(p).iter_mut().zip(dfeat.row(r)) {
                *e += q;
            }
        }
    };
    let prompt_pos: Vec<usize> = (0..trace.prompt.len()).collect();
    scatter(&trace.prompt, &prompt_pos, &d_ctext);
    for ((tokens, pos), df) in trace.object_tokens.iter().zip(&d_objects) {
        scatter(tokens, pos, df);
    }
    if trace.embeddings.is_empty() {
        grads.null_img.add_assign(&d_imgs[0])?;
    } else {
        for (e, dimg) in trace.embeddings.iter().zip(&d_imgs) {
            let flat = Grid2D::new(1, dimg.len(), dimg.data().to_vec())?;
            accumulate_weight_grad(&mut grads.img_proj, &Grid2D::row_vector(e), &flat)?;
        }
    }
    Ok(())
}
