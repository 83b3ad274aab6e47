use crate::attention::AttnProjections;
use crate::error::{Error, Result};
use crate::merge::TextWeightLayer;
use crate::numkit::{Grid2D, Rng};

use super::config::{ModelConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub sa_q: Grid2D,
    pub sa_k: Grid2D,
    pub sa_v: Grid2D,
    pub sa_o: Grid2D,
    pub xa: AttnProjections,
    pub gate: TextWeightLayer,
    pub mlp_w1: Grid2D,
    pub mlp_b1: Grid2D,
    pub mlp_w2: Grid2D,
    pub mlp_b2: Grid2D,
}

/// All weights of the toy denoiser `ε_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub token_embed: Grid2D,
    pub text_pos: Grid2D,
    pub img_proj: Grid2D,
    pub null_img: Grid2D,
    pub in_proj: Grid2D,
    pub in_bias: Grid2D,
    pub pos_embed: Grid2D,
    pub time_proj: Grid2D,
    pub layers: Vec<LayerParams>,
    pub out_proj: Grid2D,
    pub out_bias: Grid2D,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

/// Names of the tensors updated in finetune mode (per layer).
pub const FINETUNE_SUFFIXES: [&str; 4] = ["xa.w_k_img", "xa.w_v_img", "gate.w_f", "gate.b_f"];

pub fn is_trainable(name: &str, mode: TrainMode) -> bool {
    match mode {
        TrainMode::Pretrain => true,
        TrainMode::Finetune => {
            name.starts_with("layers.") && FINETUNE_SUFFIXES.iter().any(|s| name.ends_with(s))
        }
    }
}

impl DenoiserParams {
    /// Random initialization, rounded to 32-bit values so checkpoints
    /// round-trip exactly. Text-weight layers start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed).derive("init");
        let c = config;
        let (d, n) = (c.dim, c.positions());
        let stream = |label: &str| root.derive(label);
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let mut r = root.derive_indexed("layer", l as u64);
            let xa = AttnProjections::new(
                r.init_grid(d, d, fan(d)),
                r.init_grid(c.text_dim, d, fan(c.text_dim)),
                r.init_grid(c.text_dim, d, fan(c.text_dim)),
                r.init_grid(c.image_dim, d, fan(c.image_dim)),
                r.init_grid(c.image_dim, d, fan(c.image_dim)),
            )?;
            layers.push(LayerParams {
                sa_q: r.init_grid(d, d, fan(d)),
                sa_k: r.init_grid(d, d, fan(d)),
                sa_v: r.init_grid(d, d, fan(d)),
                sa_o: r.init_grid(d, d, fan(d)),
                xa,
                gate: TextWeightLayer::zeros(d),
                mlp_w1: r.init_grid(d, c.mlp_hidden, fan(d)),
                mlp_b1: Grid2D::zeros(1, c.mlp_hidden),
                mlp_w2: r.init_grid(c.mlp_hidden, d, fan(c.mlp_hidden)),
                mlp_b2: Grid2D::zeros(1, d),
            });
        }
        let mut p = Self {
            config: c.clone(),
            token_embed: stream("token_embed").init_grid(c.vocab, c.text_dim, 1.0),
            text_pos: stream("text_pos").init_grid(c.max_text_len, c.text_dim, 0.1),
            img_proj: stream("img_proj").init_grid(c.clip_dim, c.image_tokens * c.image_dim, 1.0),
            null_img: stream("null_img").init_grid(c.image_tokens, c.image_dim, 1.0),
            in_proj: stream("in_proj").init_grid(c.latent_channels, d, fan(c.latent_channels)),
            in_bias: Grid2D::zeros(1, d),
            pos_embed: stream("pos_embed").init_grid(n, d, 0.5),
            time_proj: stream("time_proj").init_grid(c.time_dim, d, fan(c.time_dim)),
            layers,
            out_proj: stream("out_proj").init_grid(d, c.latent_channels, 0.1 * fan(d)),
            out_bias: Grid2D::zeros(1, c.latent_channels),
        };
        p.for_each_mut(|t| {
            for v in t.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
        Ok(p)
    }

    /// Same shapes, all zeros (gradient and optimizer-moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.data.fill(0.0));
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        let p = self;
        macro_rules! grid {
            ($g:expr) => {
                ($g.shape(), $g.data())
            };
        }
        macro_rules! scalar {
            ($s:expr) => {
                ((1usize, 1usize), std::slice::from_ref(&$s))
            };
        }
        macro_rules! push {
            ($name:expr, $v:expr) => {{
                let (shape, data) = $v;
                out.push(TensorRef {
                    name: $name.to_string(),
                    shape,
                    data,
                });
            }};
        }
        push!("token_embed", grid!(p.token_embed));
        push!("text_pos", grid!(p.text_pos));
        push!("img_proj", grid!(p.img_proj));
        push!("null_img", grid!(p.null_img));
        push!("in_proj", grid!(p.in_proj));
        push!("in_bias", grid!(p.in_bias));
        push!("pos_embed", grid!(p.pos_embed));
        push!("time_proj", grid!(p.time_proj));
        for (l, layer) in p.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            push!(n("sa_q"), grid!(layer.sa_q));
            push!(n("sa_k"), grid!(layer.sa_k));
            push!(n("sa_v"), grid!(layer.sa_v));
            push!(n("sa_o"), grid!(layer.sa_o));
            push!(n("xa.w_q"), grid!(layer.xa.w_q));
            push!(n("xa.w_k_text"), grid!(layer.xa.w_k_text));
            push!(n("xa.w_v_text"), grid!(layer.xa.w_v_text));
            push!(n("xa.w_k_img"), grid!(layer.xa.w_k_img));
            push!(n("xa.w_v_img"), grid!(layer.xa.w_v_img));
            push!(n("gate.w_f"), grid!(layer.gate.w_f));
            push!(n("gate.b_f"), scalar!(layer.gate.b_f));
            push!(n("mlp_w1"), grid!(layer.mlp_w1));
            push!(n("mlp_b1"), grid!(layer.mlp_b1));
            push!(n("mlp_w2"), grid!(layer.mlp_w2));
            push!(n("mlp_b2"), grid!(layer.mlp_b2));
        }
        push!("out_proj", grid!(p.out_proj));
        push!("out_bias", grid!(p.out_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let p = self;
        macro_rules! grid {
            ($g:expr) => {{
                let shape = $g.shape();
                (shape, $g.data_mut())
            }};
        }
        macro_rules! scalar {
            ($s:expr) => {
                ((1usize, 1usize), std::slice::from_mut(&mut $s))
            };
        }
        macro_rules! push {
            ($name:expr, $v:expr) => {{
                let (shape, data) = $v;
                out.push(TensorMut {
                    name: $name.to_string(),
                    shape,
                    data,
                });
            }};
        }
        push!("token_embed", grid!(p.token_embed));
        push!("text_pos", grid!(p.text_pos));
        push!("img_proj", grid!(p.img_proj));
        push!("null_img", grid!(p.null_img));
        push!("in_proj", grid!(p.in_proj));
        push!("in_bias", grid!(p.in_bias));
        push!("pos_embed", grid!(p.pos_embed));
        push!("time_proj", grid!(p.time_proj));
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            push!(n("sa_q"), grid!(layer.sa_q));
            push!(n("sa_k"), grid!(layer.sa_k));
            push!(n("sa_v"), grid!(layer.sa_v));
            push!(n("sa_o"), grid!(layer.sa_o));
            push!(n("xa.w_q"), grid!(layer.xa.w_q));
            push!(n("xa.w_k_text"), grid!(layer.xa.w_k_text));
            push!(n("xa.w_v_text"), grid!(layer.xa.w_v_text));
            push!(n("xa.w_k_img"), grid!(layer.xa.w_k_img));
            push!(n("xa.w_v_img"), grid!(layer.xa.w_v_img));
            push!(n("gate.w_f"), grid!(layer.gate.w_f));
            push!(n("gate.b_f"), scalar!(layer.gate.b_f));
            push!(n("mlp_w1"), grid!(layer.mlp_w1));
            push!(n("mlp_b1"), grid!(layer.mlp_b1));
            push!(n("mlp_w2"), grid!(layer.mlp_w2));
            push!(n("mlp_b2"), grid!(layer.mlp_b2));
        }
        push!("out_proj", grid!(p.out_proj));
        push!("out_bias", grid!(p.out_bias));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(TensorMut<'_>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Copies values from `(name, shape, data)` entries; every tensor must be present.
    pub fn assign(&mut self, entries: &[(String, (usize, usize), Vec<f64>)]) -> Result<()> {
        for t in self.tensors_mut() {
            let e = entries
                .iter()
                .find(|e| e.0 == t.name)
                .ok_or_else(|| Error::Data {
                    record: t.name.clone(),
                    message: "tensor missing".into(),
                })?;
            if e.1 != t.shape || e.2.len() != t.data.len() {
                return Err(Error::Shape {
                    op: "assign tensor",
                    left: t.shape,
                    right: e.1,
                });
            }
            t.data.copy_from_slice(&e.2);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
