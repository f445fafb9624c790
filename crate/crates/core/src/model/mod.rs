//! Two tiny pre-norm transformers.
//!
//! `EncoderVision` splits an image into square patches, embeds them with a
//! linear map, prepends a learned class token, adds learned positions and
//! classifies from the class token. `CausalText` embeds token ids, adds learned
//! positions, attends causally and classifies from the last position.
//!
//! Linear maps compute `x · W + b` with `W` stored as `[in, out]`.

pub mod checkpoint;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::rng::{self, RunRng, Stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    EncoderVision,
    CausalText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

/// Resolved input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Vision {
        image_side: usize,
        channels: usize,
        patch_size: usize,
    },
    Text {
        vocab_size: usize,
        max_len: usize,
    },
}

impl ModelConfig {
    pub fn vision(image_side: usize, channels: usize, patch_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::EncoderVision,
            depth: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_classes,
            image_side: Some(image_side),
            channels: Some(channels),
            patch_size: Some(patch_size),
            vocab_size: None,
            max_len: None,
            dropout: 0.0,
        }
    }

    pub fn text(vocab_size: usize, max_len: usize, n_classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::CausalText,
            depth: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_classes,
            image_side: None,
            channels: None,
            patch_size: None,
            vocab_size: Some(vocab_size),
            max_len: Some(max_len),
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<InputSpec> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("depth, d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.kind {
            ModelKind::EncoderVision => {
                let (Some(side), Some(channels), Some(patch)) =
                    (self.image_side, self.channels, self.patch_size)
                else {
                    return bad("encoder_vision needs image_side, channels and patch_size".into());
                };
                if side == 0 || channels == 0 || patch == 0 {
                    return bad("image_side, channels and patch_size must be positive".into());
                }
                if side % patch != 0 {
                    return bad(format!(
                        "patch_size {patch} does not divide image_side {side}"
                    ));
                }
                Ok(InputSpec::Vision {
                    image_side: side,
                    channels,
                    patch_size: patch,
                })
            }
            ModelKind::CausalText => {
                let (Some(vocab), Some(max_len)) = (self.vocab_size, self.max_len) else {
                    return bad("causal_text needs vocab_size and max_len".into());
                };
                if vocab < 2 || max_len == 0 {
                    return bad("vocab_size must be at least 2 and max_len positive".into());
                }
                Ok(InputSpec::Text {
                    vocab_size: vocab,
                    max_len,
                })
            }
        }
    }

    /// Tokens seen by the attention blocks: patches plus the class token, or `max_len`.
    pub fn seq_len(&self) -> Result<usize> {
        Ok(match self.validate()? {
            InputSpec::Vision {
                image_side,
                patch_size,
                ..
            } => (image_side / patch_size).pow(2) + 1,
            InputSpec::Text { max_len, .. } => max_len,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and init rules in model order.
fn layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init, bool)>> {
    let spec = config.validate()?;
    let d = config.d_model;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, prunable: bool| {
        out.push((name, shape, init, prunable));
    };
    match spec {
        InputSpec::Vision {
            channels,
            patch_size,
            ..
        } => {
            let seq = config.seq_len()?;
            push(
                "patch_embed.weight".into(),
                vec![channels * patch_size * patch_size, d],
                Init::Normal,
                false,
            );
            push("patch_embed.bias".into(), vec![d], Init::Zeros, false);
            push("cls_token".into(), vec![d], Init::Normal, false);
            push("pos_embed".into(), vec![seq, d], Init::Normal, false);
        }
        InputSpec::Text {
            vocab_size,
            max_len,
        } => {
            push("tok_embed".into(), vec![vocab_size, d], Init::Normal, false);
            push("pos_embed".into(), vec![max_len, d], Init::Normal, false);
        }
    }
    for i in 0..config.depth {
        let p = format!("blocks.{i}");
        push(format!("{p}.ln1.gain"), vec![d], Init::Ones, false);
        push(format!("{p}.ln1.bias"), vec![d], Init::Zeros, false);
        for proj in ["q", "k", "v", "o"] {
            push(
                format!("{p}.attn.{proj}.weight"),
                vec![d, d],
                Init::Normal,
                true,
            );
            push(format!("{p}.attn.{proj}.bias"), vec![d], Init::Zeros, false);
        }
        push(format!("{p}.ln2.gain"), vec![d], Init::Ones, false);
        push(format!("{p}.ln2.bias"), vec![d], Init::Zeros, false);
        push(
            format!("{p}.ff.fc1.weight"),
            vec![d, config.d_ff],
            Init::Normal,
            true,
        );
        push(
            format!("{p}.ff.fc1.bias"),
            vec![config.d_ff],
            Init::Zeros,
            false,
        );
        push(
            format!("{p}.ff.fc2.weight"),
            vec![config.d_ff, d],
            Init::Normal,
            true,
        );
        push(format!("{p}.ff.fc2.bias"), vec![d], Init::Zeros, false);
    }
    push("ln_f.gain".into(), vec![d], Init::Ones, false);
    push("ln_f.bias".into(), vec![d], Init::Zeros, false);
    push(
        "head.weight".into(),
        vec![d, config.n_classes],
        Init::Normal,
        true,
    );
    push(
        "head.bias".into(),
        vec![config.n_classes],
        Init::Zeros,
        false,
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub prunable: bool,
}

/// A model input batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch<T: Scalar = f32> {
    /// `[B, C, H, W]` pixels.
    Images(Tensor<T>),
    /// Row-major `[batch, seq_len]` token ids.
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        seq_len: usize,
    },
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images(t) => t.shape()[0],
            Batch::Tokens { batch, .. } => *batch,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of a forward pass: logits plus the graph handle of every parameter,
/// in model order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// Optional forward behavior.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Dropout stream; dropout is active only when this is set and the rate is positive.
    pub dropout_rng: Option<&'a mut RunRng>,
    /// Causal models only: classify from this position instead of the last one.
    pub readout_position: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    spec: InputSpec,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    active_mask: Option<PruneMask>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.active_mask == other.active_mask
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded initialization: truncated normal (std 0.02)
    /// weights and embeddings, zero biases, unit layer-norm gains.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with_stream(config, seed, Stream::Init)
    }

    pub(crate) fn build_with_stream(
        config: &ModelConfig,
        seed: u64,
        stream: Stream,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, stream);
        let params = layout(config)?
            .into_iter()
            .map(|(name, shape, init, prunable)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Normal => (0..n)
                        .map(|_| T::from_f64(rng::truncated_normal(&mut rng, INIT_STD)))
                        .collect(),
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                let tensor = Tensor::new(shape, data)?.with_requires_grad(true);
                Ok(Parameter {
                    name,
                    tensor,
                    prunable,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parameters(config.clone(), params)
    }

    /// Assembles a model from explicit parameters, which must match the
    /// layout implied by `config` exactly (names, order and shapes).
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter<T>>) -> Result<Self> {
        let spec = config.validate()?;
        let expected = layout(&config)?;
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _, prunable), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() || *prunable != p.prunable {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            config,
            spec,
            params,
            index,
            active_mask: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_spec(&self) -> InputSpec {
        self.spec
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().filter(|p| p.prunable)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Order-sensitive checksum: `Σ (k + 1) · v_k` over all values in model order.
    /// Zero exactly when every parameter is zero.
    pub fn checksum(&self) -> f64 {
        checksum_values(
            self.params
                .iter()
                .flat_map(|p| p.tensor.data().iter().map(|v| v.as_f64())),
        )
    }

    pub fn active_mask(&self) -> Option<&PruneMask> {
        self.active_mask.as_ref()
    }

    pub(crate) fn set_active_mask(&mut self, mask: Option<PruneMask>) {
        self.active_mask = mask;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Same weights in another precision, without the active mask.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let params = self
            .params
            .iter()
            .map(|p| Parameter {
                name: p.name.clone(),
                tensor: p.tensor.cast(),
                prunable: p.prunable,
            })
            .collect();
        Model::from_parameters(self.config.clone(), params).expect("layout is unchanged by a cast")
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Forward> {
        self.forward_with(g, batch, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(&p.tensor))
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.d_model;
        let (x, b, s, readout) = match (self.spec, batch) {
            (
                InputSpec::Vision {
                    image_side,
                    channels,
                    patch_size,
                },
                Batch::Images(pixels),
            ) => {
                let shape = pixels.shape();
                if shape.len() != 4 || shape[1..] != [channels, image_side, image_side] {
                    return Err(Error::shape(
                        "forward",
                        format!("expected [B, {channels}, {image_side}, {image_side}] images, got {shape:?}"),
                    ));
                }
                let b = shape[0];
                let (patches, n_patches) =
                    patchify(pixels.data(), b, channels, image_side, patch_size);
                let width = channels * patch_size * patch_size;
                let xp = g.constant(vec![b * n_patches, width], patches)?;
                let emb = g.matmul(xp, self.var(&vars, "patch_embed.weight"))?;
                let emb = g.add_bias(emb, self.var(&vars, "patch_embed.bias"))?;
                let emb = g.reshape(emb, vec![b, n_patches, d])?;
                let seq = g.prepend_token(emb, self.var(&vars, "cls_token"))?;
                let seq = g.add_bias(seq, self.var(&vars, "pos_embed"))?;
                let s = n_patches + 1;
                let x = g.reshape(seq, vec![b * s, d])?;
                (x, b, s, 0)
            }
            (
                InputSpec::Text { max_len, .. },
                Batch::Tokens {
                    ids,
                    batch,
                    seq_len,
                },
            ) => {
                let (b, s) = (*batch, *seq_len);
                if b == 0 || s == 0 || s > max_len || ids.len() != b * s {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "{} ids for batch {b} x seq_len {s} (max_len {max_len})",
                            ids.len()
                        ),
                    ));
                }
                let tok = g.embedding(self.var(&vars, "tok_embed"), ids)?;
                let positions: Vec<usize> = (0..s).collect();
                let pos = g.gather_rows(self.var(&vars, "pos_embed"), &positions)?;
                let tok = g.reshape(tok, vec![b, s, d])?;
                let x = g.add_bias(tok, pos)?;
                let x = g.reshape(x, vec![b * s, d])?;
                let readout = opts.readout_position.unwrap_or(s - 1);
                if readout >= s {
                    return Err(Error::Index {
                        op: "forward",
                        index: readout,
                        bound: s,
                    });
                }
                (x, b, s, readout)
            }
            _ => {
                return Err(Error::shape(
                    "forward",
                    format!("{:?} model cannot take this batch kind", self.config.kind),
                ))
            }
        };
        let causal = self.config.kind == ModelKind::CausalText;
        let mut x = x;
        for i in 0..self.config.depth {
            x = self.block(g, &vars, i, x, b, s, causal, &mut opts)?;
        }
        let x = g.layer_norm(
            x,
            self.var(&vars, "ln_f.gain"),
            self.var(&vars, "ln_f.bias"),
            LAYER_NORM_EPS,
        )?;
        let rows: Vec<usize> = (0..b).map(|i| i * s + readout).collect();
        let pooled = g.gather_rows(x, &rows)?;
        let logits = linear(
            g,
            pooled,
            self.var(&vars, "head.weight"),
            self.var(&vars, "head.bias"),
        )?;
        Ok(Forward {
            logits,
            params: vars,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        i: usize,
        x: Var,
        b: usize,
        s: usize,
        causal: bool,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let p = |suffix: &str| self.var(vars, &format!("blocks.{i}.{suffix}"));
        let h = g.layer_norm(x, p("ln1.gain"), p("ln1.bias"), LAYER_NORM_EPS)?;
        let q = linear(g, h, p("attn.q.weight"), p("attn.q.bias"))?;
        let k = linear(g, h, p("attn.k.weight"), p("attn.k.bias"))?;
        let v = linear(g, h, p("attn.v.weight"), p("attn.v.bias"))?;
        let ctx = attend(g, q, k, v, b, s, self.config.n_heads, causal)?;
        let attn = linear(g, ctx, p("attn.o.weight"), p("attn.o.bias"))?;
        let attn = self.dropout(g, attn, opts)?;
        let x = g.add(x, attn)?;

        let h = g.layer_norm(x, p("ln2.gain"), p("ln2.bias"), LAYER_NORM_EPS)?;
        let f = linear(g, h, p("ff.fc1.weight"), p("ff.fc1.bias"))?;
        let f = g.gelu(f)?;
        let f = linear(g, f, p("ff.fc2.weight"), p("ff.fc2.bias"))?;
        let f = self.dropout(g, f, opts)?;
        g.add(x, f)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let rate = self.config.dropout;
        match opts.dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - rate));
                let factors = (0..g.value(x).len())
                    .map(|_| {
                        if rng.gen::<f64>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                g.mask_mul(x, factors)
            }
            _ => Ok(x),
        }
    }
}

pub(crate) fn checksum_values(values: impl Iterator<Item = f64>) -> f64 {
    values.enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum()
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Multi-head scaled dot-product attention over `[B·S, d]` projections.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    b: usize,
    s: usize,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, vec![b, s, heads, dh])?;
        let t = g.permute_0213(t)?;
        g.reshape(t, vec![b * heads, s, dh])
    };
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let probs = if causal {
        g.causal_softmax(scores)?
    } else {
        g.softmax(scores, 2)?
    };
    let ctx = g.batch_matmul(probs, v, false)?;
    let ctx = g.reshape(ctx, vec![b, heads, s, dh])?;
    let ctx = g.permute_0213(ctx)?;
    g.reshape(ctx, vec![b * s, d])
}

/// `[B, C, H, W]` pixels to `[B·P, C·p·p]` patch rows. Patches are ordered
/// row-major over the grid; each row is channel-major, then pixel row, then column.
pub fn patchify<T: Scalar>(
    pixels: &[T],
    b: usize,
    c: usize,
    side: usize,
    patch: usize,
) -> (Vec<T>, usize) {
    let grid = side / patch;
    let n_patches = grid * grid;
    let mut out = Vec::with_capacity(pixels.len());
    for img in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = gy * patch + py;
                        let start = ((img * c + ch) * side + row) * side + gx * patch;
                        out.extend_from_slice(&pixels[start..start + patch]);
                    }
                }
            }
        }
    }
    (out, n_patches)
}
