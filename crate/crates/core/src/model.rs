//! The multi-concept token encoder.
//!
//! Three stages run in order: patch self-attention, text-token
//! cross-attention onto the patches, and visual-concept cross-attention onto
//! the patches. The concatenated output `[visual | text | patches]` is
//! layer-normalized; concept logits come from channel means of the concept
//! tokens and from a convolutional CAM head over the patch grid.

use std::collections::BTreeMap;

use rand::Rng;
use viconex_autodiff::{Float, Graph, Tensor, Var};

use crate::config::{ModelConfig, ProjectionInit, TextTokenMode, LN_EPS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::text_bank::TextConceptBank;

pub const TEXT_EMBEDDINGS: &str = "text.embeddings";
pub const TEXT_PROJECTION: &str = "text.projection";
pub const TEXT_TOKENS: &str = "text.tokens";
pub const VISUAL_TOKENS: &str = "visual_tokens";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Parameters are tracked for gradients; trace only on request.
    Train,
    /// Parameters are constants.
    Infer,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub record_trace: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            record_trace: false,
        }
    }

    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            record_trace: true,
        }
    }
}

/// Head-resolved attention probabilities captured during a forward pass.
///
/// Self-attention layers are `[B, H, M, M]`; concept layers `[B, H, C, M]`.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    pub patch: Vec<Tensor<T>>,
    pub text: Vec<Tensor<T>>,
    pub visual: Vec<Tensor<T>>,
}

impl<T: Float> AttentionTrace<T> {
    /// Largest deviation of any stored row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.patch
            .iter()
            .chain(&self.text)
            .chain(&self.visual)
            .flat_map(|t| {
                let m = *t.shape().last().unwrap_or(&1);
                t.data()
                    .chunks(m)
                    .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

/// Graph handles of the branch logits, each `[B, C]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchLogits {
    pub visual: Var,
    pub text: Option<Var>,
    pub patch: Var,
}

/// Concept logits of one forward pass, `[B, C]` each.
#[derive(Debug, Clone)]
pub struct ConceptScores<T> {
    pub y_vc: Tensor<T>,
    pub y_tc: Option<Tensor<T>>,
    pub y_p: Tensor<T>,
}

impl<T: Float> ConceptScores<T> {
    /// Mean of the available branch logits.
    pub fn fused_logits(&self) -> Tensor<T> {
        let mut branches = vec![&self.y_vc, &self.y_p];
        if let Some(t) = &self.y_tc {
            branches.push(t);
        }
        let k = T::lit(branches.len() as f64);
        let data = (0..self.y_vc.len())
            .map(|i| branches.iter().map(|b| b.data()[i]).sum::<T>() / k)
            .collect();
        Tensor::new(self.y_vc.shape(), data).expect("branch shapes agree")
    }
}

/// Concept probabilities: sigmoid of the mean of the available branches.
pub fn predict<T: Float>(scores: &ConceptScores<T>) -> Tensor<T> {
    scores
        .fused_logits()
        .map(|z| T::one() / (T::one() + (-z).exp()))
}

/// A recorded forward pass.
pub struct Forward<T> {
    pub graph: Graph<T>,
    /// Trainable parameter handles by name (empty in inference mode).
    pub params: BTreeMap<String, Var>,
    pub logits: BranchLogits,
    /// Normalized output sequence `[B, 2C + M, D]`.
    pub t_out: Var,
    /// CAM feature map `[B, N, N, C]`.
    pub cam: Var,
    /// Visual concept tokens after each concept layer, `[B, C, D]`.
    pub visual_layers: Vec<Var>,
    /// Patch tokens entering the concept stage, `[B, M, D]`.
    pub stage_patches: Var,
    pub trace: Option<AttentionTrace<T>>,
    pub batch: usize,
}

impl<T: Float> Forward<T> {
    pub fn scores(&self) -> ConceptScores<T> {
        ConceptScores {
            y_vc: self.graph.value(self.logits.visual).clone(),
            y_tc: self.logits.text.map(|v| self.graph.value(v).clone()),
            y_p: self.graph.value(self.logits.patch).clone(),
        }
    }

    pub fn probabilities(&self) -> Tensor<T> {
        predict(&self.scores())
    }

    pub fn cam_map(&self) -> &Tensor<T> {
        self.graph.value(self.cam)
    }
}

/// Initializes every tensor the configured variant needs.
pub fn init_params<T: Float, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    bank: Option<&TextConceptBank>,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (d, c, m) = (cfg.dim, cfg.concepts, cfg.patches());
    let hidden = d * cfg.mlp_ratio;
    let std = cfg.init_std;
    let mut p = ParamStore::new();
    let weight = |p: &mut ParamStore<T>, name: &str, shape: &[usize], rng: &mut R| {
        p.insert_param(name, Tensor::trunc_normal(shape, std, rng));
    };
    weight(&mut p, "patch_embed.weight", &[cfg.patch_pixels(), d], rng);
    p.insert_param("patch_embed.bias", Tensor::zeros(&[d]));
    weight(&mut p, "pos_embed", &[m, d], rng);
    weight(&mut p, VISUAL_TOKENS, &[c, d], rng);

    let block = |p: &mut ParamStore<T>, prefix: String, cross: bool, rng: &mut R| {
        p.insert_param(format!("{prefix}.norm1.gamma"), Tensor::ones(&[d]));
        p.insert_param(format!("{prefix}.norm1.beta"), Tensor::zeros(&[d]));
        // No query/key/value biases: a key bias cannot change the softmax.
        if cross {
            weight(p, &format!("{prefix}.attn.q.weight"), &[d, d], rng);
            weight(p, &format!("{prefix}.attn.kv.weight"), &[d, 2 * d], rng);
        } else {
            weight(p, &format!("{prefix}.attn.qkv.weight"), &[d, 3 * d], rng);
        }
        weight(p, &format!("{prefix}.attn.proj.weight"), &[d, d], rng);
        p.insert_param(format!("{prefix}.attn.proj.bias"), Tensor::zeros(&[d]));
        let ls = Tensor::full(&[d], T::lit(cfg.layer_scale_init));
        p.insert_param(format!("{prefix}.ls1"), ls.clone());
        p.insert_param(format!("{prefix}.norm2.gamma"), Tensor::ones(&[d]));
        p.insert_param(format!("{prefix}.norm2.beta"), Tensor::zeros(&[d]));
        weight(p, &format!("{prefix}.mlp.fc1.weight"), &[d, hidden], rng);
        p.insert_param(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
        weight(p, &format!("{prefix}.mlp.fc2.weight"), &[hidden, d], rng);
        p.insert_param(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[d]));
        p.insert_param(format!("{prefix}.ls2"), ls);
    };
    for i in 0..cfg.patch_layers {
        block(&mut p, format!("blocks.{i}"), false, rng);
    }
    if cfg.variant.has_text_stage() {
        for i in 0..cfg.text_layers {
            block(&mut p, format!("text_blocks.{i}"), true, rng);
        }
    }
    for i in 0..cfg.concept_layers {
        block(&mut p, format!("concept_blocks.{i}"), true, rng);
    }
    p.insert_param("norm.gamma", Tensor::ones(&[d]));
    p.insert_param("norm.beta", Tensor::zeros(&[d]));
    let k = cfg.cam_kernel;
    p.insert_param("cam.weight", Tensor::trunc_normal(&[k, k, d, c], std, rng));
    p.insert_param("cam.bias", Tensor::zeros(&[c]));

    if cfg.variant.uses_text_bank() {
        let bank = bank.ok_or(Error::Variant {
            variant: cfg.variant.name(),
            msg: "requires a text concept bank".into(),
        })?;
        if bank.concepts() != c || bank.text_dim() != cfg.text_dim {
            return Err(Error::TextBank(format!(
                "bank is {}x{}, model expects {}x{}",
                bank.concepts(),
                bank.text_dim(),
                c,
                cfg.text_dim
            )));
        }
        let dk = cfg.text_dim;
        let w_p: Tensor<f64> = match cfg.text_projection_init {
            ProjectionInit::TruncNormal => Tensor::trunc_normal(&[dk, d], std, rng),
            ProjectionInit::Identity => {
                let mut w = vec![0.0; dk * d];
                for i in 0..dk.min(d) {
                    w[i * d + i] = 1.0;
                }
                Tensor::new(&[dk, d], w)?
            }
        };
        p.insert_buffer(TEXT_EMBEDDINGS, bank.embeddings().cast());
        match cfg.text_mode {
            TextTokenMode::Frozen => {
                p.insert_buffer(TEXT_TOKENS, bank.project(&w_p)?.cast());
                p.insert_buffer(TEXT_PROJECTION, w_p.cast());
            }
            TextTokenMode::Projected => p.insert_param(TEXT_PROJECTION, w_p.cast()),
        }
    }
    Ok(p)
}

/// Rearranges `[B, H, W, 3]` images into `[B, M, p·p·3]` patch rows.
pub fn patchify<T: Float>(cfg: &ModelConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape();
    let h = cfg.image_size;
    if s.len() != 4 || s[1] != h || s[2] != h || s[3] != 3 {
        return Err(Error::Input(format!(
            "expected images of shape [B, {h}, {h}, 3], got {s:?}"
        )));
    }
    let (b, ps, n) = (s[0], cfg.patch_size, cfg.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for pr in 0..n {
            for pc in 0..n {
                for y in 0..ps {
                    let row = ((bi * h + pr * ps + y) * h + pc * ps) * 3;
                    out.extend_from_slice(&src[row..row + ps * 3]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, n * n, cfg.patch_pixels()], out)?)
}

struct Ctx<'a, T: Float> {
    cfg: &'a ModelConfig,
    store: &'a ParamStore<T>,
    g: Graph<T>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl<T: Float> Ctx<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.param(name)?.clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_bcast(y, b)?)
    }

    fn project(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        Ok(self.g.matmul(x, w)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        Ok(self.g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    /// `[B, T, D]` to per-head `[B·H, T, dh]`.
    fn split_heads(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let b = self.g.shape(x)[0];
        let x = self.g.reshape(x, &[b, tokens, h, dh])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[b * h, tokens, dh])?)
    }

    fn merge_heads(&mut self, x: Var, b: usize, tokens: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let x = self.g.reshape(x, &[b, h, tokens, dh])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[b, tokens, h * dh])?)
    }

    /// Scaled dot-product attention on per-head tensors; returns
    /// `(output, probabilities)`.
    fn attend(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let scale = T::lit(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let q = self.g.scale(q, scale);
        let s = self.g.bmm(q, k, true)?;
        let a = self.g.softmax(s, 2)?;
        Ok((self.g.bmm(a, v, false)?, a))
    }

    fn residual(&mut self, x: Var, branch: Var, ls: &str) -> Result<Var> {
        let ls = self.p(ls)?;
        let y = self.g.mul_bcast(branch, ls)?;
        Ok(self.g.add(x, y)?)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.norm2"))?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.g.gelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        self.residual(x, h, &format!("{prefix}.ls2"))
    }

    fn self_block(&mut self, x: Var, prefix: &str) -> Result<(Var, Var)> {
        let (b, t) = {
            let s = self.g.shape(x);
            (s[0], s[1])
        };
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let n = self.norm(x, &format!("{prefix}.norm1"))?;
        let qkv = self.project(n, &format!("{prefix}.attn.qkv"))?;
        let qkv = self.g.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = self.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = self.g.slice(qkv, 0, i, 1)?;
            *part = self.g.reshape(s, &[b * h, t, dh])?;
        }
        let (o, a) = self.attend(parts[0], parts[1], parts[2])?;
        let o = self.merge_heads(o, b, t)?;
        let o = self.linear(o, &format!("{prefix}.attn.proj"))?;
        let x = self.residual(x, o, &format!("{prefix}.ls1"))?;
        Ok((self.mlp(x, prefix)?, a))
    }

    /// Queries `[B, C, D]` attend to `kv` `[B, M, D]`; only the queries are
    /// updated.
    fn cross_block(&mut self, q_tokens: Var, kv_tokens: Var, prefix: &str) -> Result<(Var, Var)> {
        let (b, c) = {
            let s = self.g.shape(q_tokens);
            (s[0], s[1])
        };
        let m = self.g.shape(kv_tokens)[1];
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let nq = self.norm(q_tokens, &format!("{prefix}.norm1"))?;
        let nkv = self.norm(kv_tokens, &format!("{prefix}.norm1"))?;
        let q = self.project(nq, &format!("{prefix}.attn.q"))?;
        let q = self.split_heads(q, c)?;
        let kv = self.project(nkv, &format!("{prefix}.attn.kv"))?;
        let kv = self.g.reshape(kv, &[b, m, 2, h, dh])?;
        let kv = self.g.permute(kv, &[2, 0, 3, 1, 4])?;
        let k = self.g.slice(kv, 0, 0, 1)?;
        let k = self.g.reshape(k, &[b * h, m, dh])?;
        let v = self.g.slice(kv, 0, 1, 1)?;
        let v = self.g.reshape(v, &[b * h, m, dh])?;
        let (o, a) = self.attend(q, k, v)?;
        let o = self.merge_heads(o, b, c)?;
        let o = self.linear(o, &format!("{prefix}.attn.proj"))?;
        let x = self.residual(q_tokens, o, &format!("{prefix}.ls1"))?;
        Ok((self.mlp(x, prefix)?, a))
    }

    /// Text tokens `[C, D]`, frozen or re-projected.
    fn text_tokens(&mut self) -> Result<Var> {
        let missing = || Error::Variant {
            variant: self.cfg.variant.name(),
            msg: "requires a text concept bank".into(),
        };
        match self.cfg.text_mode {
            TextTokenMode::Frozen => {
                let t = self.store.buffer(TEXT_TOKENS).map_err(|_| missing())?.clone();
                Ok(self.g.constant(t))
            }
            TextTokenMode::Projected => {
                let e = self.store.buffer(TEXT_EMBEDDINGS).map_err(|_| missing())?.clone();
                if !self.store.has_param(TEXT_PROJECTION) {
                    return Err(missing());
                }
                let e = self.g.constant(e);
                let w = self.p(TEXT_PROJECTION)?;
                Ok(self.g.matmul(e, w)?)
            }
        }
    }
}

fn head_view<T: Float>(t: &Tensor<T>, batch: usize, heads: usize) -> Tensor<T> {
    let s = t.shape();
    t.clone()
        .reshaped(&[batch, heads, s[1], s[2]])
        .expect("head split")
}

/// Patch embedding `[B, M, D]`: linear projection of the patch rows plus the
/// positional embedding.
pub fn patch_embed<T: Float>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    weight: Var,
    bias: Var,
    pos: Var,
    images: &Tensor<T>,
) -> Result<Var> {
    let rows = g.constant(patchify(cfg, images)?);
    let x = g.matmul(rows, weight)?;
    let x = g.add_bcast(x, bias)?;
    Ok(g.add_bcast(x, pos)?)
}

/// CAM head: patch tokens `[B, M, D]` reshaped to the grid, convolved to `C`
/// channels and pooled. Returns `(F_out_p [B, N, N, C], y_p [B, C])`.
pub fn cam_head<T: Float>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    patches: Var,
    weight: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let s = g.shape(patches).to_vec();
    let n = cfg.grid();
    if s.len() != 3 || s[1] != n * n {
        return Err(Error::Input(format!(
            "cam head expects [B, {}, D] patch tokens, got {s:?}",
            n * n
        )));
    }
    let grid = g.reshape(patches, &[s[0], n, n, s[2]])?;
    let f = g.conv2d(grid, weight, Some(bias))?;
    let y = g.pool(f, cfg.pooling.kind())?;
    Ok((f, y))
}

/// Runs the encoder on `[B, H, W, 3]` images with values in `[0, 1]`.
pub fn forward<T: Float>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    opts: ForwardOptions,
) -> Result<Forward<T>> {
    let variant = cfg.variant;
    let mut cx = Ctx {
        cfg,
        store,
        g: Graph::new(),
        vars: BTreeMap::new(),
        trainable: opts.mode == Mode::Train,
    };
    let batch = images.shape().first().copied().unwrap_or(0);
    let (c, m, d) = (cfg.concepts, cfg.patches(), cfg.dim);
    let record = opts.record_trace;

    let w = cx.p("patch_embed.weight")?;
    let b = cx.p("patch_embed.bias")?;
    let pos = cx.p("pos_embed")?;
    let mut x = patch_embed(&mut cx.g, cfg, w, b, pos, images)?;

    let mut patch_attn = Vec::with_capacity(cfg.patch_layers);
    for i in 0..cfg.patch_layers {
        let (nx, a) = cx.self_block(x, &format!("blocks.{i}"))?;
        x = nx;
        patch_attn.push(a);
    }
    let patches = x;

    let text_init = if variant.uses_text_bank() {
        Some(cx.text_tokens()?)
    } else {
        None
    };

    let mut text_attn = Vec::new();
    let text_out = match text_init {
        Some(tc) if variant.has_text_stage() => {
            let mut t = cx.g.expand_leading(tc, batch);
            for i in 0..cfg.text_layers {
                let (nt, a) = cx.cross_block(t, patches, &format!("text_blocks.{i}"))?;
                t = nt;
                text_attn.push(a);
            }
            Some(t)
        }
        _ => None,
    };

    let vis = cx.p(VISUAL_TOKENS)?;
    let mut v = cx.g.expand_leading(vis, batch);
    if variant.fuses_tokens() {
        let tc = text_init.expect("fusing variants carry a text bank");
        v = cx.g.add_bcast(v, tc)?;
    }
    let mut visual_attn = Vec::with_capacity(cfg.concept_layers);
    let mut visual_layers = Vec::with_capacity(cfg.concept_layers);
    for i in 0..cfg.concept_layers {
        let (nv, a) = cx.cross_block(v, patches, &format!("concept_blocks.{i}"))?;
        v = nv;
        visual_attn.push(a);
        visual_layers.push(v);
    }

    let text_slot = match (text_out, text_init) {
        (Some(t), _) => t,
        (None, Some(tc)) => cx.g.expand_leading(tc, batch),
        (None, None) => cx.g.constant(Tensor::zeros(&[batch, c, d])),
    };
    let seq = cx.g.concat(&[v, text_slot, patches], 1)?;
    let t_out = cx.norm(seq, "norm")?;

    let vc = cx.g.slice(t_out, 1, 0, c)?;
    let y_vc = cx.g.mean_axis(vc, 2)?;
    let y_tc = if text_out.is_some() {
        let tc = cx.g.slice(t_out, 1, c, c)?;
        Some(cx.g.mean_axis(tc, 2)?)
    } else {
        None
    };
    let p_out = cx.g.slice(t_out, 1, 2 * c, m)?;
    let cw = cx.p("cam.weight")?;
    let cb = cx.p("cam.bias")?;
    let (cam, y_p) = cam_head(&mut cx.g, cfg, p_out, cw, cb)?;

    let trace = record.then(|| {
        let h = cfg.heads;
        let grab = |vars: &[Var]| -> Vec<Tensor<T>> {
            vars.iter().map(|&a| head_view(cx.g.value(a), batch, h)).collect()
        };
        AttentionTrace {
            patch: grab(&patch_attn),
            text: grab(&text_attn),
            visual: grab(&visual_attn),
        }
    });

    let params = if cx.trainable { cx.vars } else { BTreeMap::new() };
    Ok(Forward {
        graph: cx.g,
        params,
        logits: BranchLogits {
            visual: y_vc,
            text: y_tc,
            patch: y_p,
        },
        t_out,
        cam,
        visual_layers,
        stage_patches: patches,
        trace,
        batch,
    })
}

/// Model configuration together with its parameters.
#[derive(Debug, Clone)]
pub struct MctModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl MctModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, bank: Option<&TextConceptBank>, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, bank, rng)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, images: &Tensor<f32>, opts: ForwardOptions) -> Result<Forward<f32>> {
        forward(&self.config, &self.params, images, opts)
    }

    /// Concept probabilities `[B, C]` without a trace.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let f = forward(
            &self.config,
            &self.params,
            images,
            ForwardOptions {
                mode: Mode::Infer,
                record_trace: false,
            },
        )?;
        Ok(f.probabilities())
    }
}
