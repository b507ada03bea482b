//! The U-ViT noise-prediction network.
//!
//! Time, condition and image patches all enter as tokens. The transformer
//! stack is split into `(L-1)/2` encoder blocks, one middle block and
//! `(L-1)/2` decoder blocks; every encoder output is pushed onto a stack and
//! popped (LIFO) by the mirrored decoder block, which merges it with its main
//! input before running. A 3x3 convolution sits at the output.

mod config;

pub use config::{
    ConditionKind, ConvMode, PatchEmbedMode, PosEmbedMode, SkipMode, TimeMode, UViTConfig,
};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::conditioning::{sinusoidal_embedding, ConditionInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
    /// AdaLN projection bias: scale half starts at one, shift half at zero.
    ScaleShift,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        let name = name.into();
        let decay = !(name.contains("norm") || name == "pos_embed");
        Self {
            name,
            shape: shape.to_vec(),
            decay,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

fn block_prefixes(cfg: &UViTConfig) -> Vec<String> {
    let k = cfg.half_depth();
    let mut v: Vec<String> = (0..k).map(|i| format!("in_blocks.{i}")).collect();
    v.push("mid_block".into());
    v.extend((0..k).map(|j| format!("out_blocks.{j}")));
    v
}

/// Every parameter the configuration implies, in construction order.
pub fn param_specs(cfg: &UViTConfig) -> Vec<ParamSpec> {
    use Init::*;
    let d = cfg.hidden_size;
    let pd = cfg.patch_dim();
    let c = cfg.channels;
    let mut s = Vec::new();
    match cfg.patch_embed_mode {
        PatchEmbedMode::Linear => {
            s.push(ParamSpec::new("patch_embed.weight", &[pd, d], TruncNormal));
            s.push(ParamSpec::new("patch_embed.bias", &[d], Zeros));
        }
        PatchEmbedMode::ConvStack => {
            let hd = d / 2;
            s.push(ParamSpec::new("patch_embed.conv1.weight", &[3, 3, pd, hd], TruncNormal));
            s.push(ParamSpec::new("patch_embed.conv1.bias", &[hd], Zeros));
            s.push(ParamSpec::new("patch_embed.conv2.weight", &[3, 3, hd, hd], TruncNormal));
            s.push(ParamSpec::new("patch_embed.conv2.bias", &[hd], Zeros));
            s.push(ParamSpec::new("patch_embed.proj.weight", &[1, 1, hd, d], TruncNormal));
            s.push(ParamSpec::new("patch_embed.proj.bias", &[d], Zeros));
        }
    }
    s.push(ParamSpec::new("time_embed.weight", &[d, d], TruncNormal));
    s.push(ParamSpec::new("time_embed.bias", &[d], Zeros));
    match cfg.condition {
        ConditionKind::None => {}
        ConditionKind::Class { num_classes } => {
            s.push(ParamSpec::new("label_embed.weight", &[num_classes + 1, d], TruncNormal));
        }
        ConditionKind::Context { context_dim, .. } => {
            s.push(ParamSpec::new("context_embed.weight", &[context_dim, d], TruncNormal));
            s.push(ParamSpec::new("context_embed.bias", &[d], Zeros));
            s.push(ParamSpec::new("context_null", &[d], TruncNormal));
        }
    }
    if cfg.pos_embed_mode == PosEmbedMode::Learnable1d {
        s.push(ParamSpec::new("pos_embed", &[cfg.seq_len(), d], TruncNormal));
    }
    let k = cfg.half_depth();
    for (i, prefix) in block_prefixes(cfg).into_iter().enumerate() {
        let is_decoder = i > k;
        if is_decoder {
            match cfg.skip_mode {
                SkipMode::ConcatLinear => {
                    s.push(ParamSpec::new(format!("{prefix}.skip.weight"), &[2 * d, d], TruncNormal));
                    s.push(ParamSpec::new(format!("{prefix}.skip.bias"), &[d], Zeros));
                }
                SkipMode::LinearAdd | SkipMode::AddLinear => {
                    s.push(ParamSpec::new(format!("{prefix}.skip.weight"), &[d, d], TruncNormal));
                    s.push(ParamSpec::new(format!("{prefix}.skip.bias"), &[d], Zeros));
                }
                SkipMode::Add | SkipMode::None => {}
            }
        }
        for norm in ["norm1", "norm2"] {
            match cfg.time_mode {
                TimeMode::Token => {
                    s.push(ParamSpec::new(format!("{prefix}.{norm}.weight"), &[d], Ones));
                    s.push(ParamSpec::new(format!("{prefix}.{norm}.bias"), &[d], Zeros));
                }
                TimeMode::AdaLn => {
                    let ada = if norm == "norm1" { "ada1" } else { "ada2" };
                    s.push(ParamSpec::new(format!("{prefix}.{ada}.weight"), &[d, 2 * d], TruncNormal));
                    s.push(ParamSpec::new(format!("{prefix}.{ada}.bias"), &[2 * d], ScaleShift));
                }
            }
        }
        s.push(ParamSpec::new(format!("{prefix}.attn.qkv.weight"), &[d, 3 * d], TruncNormal));
        s.push(ParamSpec::new(format!("{prefix}.attn.qkv.bias"), &[3 * d], Zeros));
        s.push(ParamSpec::new(format!("{prefix}.attn.proj.weight"), &[d, d], TruncNormal));
        s.push(ParamSpec::new(format!("{prefix}.attn.proj.bias"), &[d], Zeros));
        s.push(ParamSpec::new(format!("{prefix}.mlp.fc1.weight"), &[d, cfg.mlp_size], TruncNormal));
        s.push(ParamSpec::new(format!("{prefix}.mlp.fc1.bias"), &[cfg.mlp_size], Zeros));
        s.push(ParamSpec::new(format!("{prefix}.mlp.fc2.weight"), &[cfg.mlp_size, d], TruncNormal));
        s.push(ParamSpec::new(format!("{prefix}.mlp.fc2.bias"), &[d], Zeros));
    }
    s.push(ParamSpec::new("final_norm.weight", &[d], Ones));
    s.push(ParamSpec::new("final_norm.bias", &[d], Zeros));
    // The last layer before the output starts at zero so the network starts
    // as the zero function.
    match cfg.conv_mode {
        ConvMode::BeforeLinear => {
            s.push(ParamSpec::new("conv_out.weight", &[3, 3, d, d], TruncNormal));
            s.push(ParamSpec::new("conv_out.bias", &[d], Zeros));
            s.push(ParamSpec::new("head.weight", &[d, pd], Zeros));
            s.push(ParamSpec::new("head.bias", &[pd], Zeros));
        }
        ConvMode::AfterLinear => {
            s.push(ParamSpec::new("head.weight", &[d, pd], TruncNormal));
            s.push(ParamSpec::new("head.bias", &[pd], Zeros));
            s.push(ParamSpec::new("conv_out.weight", &[3, 3, c, c], Zeros));
            s.push(ParamSpec::new("conv_out.bias", &[c], Zeros));
        }
        ConvMode::None => {
            s.push(ParamSpec::new("head.weight", &[d, pd], Zeros));
            s.push(ParamSpec::new("head.bias", &[pd], Zeros));
        }
    }
    s
}

/// Closed-form parameter count for a configuration, without allocating.
pub fn expected_param_count(cfg: &UViTConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

fn trunc_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

/// Replaces transformer blocks for structural tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockOverride {
    #[default]
    None,
    Identity,
    /// Block at overall layer index `l` adds the constant `l + 1`.
    AddLayerIndex,
}

/// Values observed around the long skip connections during one forward.
#[derive(Clone, Debug, Default)]
pub struct SkipTrace {
    pub encoder_outputs: Vec<Tensor>,
    pub decoder_main: Vec<Tensor>,
    pub decoder_skip: Vec<Tensor>,
    pub decoder_inputs: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct ForwardHooks {
    pub blocks: BlockOverride,
    pub trace: Option<SkipTrace>,
}

/// Graph handles for every model parameter, aligned with [`UViTModel::params`].
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct UViTModel {
    config: UViTConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl UViTModel {
    /// Builds and initializes a model; identical `(config, seed)` give
    /// identical parameters.
    pub fn build(config: UViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let specs = param_specs(&config);
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let n = spec.numel();
            let data: Vec<f64> = match spec.init {
                Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, &normal)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::ScaleShift => (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect(),
            };
            params.push(Param {
                tensor: Tensor::from_vec(&spec.shape, data)?,
                name: spec.name,
                decay: spec.decay,
            });
        }
        Ok(Self::assemble(config, params))
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// the configuration.
    pub fn from_named_tensors(config: UViTConfig, mut named: HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for spec in param_specs(&config) {
            let tensor = named.remove(&spec.name).ok_or_else(|| {
                Error::Persistence(format!("missing tensor '{}'", spec.name))
            })?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Persistence(format!(
                    "tensor '{}' has shape {:?}, config implies {:?}",
                    spec.name,
                    tensor.shape(),
                    spec.shape
                )));
            }
            params.push(Param {
                name: spec.name,
                tensor,
                decay: spec.decay,
            });
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Persistence(format!("unexpected tensor '{extra}'")));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: UViTConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            config,
            params,
            index,
        }
    }

    pub fn config(&self) -> &UViTConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].tensor)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Noise prediction for a batch `x_t: [B, H, W, C]`.
    pub fn forward(&self, x_t: &Tensor, t: &[usize], cond: &[ConditionInput]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let (out, _) = self.forward_graph(&mut g, x, t, cond, false, &mut ForwardHooks::default())?;
        Ok(g.value(out).clone())
    }

    /// Forward with structural test hooks; returns the output and the hooks.
    pub fn forward_with_hooks(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &[ConditionInput],
        mut hooks: ForwardHooks,
    ) -> Result<(Tensor, ForwardHooks)> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let (out, _) = self.forward_graph(&mut g, x, t, cond, false, &mut hooks)?;
        Ok((g.value(out).clone(), hooks))
    }

    /// The sinusoidal step embedding passed through the learned time map.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let d = self.config.hidden_size;
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_vec(&[1, d], sinusoidal_embedding(t as f64, d)?)?);
        let w = g.frozen(&self.params[self.index["time_embed.weight"]].tensor);
        let b = g.frozen(&self.params[self.index["time_embed.bias"]].tensor);
        let out = g.linear(e, w, Some(b))?;
        g.value(out).clone().reshape(&[d])
    }

    /// Token vectors a single condition contributes, as `[n, D]`.
    pub fn embed_condition(&self, c: &ConditionInput) -> Result<Tensor> {
        let d = self.config.hidden_size;
        self.check_condition(c)?;
        let p = |name: &str| &self.params[self.index[name]].tensor;
        match (self.config.condition, c) {
            (ConditionKind::None, _) => Ok(Tensor::zeros(&[0, d])),
            (ConditionKind::Class { num_classes }, _) => {
                let row = match c {
                    ConditionInput::Class(k) => *k,
                    _ => num_classes,
                };
                let table = p("label_embed.weight");
                Tensor::from_vec(&[1, d], table.data()[row * d..(row + 1) * d].to_vec())
            }
            (ConditionKind::Context { .. }, ConditionInput::Context { embeddings, valid_len })
                if *valid_len > 0 =>
            {
                let mut g = Graph::new();
                let ctx = g.constant(embeddings.clone());
                let w = g.frozen(p("context_embed.weight"));
                let b = g.frozen(p("context_embed.bias"));
                let proj = g.linear(ctx, w, Some(b))?;
                let rows = g.slice(proj, 0, 0, *valid_len)?;
                Ok(g.value(rows).clone())
            }
            (ConditionKind::Context { .. }, _) => p("context_null").clone().reshape(&[1, d]),
        }
    }

    fn check_condition(&self, c: &ConditionInput) -> Result<()> {
        let bad = |m: String| Err(Error::Conditioning(m));
        match (self.config.condition, c) {
            (ConditionKind::None, ConditionInput::Unconditional) => Ok(()),
            (ConditionKind::Class { num_classes }, ConditionInput::Class(k)) => {
                if *k >= num_classes {
                    bad(format!("class {k} outside 0..{num_classes}"))
                } else {
                    Ok(())
                }
            }
            (ConditionKind::Class { .. }, ConditionInput::Null) => Ok(()),
            (ConditionKind::Context { .. }, ConditionInput::Null) => Ok(()),
            (
                ConditionKind::Context {
                    context_dim,
                    max_len,
                },
                ConditionInput::Context { embeddings, .. },
            ) => {
                if embeddings.shape() != [max_len, context_dim] {
                    bad(format!(
                        "context must be [{max_len}, {context_dim}], got {:?}",
                        embeddings.shape()
                    ))
                } else {
                    Ok(())
                }
            }
            (kind, c) => bad(format!("condition {c:?} incompatible with condition kind {kind}")),
        }
    }

    fn sinusoidal_positions(&self) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let (gh, gw) = cfg.grid();
        let extra = cfg.extra_tokens();
        let mut data = vec![0.0; cfg.seq_len() * d];
        for i in 0..gh {
            for j in 0..gw {
                let row = (extra + i * gw + j) * d;
                data[row..row + d / 2].copy_from_slice(&sinusoidal_embedding(i as f64, d / 2)?);
                data[row + d / 2..row + d].copy_from_slice(&sinusoidal_embedding(j as f64, d / 2)?);
            }
        }
        Tensor::from_vec(&[cfg.seq_len(), d], data)
    }

    /// Records the forward pass on `g`. With `trainable`, parameters become
    /// differentiable leaves whose handles are returned.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        t: &[usize],
        cond: &[ConditionInput],
        trainable: bool,
        hooks: &mut ForwardHooks,
    ) -> Result<(Var, ParamVars)> {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let (h, w, c) = (cfg.image_height, cfg.image_width, cfg.channels);
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::Shape(format!(
                "expected input [B, {h}, {w}, {c}], got {shape:?}"
            )));
        }
        let b = shape[0];
        if t.len() != b || cond.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} images with {} steps and {} conditions",
                t.len(),
                cond.len()
            )));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > cfg.diffusion_steps) {
            return Err(Error::Index(format!(
                "step {bad} outside 1..={}",
                cfg.diffusion_steps
            )));
        }
        for ci in cond {
            self.check_condition(ci)?;
        }

        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.tensor)
                } else {
                    g.frozen(&p.tensor)
                }
            })
            .collect();
        let pv = |name: &str| -> Var { vars[self.index[name]] };
        let opt = |name: &str| -> Option<Var> { self.index.get(name).map(|&i| vars[i]) };

        let n = cfg.num_patches();
        let (gh, gw) = cfg.grid();

        // Patch tokens.
        let patches = g.patchify(x, cfg.patch_size)?;
        let patch_tokens = match cfg.patch_embed_mode {
            PatchEmbedMode::Linear => {
                g.linear(patches, pv("patch_embed.weight"), Some(pv("patch_embed.bias")))?
            }
            PatchEmbedMode::ConvStack => {
                let grid = g.reshape(patches, &[b, gh, gw, cfg.patch_dim()])?;
                let c1 = g.conv2d(
                    grid,
                    pv("patch_embed.conv1.weight"),
                    Some(pv("patch_embed.conv1.bias")),
                )?;
                let a1 = g.gelu(c1);
                let c2 = g.conv2d(
                    a1,
                    pv("patch_embed.conv2.weight"),
                    Some(pv("patch_embed.conv2.bias")),
                )?;
                let a2 = g.gelu(c2);
                let p = g.conv2d(
                    a2,
                    pv("patch_embed.proj.weight"),
                    Some(pv("patch_embed.proj.bias")),
                )?;
                g.reshape(p, &[b, n, d])?
            }
        };

        // Time embedding: a token, or the AdaLN input.
        let mut sin = Vec::with_capacity(b * d);
        for &s in t {
            sin.extend(sinusoidal_embedding(s as f64, d)?);
        }
        let sin = g.constant(Tensor::from_vec(&[b, d], sin)?);
        let t_emb = g.linear(sin, pv("time_embed.weight"), Some(pv("time_embed.bias")))?;

        let mut seq = Vec::new();
        if cfg.time_mode == TimeMode::Token {
            seq.push(g.reshape(t_emb, &[b, 1, d])?);
        }

        let mut key_mask: Option<Vec<bool>> = None;
        match cfg.condition {
            ConditionKind::None => {}
            ConditionKind::Class { num_classes } => {
                let idx: Vec<usize> = cond
                    .iter()
                    .map(|c| match c {
                        ConditionInput::Class(k) => *k,
                        _ => num_classes,
                    })
                    .collect();
                let rows = g.gather(pv("label_embed.weight"), &idx)?;
                seq.push(g.reshape(rows, &[b, 1, d])?);
            }
            ConditionKind::Context {
                context_dim,
                max_len,
            } => {
                let mut ctx = vec![0.0; b * max_len * context_dim];
                let mut null_rows = Vec::new();
                let mut mask = vec![true; b * cfg.seq_len()];
                let offset = usize::from(cfg.time_mode == TimeMode::Token);
                for (bi, ci) in cond.iter().enumerate() {
                    let valid = match ci {
                        ConditionInput::Context {
                            embeddings,
                            valid_len,
                        } if *valid_len > 0 => {
                            let dst = bi * max_len * context_dim;
                            ctx[dst..dst + embeddings.len()].copy_from_slice(embeddings.data());
                            *valid_len
                        }
                        _ => {
                            null_rows.push(bi * max_len);
                            1
                        }
                    };
                    for p in valid..max_len {
                        mask[bi * cfg.seq_len() + offset + p] = false;
                    }
                }
                let ctx = g.constant(Tensor::from_vec(&[b, max_len, context_dim], ctx)?);
                let mut tokens =
                    g.linear(ctx, pv("context_embed.weight"), Some(pv("context_embed.bias")))?;
                if !null_rows.is_empty() {
                    tokens = g.replace_rows(tokens, pv("context_null"), &null_rows)?;
                }
                seq.push(tokens);
                if mask.iter().any(|m| !m) {
                    key_mask = Some(mask);
                }
            }
        }
        seq.push(patch_tokens);
        let mut hcur = if seq.len() == 1 {
            seq[0]
        } else {
            g.concat(&seq, 1)?
        };

        match cfg.pos_embed_mode {
            PosEmbedMode::Learnable1d => hcur = g.add_broadcast(hcur, pv("pos_embed"))?,
            PosEmbedMode::Sinusoidal2d => {
                let pos = g.constant(self.sinusoidal_positions()?);
                hcur = g.add_broadcast(hcur, pos)?;
            }
            PosEmbedMode::None => {}
        }

        let ada_emb = (cfg.time_mode == TimeMode::AdaLn).then_some(t_emb);
        let mask = key_mask.as_deref();
        let k = cfg.half_depth();
        let prefixes = block_prefixes(cfg);
        let mut skips: Vec<Var> = Vec::with_capacity(k);

        for (layer, prefix) in prefixes.iter().enumerate() {
            if layer > k {
                let hs = skips.pop().ok_or_else(|| Error::Logic("skip stack underflow".into()))?;
                if let Some(tr) = hooks.trace.as_mut() {
                    tr.decoder_main.push(g.value(hcur).clone());
                    tr.decoder_skip.push(g.value(hs).clone());
                }
                if cfg.skip_mode != SkipMode::None {
                    hcur = combine_skip_graph(
                        g,
                        hcur,
                        hs,
                        cfg.skip_mode,
                        opt(&format!("{prefix}.skip.weight")),
                        opt(&format!("{prefix}.skip.bias")),
                    )?;
                }
                if let Some(tr) = hooks.trace.as_mut() {
                    tr.decoder_inputs.push(g.value(hcur).clone());
                }
            }
            hcur = match hooks.blocks {
                BlockOverride::None => self.block(g, hcur, prefix, &pv, ada_emb, mask)?,
                BlockOverride::Identity => hcur,
                BlockOverride::AddLayerIndex => {
                    let bump = g.constant(Tensor::full(&[d], (layer + 1) as f64));
                    g.add_broadcast(hcur, bump)?
                }
            };
            if layer < k {
                skips.push(hcur);
                if let Some(tr) = hooks.trace.as_mut() {
                    tr.encoder_outputs.push(g.value(hcur).clone());
                }
            }
        }

        let normed = g.layer_norm(hcur, Some(pv("final_norm.weight")), Some(pv("final_norm.bias")))?;
        let mut tokens = g.slice(normed, 1, cfg.extra_tokens(), n)?;
        if cfg.conv_mode == ConvMode::BeforeLinear {
            let fmap = g.reshape(tokens, &[b, gh, gw, d])?;
            let conv = g.conv2d(fmap, pv("conv_out.weight"), Some(pv("conv_out.bias")))?;
            tokens = g.reshape(conv, &[b, n, d])?;
        }
        let head = g.linear(tokens, pv("head.weight"), Some(pv("head.bias")))?;
        let mut out = g.unpatchify(head, cfg.patch_size, h, w, c)?;
        if cfg.conv_mode == ConvMode::AfterLinear {
            out = g.conv2d(out, pv("conv_out.weight"), Some(pv("conv_out.bias")))?;
        }
        Ok((out, ParamVars { vars }))
    }

    fn block<'p>(
        &self,
        g: &mut Graph<'p>,
        x: Var,
        prefix: &str,
        pv: &impl Fn(&str) -> Var,
        ada_emb: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let heads = self.config.num_heads;
        let norm = |g: &mut Graph<'p>, x: Var, which: usize| -> Result<Var> {
            match ada_emb {
                Some(e) => ada_ln_graph(
                    g,
                    x,
                    e,
                    pv(&format!("{prefix}.ada{which}.weight")),
                    pv(&format!("{prefix}.ada{which}.bias")),
                ),
                None => g.layer_norm(
                    x,
                    Some(pv(&format!("{prefix}.norm{which}.weight"))),
                    Some(pv(&format!("{prefix}.norm{which}.bias"))),
                ),
            }
        };
        let a = norm(g, x, 1)?;
        let qkv = g.linear(
            a,
            pv(&format!("{prefix}.attn.qkv.weight")),
            Some(pv(&format!("{prefix}.attn.qkv.bias"))),
        )?;
        let att = g.attention(qkv, heads, mask)?;
        let proj = g.linear(
            att,
            pv(&format!("{prefix}.attn.proj.weight")),
            Some(pv(&format!("{prefix}.attn.proj.bias"))),
        )?;
        let x = g.add(x, proj)?;
        let a = norm(g, x, 2)?;
        let h1 = g.linear(
            a,
            pv(&format!("{prefix}.mlp.fc1.weight")),
            Some(pv(&format!("{prefix}.mlp.fc1.bias"))),
        )?;
        let h1 = g.gelu(h1);
        let h2 = g.linear(
            h1,
            pv(&format!("{prefix}.mlp.fc2.weight")),
            Some(pv(&format!("{prefix}.mlp.fc2.bias"))),
        )?;
        g.add(x, h2)
    }
}

/// Merges the main branch `hm` with the skip branch `hs`.
pub fn combine_skip_graph(
    g: &mut Graph<'_>,
    hm: Var,
    hs: Var,
    mode: SkipMode,
    weight: Option<Var>,
    bias: Option<Var>,
) -> Result<Var> {
    if g.shape(hm) != g.shape(hs) {
        return Err(Error::Shape(format!(
            "skip branches differ: {:?} vs {:?}",
            g.shape(hm),
            g.shape(hs)
        )));
    }
    let need_w = || weight.ok_or_else(|| Error::Parameter(format!("skip mode {mode} needs a weight")));
    match mode {
        SkipMode::ConcatLinear => {
            let axis = g.shape(hm).len() - 1;
            let cat = g.concat(&[hm, hs], axis)?;
            g.linear(cat, need_w()?, bias)
        }
        SkipMode::Add => g.add(hm, hs),
        SkipMode::LinearAdd => {
            let l = g.linear(hs, need_w()?, bias)?;
            g.add(hm, l)
        }
        SkipMode::AddLinear => {
            let s = g.add(hm, hs)?;
            g.linear(s, need_w()?, bias)
        }
        SkipMode::None => Err(Error::Logic(
            "skip mode none has no combine; the caller must skip it".into(),
        )),
    }
}

/// `y_s · LayerNorm(h) + y_b` where `[y_s | y_b] = t_emb @ weight + bias`.
pub fn ada_ln_graph(g: &mut Graph<'_>, h: Var, t_emb: Var, weight: Var, bias: Var) -> Result<Var> {
    let d = g.value(h).last_dim();
    let y = g.linear(t_emb, weight, Some(bias))?;
    if g.value(y).last_dim() != 2 * d {
        return Err(Error::Shape(format!(
            "AdaLN projection gives {} features, need {}",
            g.value(y).last_dim(),
            2 * d
        )));
    }
    let ys = g.slice(y, 1, 0, d)?;
    let yb = g.slice(y, 1, d, d)?;
    let ln = g.layer_norm(h, None, None)?;
    g.modulate(ln, ys, yb)
}

/// Tensor-level skip combine for `[L, D]` or `[B, L, D]` inputs.
pub fn combine_skip(
    hm: &Tensor,
    hs: &Tensor,
    mode: SkipMode,
    weight: Option<&Tensor>,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(hm.clone());
    let b = g.constant(hs.clone());
    let w = weight.map(|w| g.constant(w.clone()));
    let bb = bias.map(|b| g.constant(b.clone()));
    let out = combine_skip_graph(&mut g, a, b, mode, w, bb)?;
    Ok(g.value(out).clone())
}

/// Tensor-level AdaLN for `h: [L, D]` and `t_emb: [Dt]`; `weight: [Dt, 2D]`.
pub fn ada_layer_norm(h: &Tensor, t_emb: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[l, d] = h.shape() else {
        return Err(Error::Shape(format!("AdaLN expects [L, D], got {:?}", h.shape())));
    };
    let dt = t_emb.len();
    if weight.shape() != [dt, 2 * d] || bias.shape() != [2 * d] {
        return Err(Error::Shape(format!(
            "AdaLN projection must be [{dt}, {}] + [{}], got {:?} + {:?}",
            2 * d,
            2 * d,
            weight.shape(),
            bias.shape()
        )));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone().reshape(&[1, l, d])?);
    let tv = g.constant(t_emb.clone().reshape(&[1, dt])?);
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let out = ada_ln_graph(&mut g, hv, tv, w, b)?;
    g.value(out).clone().reshape(&[l, d])
}

#[cfg(test)]
mod tests;
