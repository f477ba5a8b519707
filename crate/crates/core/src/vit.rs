//! Transformer backbone and the three classifier variants.
//!
//! All variants share pre-norm blocks (`x + MSA(LN(x))`, then
//! `x + MLP(LN(x))` with GELU), learned positional embeddings added once
//! after embedding, global average pooling over tokens and a linear head.
//! There is no class token and no dropout.

use std::fmt;
use std::str::FromStr;

use crate::ci2p::{self, InvertedResidualSpec, CNN_RESHAPE_PREFIX, ENCODER_PREFIX};
use crate::codec::{self, CodecModel};
use crate::error::{Error, Result};
use crate::tensor::{init, Activation, Exec, ParamStore, Real, Rng, Tape, Tensor, Var};

/// Patch size of the baseline patchify embedding.
pub const PATCH: usize = 16;

pub const LN_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    VitB16,
    Ci2pVit,
    Ci2pVitDs,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::VitB16, Variant::Ci2pVit, Variant::Ci2pVitDs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VitB16 => "vit_b16",
            Variant::Ci2pVit => "ci2p_vit",
            Variant::Ci2pVitDs => "ci2p_vit_ds",
        }
    }

    pub fn uses_codec(self) -> bool {
        self != Variant::VitB16
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected vit_b16, ci2p_vit or ci2p_vit_ds)"
                ))
            })
    }
}

/// Declarative architecture description shared by the runtime builder and
/// the FLOPs analyzer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDesc {
    pub variant: Variant,
    pub image_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Token width of the first stage of the dual-scale variant.
    pub ds_early_dim: usize,
    /// Number of blocks before CnnReshape in the dual-scale variant.
    pub ds_split: usize,
    pub num_classes: usize,
    pub use_pos_embed: bool,
    /// Codec hidden width `N`.
    pub codec_hidden: usize,
    pub reshape_expansion: usize,
}

/// A run of blocks sharing token count and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub first_block: usize,
    pub blocks: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    pub mlp_hidden: usize,
}

impl Stage {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

impl ModelDesc {
    /// Base-size defaults (depth 12, dim 768, 12 heads, MLP 3072).
    pub fn new(variant: Variant, image_size: usize, num_classes: usize) -> Self {
        Self {
            variant,
            image_size,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_hidden: 3072,
            ds_early_dim: 192,
            ds_split: 6,
            num_classes,
            use_pos_embed: true,
            codec_hidden: codec::DEFAULT_HIDDEN,
            reshape_expansion: ci2p::DEFAULT_EXPANSION,
        }
    }

    /// Small configuration for tests: `dim` must be a multiple of 4 so the
    /// codec latent (`dim / 4`) and the early dual-scale width line up.
    pub fn tiny(
        variant: Variant,
        image_size: usize,
        depth: usize,
        dim: usize,
        heads: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            variant,
            image_size,
            depth,
            dim,
            heads,
            mlp_hidden: 2 * dim,
            ds_early_dim: dim / 4,
            ds_split: depth / 2,
            num_classes,
            use_pos_embed: true,
            codec_hidden: 8,
            reshape_expansion: 2,
        }
    }

    /// Latent channels the codec must produce for this variant.
    pub fn codec_latent(&self) -> usize {
        match self.variant {
            Variant::VitB16 => 0,
            Variant::Ci2pVit => self.dim / 4,
            Variant::Ci2pVitDs => self.ds_early_dim,
        }
    }

    /// MLP width of the early dual-scale blocks, scaled with the token width.
    pub fn early_mlp_hidden(&self) -> usize {
        self.mlp_hidden * self.ds_early_dim / self.dim
    }

    /// Spatial granularity `image_size` must respect.
    pub fn size_multiple(&self) -> usize {
        match self.variant {
            Variant::VitB16 => PATCH,
            _ => 2 * codec::DOWNSAMPLE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return bad("depth, dim, heads and mlp_hidden must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        let m = self.size_multiple();
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return bad(format!(
                "image_size {} must be a positive multiple of {m} for {}",
                self.image_size, self.variant
            ));
        }
        match self.variant {
            Variant::VitB16 => {}
            Variant::Ci2pVit => {
                if !self.dim.is_multiple_of(4) {
                    return bad(format!("ci2p_vit needs dim divisible by 4, got {}", self.dim));
                }
            }
            Variant::Ci2pVitDs => {
                if self.ds_split >= self.depth {
                    return bad(format!(
                        "ds_split {} must be below depth {}",
                        self.ds_split, self.depth
                    ));
                }
                if self.ds_early_dim * 4 != self.dim {
                    return bad(format!(
                        "ds_early_dim {} must be dim/4 ({})",
                        self.ds_early_dim,
                        self.dim / 4
                    ));
                }
                if !self.ds_early_dim.is_multiple_of(self.heads) || self.early_mlp_hidden() == 0 {
                    return bad(format!(
                        "ds_early_dim {} must be divisible by heads {}",
                        self.ds_early_dim, self.heads
                    ));
                }
            }
        }
        if self.variant.uses_codec() && (self.codec_hidden == 0 || self.reshape_expansion == 0) {
            return bad("codec_hidden and reshape_expansion must be positive".into());
        }
        Ok(())
    }

    /// Block stages for a given input size.
    pub fn stages(&self, image_size: usize) -> Vec<Stage> {
        let stage = |first_block, blocks, side: usize, dim, mlp_hidden| Stage {
            first_block,
            blocks,
            grid: (side, side),
            dim,
            mlp_hidden,
        };
        match self.variant {
            Variant::VitB16 => vec![stage(0, self.depth, image_size / PATCH, self.dim, self.mlp_hidden)],
            Variant::Ci2pVit => vec![stage(0, self.depth, image_size / 32, self.dim, self.mlp_hidden)],
            Variant::Ci2pVitDs => vec![
                stage(0, self.ds_split, image_size / 16, self.ds_early_dim, self.early_mlp_hidden()),
                stage(
                    self.ds_split,
                    self.depth - self.ds_split,
                    image_size / 32,
                    self.dim,
                    self.mlp_hidden,
                ),
            ],
        }
    }

    pub fn patch_reshape_spec(&self) -> Option<InvertedResidualSpec> {
        (self.variant == Variant::Ci2pVit)
            .then(|| InvertedResidualSpec::reshape(self.dim / 4, self.reshape_expansion))
    }

    pub fn cnn_reshape_spec(&self) -> Option<InvertedResidualSpec> {
        (self.variant == Variant::Ci2pVitDs)
            .then(|| InvertedResidualSpec::reshape(self.ds_early_dim, self.reshape_expansion))
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.kv_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("image_size", self.image_size.to_string()),
            ("depth", self.depth.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("ds_early_dim", self.ds_early_dim.to_string()),
            ("ds_split", self.ds_split.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("use_pos_embed", self.use_pos_embed.to_string()),
            ("codec_hidden", self.codec_hidden.to_string()),
            ("reshape_expansion", self.reshape_expansion.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that
    /// are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: '{v}' is not a non-negative integer")))
        }
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "image_size" => self.image_size = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_hidden" => self.mlp_hidden = num(key, value)?,
            "ds_early_dim" => self.ds_early_dim = num(key, value)?,
            "ds_split" => self.ds_split = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "codec_hidden" => self.codec_hidden = num(key, value)?,
            "reshape_expansion" => self.reshape_expansion = num(key, value)?,
            "use_pos_embed" => {
                self.use_pos_embed = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("use_pos_embed: '{value}' is not a boolean")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the output of [`ModelDesc::to_kv`]. Every field is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut desc = ModelDesc::new(Variant::VitB16, 0, 0);
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            if !desc.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown model key '{}'", k.trim())));
            }
            seen.push(k.trim().to_string());
        }
        for (k, _) in desc.kv_pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("model description is missing '{k}'")));
            }
        }
        desc.validate()?;
        Ok(desc)
    }
}

fn block_shapes(i: usize, d: usize, hid: usize) -> Vec<(String, Vec<usize>)> {
    let p = format!("blocks.{i}.");
    [
        ("norm1.gamma", vec![d]),
        ("norm1.beta", vec![d]),
        ("attn.qkv.weight", vec![d, 3 * d]),
        ("attn.qkv.bias", vec![3 * d]),
        ("attn.proj.weight", vec![d, d]),
        ("attn.proj.bias", vec![d]),
        ("norm2.gamma", vec![d]),
        ("norm2.beta", vec![d]),
        ("mlp.fc1.weight", vec![d, hid]),
        ("mlp.fc1.bias", vec![hid]),
        ("mlp.fc2.weight", vec![hid, d]),
        ("mlp.fc2.bias", vec![d]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{p}{n}"), s))
    .collect()
}

fn init_linear_like<T: Real>(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    if name.ends_with(".bias") || name.ends_with(".beta") {
        Tensor::zeros(shape)
    } else if name.ends_with(".gamma") {
        Tensor::ones(shape)
    } else {
        init::trunc_normal(shape, INIT_STD, rng)
    }
}

/// Multi-head self-attention on `x: [N, D]` with parameters
/// `{prefix}qkv.weight [D, 3D]`, `{prefix}qkv.bias`, `{prefix}proj.weight
/// [D, D]`, `{prefix}proj.bias`. Head `h` uses columns `h·d..(h+1)·d` of
/// each of the q, k and v thirds, with `d = D / heads` and scale `1/√d`.
pub fn msa_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (_, dim) = tape.value(x).dims2()?;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {dim} is not divisible by {heads} heads"
        )));
    }
    let hd = dim / heads;
    let wqkv = tape.param(store, &format!("{prefix}qkv.weight"))?;
    let bqkv = tape.param(store, &format!("{prefix}qkv.bias"))?;
    let wo = tape.param(store, &format!("{prefix}proj.weight"))?;
    let bo = tape.param(store, &format!("{prefix}proj.bias"))?;
    let qkv = tape.matmul(x, wqkv)?;
    let qkv = tape.add_row(qkv, bqkv)?;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * hd, hd)?;
        let k = tape.slice_cols(qkv, dim + h * hd, hd)?;
        let v = tape.slice_cols(qkv, 2 * dim + h * hd, hd)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let y = tape.matmul(cat, wo)?;
    tape.add_row(y, bo)
}

fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layernorm<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.layernorm(x, g, b, LN_EPS)
}

/// One pre-norm transformer block stored under `blocks.{index}.`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub index: usize,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = format!("blocks.{}", self.index);
        let h = layernorm(tape, store, &format!("{p}.norm1"), x)?;
        let h = msa_forward(tape, store, &format!("{p}.attn."), h, self.heads)?;
        let x = tape.add(x, h)?;
        let h = layernorm(tape, store, &format!("{p}.norm2"), x)?;
        let h = linear(tape, store, &format!("{p}.mlp.fc1"), h)?;
        let h = tape.activation(h, Activation::Gelu);
        let h = linear(tape, store, &format!("{p}.mlp.fc2"), h)?;
        tape.add(x, h)
    }
}

/// A built classifier. Parameters live in a separate [`ParamStore`] so the
/// same model can run in `f32` or `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    desc: ModelDesc,
}

/// Every parameter of a model except the codec encoder, in registration
/// order.
pub fn param_shapes(desc: &ModelDesc) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    let stages = desc.stages(desc.image_size);
    if desc.variant == Variant::VitB16 {
        v.push(("patch_embed.weight".into(), vec![desc.dim, 3, PATCH, PATCH]));
        v.push(("patch_embed.bias".into(), vec![desc.dim]));
    }
    let reshape = |prefix: &str, spec: InvertedResidualSpec, v: &mut Vec<(String, Vec<usize>)>| {
        for (n, s) in spec.param_shapes() {
            v.push((format!("{prefix}{n}"), s));
        }
    };
    if let Some(spec) = desc.patch_reshape_spec() {
        reshape(ci2p::PATCH_RESHAPE_PREFIX, spec, &mut v);
    }
    if desc.use_pos_embed {
        v.push(("pos_embed".into(), vec![stages[0].tokens(), stages[0].dim]));
    }
    for (si, st) in stages.iter().enumerate() {
        if si == 1 {
            reshape(CNN_RESHAPE_PREFIX, desc.cnn_reshape_spec().expect("ds"), &mut v);
            if desc.use_pos_embed {
                v.push(("pos_embed2".into(), vec![st.tokens(), st.dim]));
            }
        }
        for b in st.first_block..st.first_block + st.blocks {
            v.extend(block_shapes(b, st.dim, st.mlp_hidden));
        }
    }
    v.push(("norm.gamma".into(), vec![desc.dim]));
    v.push(("norm.beta".into(), vec![desc.dim]));
    v.push(("head.weight".into(), vec![desc.dim, desc.num_classes]));
    v.push(("head.bias".into(), vec![desc.num_classes]));
    v
}

/// Builds a classifier and its parameters. CI2P variants copy the encoder
/// of `codec` in as frozen entries under `ci2p.encoder.`.
pub fn build_model<T: Real>(
    desc: &ModelDesc,
    codec: Option<&CodecModel<T>>,
    seed: u64,
) -> Result<(Classifier, ParamStore<T>)> {
    desc.validate()?;
    let mut store = ParamStore::new();
    if desc.variant.uses_codec() {
        let codec = codec.ok_or_else(|| {
            Error::Config(format!("{} needs a codec for its embedding", desc.variant))
        })?;
        if codec.latent() != desc.codec_latent() || codec.hidden() != desc.codec_hidden {
            return Err(Error::Config(format!(
                "{} with dim {} needs a codec with N={} and M={}, got N={} and M={}",
                desc.variant,
                desc.dim,
                desc.codec_hidden,
                desc.codec_latent(),
                codec.hidden(),
                codec.latent()
            )));
        }
        ci2p::install_encoder(&mut store, codec, ENCODER_PREFIX, true)?;
    }
    let mut rng = Rng::new(seed);
    for (name, shape) in param_shapes(desc) {
        let t = if name == "patch_embed.weight" {
            init::kaiming_uniform(&shape, 3 * PATCH * PATCH, &mut rng)
        } else if name.starts_with("ci2p.") || name.starts_with(CNN_RESHAPE_PREFIX) {
            if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                init::kaiming_uniform(&shape, shape[1] * shape[2] * shape[3], &mut rng)
            }
        } else {
            init_linear_like(&name, &shape, &mut rng)
        };
        store.insert(name, t, false)?;
    }
    Ok((Classifier { desc: desc.clone() }, store))
}

/// Rebuilds a classifier around a loaded parameter store. Every entry the
/// description implies (encoder included) must be present with the right
/// shape and nothing else may be; the encoder is re-frozen.
pub fn load_model<T: Real>(desc: &ModelDesc, mut store: ParamStore<T>) -> Result<(Classifier, ParamStore<T>)> {
    desc.validate()?;
    let mut expected = param_shapes(desc);
    if desc.variant.uses_codec() {
        for (n, s) in codec::encoder_param_shapes(desc.codec_hidden, desc.codec_latent()) {
            expected.push((format!("{ENCODER_PREFIX}{n}"), s));
        }
    }
    for (name, shape) in &expected {
        match store.value(name) {
            None => return Err(Error::CheckpointFormat(format!("missing parameter '{name}'"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::CheckpointFormat(format!(
                    "parameter '{name}' has shape {:?}, model expects {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if store.len() != expected.len() {
        let extra = store
            .names()
            .find(|n| !expected.iter().any(|(e, _)| e == n))
            .unwrap_or_default()
            .to_string();
        return Err(Error::CheckpointFormat(format!(
            "unexpected parameter '{extra}' for {}",
            desc.variant
        )));
    }
    if desc.variant.uses_codec() {
        store.freeze_prefix(ENCODER_PREFIX, true)?;
    }
    Ok((Classifier { desc: desc.clone() }, store))
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

impl Classifier {
    pub fn desc(&self) -> &ModelDesc {
        &self.desc
    }

    /// Embedding: image `[3, H, W]` to tokens and their grid, before
    /// positional embeddings.
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, (usize, usize))> {
        let s = self.desc.image_size;
        if tape.shape(x) != [3, s, s] {
            return Err(Error::dim(format!(
                "{} expects a [3, {s}, {s}] image, got {:?}",
                self.desc.variant,
                tape.shape(x)
            )));
        }
        match self.desc.variant {
            Variant::VitB16 => {
                let w = tape.param(store, "patch_embed.weight")?;
                let b = tape.param(store, "patch_embed.bias")?;
                let y = tape.conv2d(x, w, Some(b), PATCH, 0, 1)?;
                ci2p::flatten_on(tape, y)
            }
            Variant::Ci2pVit => {
                let spec = self.desc.patch_reshape_spec().expect("ci2p");
                ci2p::ci2p_tokens(tape, store, &spec, x)
            }
            Variant::Ci2pVitDs => ci2p::ci2p_tokens_ds(tape, store, x),
        }
    }

    /// Everything after embedding: positional embeddings (if enabled), the
    /// block stages with CnnReshape between them, final norm, average
    /// pooling and head. Returns logits `[num_classes]`.
    pub fn forward_tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        self.forward_tokens_traced(tape, store, tokens, grid, &mut |_, _| {})
    }

    /// [`Classifier::forward_tokens`] that reports the token shape entering
    /// each block as `(block index, [N, D])`.
    pub fn forward_tokens_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        grid: (usize, usize),
        trace: &mut dyn FnMut(usize, &[usize]),
    ) -> Result<Var> {
        let mut x = tokens;
        let mut grid = grid;
        let heads = self.desc.heads;
        if self.desc.use_pos_embed {
            let pos = tape.param(store, "pos_embed")?;
            x = tape.add(x, pos)?;
        }
        for (si, st) in self.desc.stages(self.desc.image_size).iter().enumerate() {
            if si == 1 {
                let spec = self.desc.cnn_reshape_spec().expect("ds");
                (x, grid) = ci2p::cnn_reshape(tape, store, CNN_RESHAPE_PREFIX, &spec, x, grid)?;
                if self.desc.use_pos_embed {
                    let pos = tape.param(store, "pos_embed2")?;
                    x = tape.add(x, pos)?;
                }
            }
            for index in st.first_block..st.first_block + st.blocks {
                trace(index, tape.shape(x));
                x = TransformerBlock { index, heads }.forward(tape, store, x)?;
            }
        }
        let x = layernorm(tape, store, "norm", x)?;
        let pooled = tape.mean_rows(x)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        let logits = linear(tape, store, "head", pooled)?;
        let c = self.desc.num_classes;
        tape.reshape(logits, &[c])
    }

    /// Logits var for an image var.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (t, grid) = self.embed(tape, store, x)?;
        self.forward_tokens(tape, store, t, grid)
    }

    /// Cross-entropy loss var for one labeled image.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        label: usize,
    ) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let logits = self.forward(tape, store, xv)?;
        cross_entropy(tape, logits, label)
    }

    /// Inference logits for one image.
    pub fn forward_classify<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_classify_with(Exec::default(), store, x)
    }

    fn forward_classify_with<T: Real>(
        &self,
        exec: Exec,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::with_exec(exec);
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, store, xv)?;
        let out = tape.value(logits).clone();
        if !out.is_finite() {
            return Err(Error::Numeric("classifier produced non-finite logits".into()));
        }
        Ok(out)
    }

    /// Logits for a batch; images are processed independently (in parallel
    /// under [`Exec::Parallel`]) and returned in input order.
    pub fn forward_batch<T: Real>(
        &self,
        exec: Exec,
        store: &ParamStore<T>,
        images: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        exec.map(images.len(), |i| {
            self.forward_classify_with(Exec::Sequential, store, &images[i])
        })
        .into_iter()
        .collect()
    }
}
