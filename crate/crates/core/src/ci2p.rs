//! Codec-based patch embedding.
//!
//! The frozen codec encoder turns `[3, H, W]` into `[M, H/16, W/16]`; a
//! stride-2 inverted residual unit (PatchReshape) then halves the grid and
//! quadruples the channels, and the map is flattened into tokens. The
//! dual-scale variant tokenizes the raw latent and applies the same kind of
//! unit (CnnReshape) between transformer blocks.
//!
//! Flattening is row-major over `(row, col)`: token `r * cols + c` holds the
//! channel vector at grid position `(r, c)`.

use crate::codec::{self, CodecModel, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::tensor::{init, Activation, ParamStore, Real, Rng, Tape, Tensor, Var};

/// Parameter prefix of the frozen encoder inside a classifier store.
pub const ENCODER_PREFIX: &str = "ci2p.encoder.";
/// Parameter prefix of PatchReshape inside a classifier store.
pub const PATCH_RESHAPE_PREFIX: &str = "ci2p.reshape.";
/// Parameter prefix of the mid-network CnnReshape unit.
pub const CNN_RESHAPE_PREFIX: &str = "cnn_reshape.";

/// Default channel expansion of the inverted residual hidden layer.
pub const DEFAULT_EXPANSION: usize = 4;

/// `1×1 expand → relu6 → 3×3 depthwise (stride, pad 1) → relu6 → 1×1 project`.
///
/// The hidden width is `in_channels * expansion`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvertedResidualSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
}

impl InvertedResidualSpec {
    /// The reshape unit used by both CI2P variants: stride 2, 4× channels.
    pub fn reshape(in_channels: usize, expansion: usize) -> Self {
        Self {
            in_channels,
            out_channels: 4 * in_channels,
            stride: 2,
            expansion,
        }
    }

    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 || self.expansion == 0
        {
            return Err(Error::Config(format!("invalid inverted residual unit {self:?}")));
        }
        Ok(())
    }

    /// Output grid for an `h × w` input (3×3 depthwise, pad 1).
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (i, m, o) = (self.in_channels, self.hidden(), self.out_channels);
        vec![
            ("expand.weight", vec![m, i, 1, 1]),
            ("expand.bias", vec![m]),
            ("dw.weight", vec![m, 1, 3, 3]),
            ("dw.bias", vec![m]),
            ("project.weight", vec![o, m, 1, 1]),
            ("project.bias", vec![o]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulates for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        let (i, m, o) = (self.in_channels as u64, self.hidden() as u64, self.out_channels as u64);
        let (hw, out) = ((h * w) as u64, (ho * wo) as u64);
        i * m * hw + 9 * m * out + m * o * out
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Result<()> {
        self.validate()?;
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1] * shape[2] * shape[3];
                init::kaiming_uniform(&shape, fan_in, rng)
            };
            store.insert(format!("{prefix}{name}"), t, false)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let c = tape.shape(x)[0];
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "inverted residual expects {} channels, got {:?}",
                self.in_channels,
                tape.shape(x)
            )));
        }
        let mut p = |n: &str| tape.param(store, &format!("{prefix}{n}"));
        let (ew, eb) = (p("expand.weight")?, p("expand.bias")?);
        let (dw, db) = (p("dw.weight")?, p("dw.bias")?);
        let (pw, pb) = (p("project.weight")?, p("project.bias")?);
        let h = tape.conv2d(x, ew, Some(eb), 1, 0, 1)?;
        let h = tape.activation(h, Activation::Relu6);
        let h = tape.conv2d(h, dw, Some(db), self.stride, 1, self.hidden())?;
        let h = tape.activation(h, Activation::Relu6);
        let out = tape.conv2d(h, pw, Some(pb), 1, 0, 1)?;
        if self.has_residual() {
            tape.add(out, x)
        } else {
            Ok(out)
        }
    }
}

/// Flattened token sequence plus the grid it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `[rows * cols, D]`.
    pub tokens: Tensor<T>,
    pub grid: (usize, usize),
}

impl<T: Real> TokenSequence<T> {
    /// `[D, rows, cols]` → `[rows * cols, D]`.
    pub fn flatten(map: &Tensor<T>) -> Result<Self> {
        let (d, rows, cols) = map.dims3()?;
        let n = rows * cols;
        let src = map.data();
        let tokens = Tensor::from_fn(&[n, d], |i| src[(i % d) * n + i / d]);
        Ok(Self {
            tokens,
            grid: (rows, cols),
        })
    }

    /// Inverse of [`TokenSequence::flatten`].
    pub fn unflatten(&self) -> Result<Tensor<T>> {
        let (n, d) = self.tokens.dims2()?;
        let (rows, cols) = self.grid;
        if rows * cols != n {
            return Err(Error::dim(format!(
                "{n} tokens do not fill a {rows}x{cols} grid"
            )));
        }
        let src = self.tokens.data();
        Ok(Tensor::from_fn(&[d, rows, cols], |i| src[(i % n) * d + i / n]))
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Tape version of [`TokenSequence::flatten`]; returns the token var and grid.
pub fn flatten_on<T: Real>(tape: &mut Tape<T>, map: Var) -> Result<(Var, (usize, usize))> {
    let (d, rows, cols) = tape.value(map).dims3()?;
    let flat = tape.reshape(map, &[d, rows * cols])?;
    Ok((tape.transpose(flat)?, (rows, cols)))
}

/// Tape version of [`TokenSequence::unflatten`].
pub fn unflatten_on<T: Real>(tape: &mut Tape<T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let (n, d) = tape.value(tokens).dims2()?;
    if grid.0 * grid.1 != n {
        return Err(Error::dim(format!(
            "{n} tokens do not fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[d, grid.0, grid.1])
}

fn check_even(what: &str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "{what} needs an even grid, got {h}x{w}"
        )));
    }
    Ok(())
}

/// PatchReshape: `[C, h, w]` → `[4C, h/2, w/2]`.
pub fn patch_reshape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &InvertedResidualSpec,
    latent: Var,
) -> Result<Var> {
    let (_, h, w) = tape.value(latent).dims3()?;
    check_even("patch reshape", h, w)?;
    spec.forward(tape, store, prefix, latent)
}

/// CnnReshape on a token sequence: unflatten, PatchReshape-style unit,
/// flatten. `N` tokens at `C` become `N/4` tokens at `4C`.
pub fn cnn_reshape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &InvertedResidualSpec,
    tokens: Var,
    grid: (usize, usize),
) -> Result<(Var, (usize, usize))> {
    check_even("cnn reshape", grid.0, grid.1)?;
    let map = unflatten_on(tape, tokens, grid)?;
    let out = spec.forward(tape, store, prefix, map)?;
    flatten_on(tape, out)
}

/// Copies a codec's encoder weights into `store` under `prefix`.
pub fn install_encoder<T: Real>(
    store: &mut ParamStore<T>,
    codec: &CodecModel<T>,
    prefix: &str,
    frozen: bool,
) -> Result<()> {
    for (name, _) in codec::encoder_param_shapes(codec.hidden(), codec.latent()) {
        let value = codec
            .params
            .value(&format!("encoder.{name}"))
            .expect("codec encoder parameter")
            .clone();
        store.insert(format!("{prefix}{name}"), value, frozen)?;
    }
    Ok(())
}

/// Full CI2P embedding on the tape: encoder (bound from `store` under
/// [`ENCODER_PREFIX`]), PatchReshape, flatten. `H` and `W` must be
/// multiples of 32.
pub fn ci2p_tokens<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    spec: &InvertedResidualSpec,
    x: Var,
) -> Result<(Var, (usize, usize))> {
    codec::check_image_shape(tape.shape(x), 2 * DOWNSAMPLE)?;
    let y = codec::encoder_forward(tape, store, ENCODER_PREFIX, x)?;
    let z = patch_reshape(tape, store, PATCH_RESHAPE_PREFIX, spec, y)?;
    flatten_on(tape, z)
}

/// Dual-scale embedding on the tape: encoder then flatten, no reshape.
pub fn ci2p_tokens_ds<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
) -> Result<(Var, (usize, usize))> {
    let y = codec::encoder_forward(tape, store, ENCODER_PREFIX, x)?;
    flatten_on(tape, y)
}

/// Value-level [`ci2p_tokens`]. `reshape_params` holds the unit under
/// [`PATCH_RESHAPE_PREFIX`]; the codec encoder is bound frozen.
pub fn ci2p_forward<T: Real>(
    codec: &CodecModel<T>,
    reshape_params: &ParamStore<T>,
    spec: &InvertedResidualSpec,
    x: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let mut store = reshape_params.clone();
    install_encoder(&mut store, codec, ENCODER_PREFIX, true)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (t, grid) = ci2p_tokens(&mut tape, &store, spec, xv)?;
    Ok(TokenSequence {
        tokens: tape.value(t).clone(),
        grid,
    })
}

/// Value-level [`ci2p_tokens_ds`].
pub fn ci2p_forward_ds<T: Real>(codec: &CodecModel<T>, x: &Tensor<T>) -> Result<TokenSequence<T>> {
    let mut store = ParamStore::new();
    install_encoder(&mut store, codec, ENCODER_PREFIX, true)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (t, grid) = ci2p_tokens_ds(&mut tape, &store, xv)?;
    Ok(TokenSequence {
        tokens: tape.value(t).clone(),
        grid,
    })
}
