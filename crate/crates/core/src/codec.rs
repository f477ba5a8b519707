//! Rate–distortion convolutional autoencoder.
//!
//! Four 5×5 stride-2 convolutions with GDN take `[3, H, W]` to a latent
//! `[M, H/16, W/16]`; a mirrored stack of transposed convolutions with
//! inverse GDN maps it back. The latent is quantized (additive uniform noise
//! while training, rounding at evaluation), and its code length is estimated
//! under a per-channel discretized logistic density. Training minimizes
//! `λ·MSE + bpp`.
//!
//! No entropy coder is implemented: the rate is the analytic estimate.

use crate::error::{Error, Result};
use crate::tensor::{init, AdamConfig, Exec, ParamStore, Real, Rng, Tape, Tensor, Var};

pub use crate::tensor::{MIN_LOG_SCALE, PROB_FLOOR};

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 16;

pub const KERNEL: usize = 5;

/// Default hidden width `N`.
pub const DEFAULT_HIDDEN: usize = 128;

/// Default latent channels `M`.
pub const DEFAULT_LATENT: usize = 192;

/// Default rate–distortion weight for MSE on `[0, 1]` pixels: `0.01 · 255²`.
pub const DEFAULT_LAMBDA: f64 = 0.01 * 255.0 * 255.0;

const GDN_BETA_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    /// `ŷ = y + u`, `u ~ U(-0.5, 0.5)`; gradient passes unchanged.
    Train,
    /// `ŷ = round(y)`, half away from zero.
    Eval,
}

/// Encoder/decoder weights plus the factorized entropy model.
#[derive(Clone, Debug)]
pub struct CodecModel<T> {
    hidden: usize,
    latent: usize,
    pub params: ParamStore<T>,
}

/// One evaluation of the rate–distortion objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLossParts {
    pub d_mse: f64,
    pub r_bpp: f64,
    pub lambda: f64,
    /// Always `lambda * d_mse + r_bpp`.
    pub total: f64,
}

impl RdLossParts {
    pub fn new(d_mse: f64, r_bpp: f64, lambda: f64) -> Self {
        Self {
            d_mse,
            r_bpp,
            lambda,
            total: lambda * d_mse + r_bpp,
        }
    }
}

/// Names of the encoder parameters relative to the encoder prefix.
pub fn encoder_param_shapes(hidden: usize, latent: usize) -> Vec<(String, Vec<usize>)> {
    let k = KERNEL;
    let mut v = Vec::new();
    let chans = [3, hidden, hidden, hidden, latent];
    for i in 0..4 {
        v.push((format!("conv{}.weight", i + 1), vec![chans[i + 1], chans[i], k, k]));
        v.push((format!("conv{}.bias", i + 1), vec![chans[i + 1]]));
        if i < 3 {
            v.push((format!("gdn{}.beta", i + 1), vec![hidden]));
            v.push((format!("gdn{}.gamma", i + 1), vec![hidden, hidden]));
        }
    }
    v
}

fn decoder_param_shapes(hidden: usize, latent: usize) -> Vec<(String, Vec<usize>)> {
    let k = KERNEL;
    let mut v = Vec::new();
    let chans = [latent, hidden, hidden, hidden, 3];
    for i in 0..4 {
        v.push((format!("deconv{}.weight", i + 1), vec![chans[i], chans[i + 1], k, k]));
        v.push((format!("deconv{}.bias", i + 1), vec![chans[i + 1]]));
        if i < 3 {
            v.push((format!("igdn{}.beta", i + 1), vec![hidden]));
            v.push((format!("igdn{}.gamma", i + 1), vec![hidden, hidden]));
        }
    }
    v
}

fn init_param<T: Real>(name: &str, shape: &[usize], stride_sq: usize, rng: &mut Rng) -> Tensor<T> {
    if name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else if name.ends_with(".beta") {
        Tensor::ones(shape)
    } else if name.ends_with(".gamma") {
        let c = shape[0];
        Tensor::from_fn(shape, |i| if i / c == i % c { T::of(0.1) } else { T::zero() })
    } else {
        // conv weight [out, in, k, k] or transposed [in, out, k, k]
        let fan_in = if stride_sq == 1 {
            shape[1] * shape[2] * shape[3]
        } else {
            (shape[0] * shape[2] * shape[3] / stride_sq).max(1)
        };
        init::kaiming_uniform(shape, fan_in, rng)
    }
}

/// Registers freshly initialized encoder parameters under `prefix`.
pub fn init_encoder<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    hidden: usize,
    latent: usize,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    for (name, shape) in encoder_param_shapes(hidden, latent) {
        let t = init_param(&name, &shape, 1, rng);
        store.insert(format!("{prefix}{name}"), t, frozen)?;
    }
    Ok(())
}

fn gdn<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    inverse: bool,
) -> Result<Var> {
    let beta = tape.param(store, &format!("{prefix}.beta"))?;
    let gamma = tape.param(store, &format!("{prefix}.gamma"))?;
    let beta = tape.lower_bound(beta, T::of(GDN_BETA_MIN));
    let gamma = tape.lower_bound(gamma, T::zero());
    let c = tape.shape(beta)[0];
    let gamma = tape.reshape(gamma, &[c, c, 1, 1])?;
    let x2 = tape.mul(x, x)?;
    let norm = tape.conv2d(x2, gamma, Some(beta), 1, 0, 1)?;
    let s = tape.sqrt(norm);
    if inverse {
        tape.mul(x, s)
    } else {
        tape.div(x, s)
    }
}

/// Encoder on the tape. Parameters are bound from `store` under `prefix`
/// (e.g. `"encoder."`).
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    check_image_shape(tape.shape(x), DOWNSAMPLE)?;
    let mut h = x;
    for i in 1..=4 {
        let w = tape.param(store, &format!("{prefix}conv{i}.weight"))?;
        let b = tape.param(store, &format!("{prefix}conv{i}.bias"))?;
        h = tape.conv2d(h, w, Some(b), 2, KERNEL / 2, 1)?;
        if i < 4 {
            h = gdn(tape, store, &format!("{prefix}gdn{i}"), h, false)?;
        }
    }
    Ok(h)
}

/// Decoder on the tape, without the final clamp.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    y_hat: Var,
) -> Result<Var> {
    let mut h = y_hat;
    for i in 1..=4 {
        let w = tape.param(store, &format!("{prefix}deconv{i}.weight"))?;
        let b = tape.param(store, &format!("{prefix}deconv{i}.bias"))?;
        h = tape.conv_transpose2d(h, w, Some(b), 2, KERNEL / 2, 1)?;
        if i < 4 {
            h = gdn(tape, store, &format!("{prefix}igdn{i}"), h, true)?;
        }
    }
    Ok(h)
}

/// Checks a `[3, H, W]` image shape with `H`, `W` multiples of `multiple`.
pub fn check_image_shape(shape: &[usize], multiple: usize) -> Result<()> {
    match shape {
        [3, h, w] if h % multiple == 0 && w % multiple == 0 => Ok(()),
        [3, h, w] => Err(Error::dim(format!(
            "image is {h}x{w}; height and width must be multiples of {multiple} (pad the image)"
        ))),
        other => Err(Error::dim(format!("expected a [3, H, W] image, got {other:?}"))),
    }
}

/// Quantizes a latent on the tape.
pub fn quantize<T: Real>(tape: &mut Tape<T>, y: Var, mode: QuantizeMode, rng: &mut Rng) -> Result<Var> {
    match mode {
        QuantizeMode::Eval => Ok(tape.round_ste(y)),
        QuantizeMode::Train => {
            let noise = Tensor::from_fn(tape.shape(y), |_| T::of(rng.uniform() - 0.5));
            let u = tape.constant(noise);
            tape.add(y, u)
        }
    }
}

/// Tensor-level [`quantize`].
pub fn quantize_tensor<T: Real>(y: &Tensor<T>, mode: QuantizeMode, rng: &mut Rng) -> Tensor<T> {
    match mode {
        QuantizeMode::Eval => y.map(|v| v.round()),
        QuantizeMode::Train => {
            let mut out = y.clone();
            for v in out.data_mut() {
                *v += T::of(rng.uniform() - 0.5);
            }
            out
        }
    }
}

/// Estimated bits per pixel of `y_hat: [M, h, w]`:
/// `-Σ log2(max(F_c(ŷ+½) - F_c(ŷ-½), 1e-9)) / num_pixels` with `F_c` the
/// logistic CDF of channel `c` (scale floored at `1e-3`).
pub fn rate_bpp<T: Real>(
    y_hat: &Tensor<T>,
    mean: &Tensor<T>,
    log_scale: &Tensor<T>,
    num_pixels: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone());
    let m = tape.constant(mean.clone());
    let s = tape.constant(log_scale.clone());
    let r = tape.logistic_rate(y, m, s, num_pixels)?;
    Ok(tape.value(r).item().as_f64())
}

/// Combines reconstruction and rate nodes into the objective.
/// Returns the loss node and its parts.
pub fn compose_rd<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    rate: Var,
    lambda: f64,
) -> Result<(Var, RdLossParts)> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    let d = tape.mse(x, x_hat)?;
    let weighted = tape.scale(d, T::of(lambda));
    let total = tape.add(weighted, rate)?;
    let parts = RdLossParts::new(
        tape.value(d).item().as_f64(),
        tape.value(rate).item().as_f64(),
        lambda,
    );
    Ok((total, parts))
}

/// A reconstructed image with its quality and estimated rate.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub x_hat: Tensor<T>,
    pub psnr_db: f64,
    pub bpp: f64,
}

impl<T: Real> CodecModel<T> {
    pub fn new(hidden: usize, latent: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || latent == 0 {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, "encoder.", hidden, latent, &mut rng, false)?;
        for (name, shape) in decoder_param_shapes(hidden, latent) {
            let t = init_param(&name, &shape, 4, &mut rng);
            params.insert(format!("decoder.{name}"), t, false)?;
        }
        params.insert("entropy.mean", Tensor::zeros(&[latent]), false)?;
        params.insert("entropy.log_scale", Tensor::zeros(&[latent]), false)?;
        Ok(Self {
            hidden,
            latent,
            params,
        })
    }

    /// Rebuilds a model from a parameter store (e.g. a loaded checkpoint),
    /// inferring `N` and `M` from the first and last encoder kernels.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let dims = |name: &str| -> Result<Vec<usize>> {
            params
                .value(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::CheckpointFormat(format!("codec parameter '{name}' missing")))
        };
        let hidden = dims("encoder.conv1.weight")?[0];
        let latent = dims("encoder.conv4.weight")?[0];
        let expected = encoder_param_shapes(hidden, latent)
            .into_iter()
            .map(|(n, s)| (format!("encoder.{n}"), s))
            .chain(
                decoder_param_shapes(hidden, latent)
                    .into_iter()
                    .map(|(n, s)| (format!("decoder.{n}"), s)),
            )
            .chain([
                ("entropy.mean".to_string(), vec![latent]),
                ("entropy.log_scale".to_string(), vec![latent]),
            ]);
        for (name, shape) in expected {
            if dims(&name)? != shape {
                return Err(Error::CheckpointFormat(format!(
                    "codec parameter '{name}' should have shape {shape:?}"
                )));
            }
        }
        Ok(Self {
            hidden,
            latent,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    /// `x: [3, H, W]` → `y: [M, H/16, W/16]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = encoder_forward(&mut tape, &self.params, "encoder.", xv)?;
        Ok(tape.value(y).clone())
    }

    /// `ŷ: [M, h, w]` → `x̂: [3, 16h, 16w]`, clamped to `[0, 1]`.
    pub fn decode(&self, y_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = tape.constant(y_hat.clone());
        let raw = decoder_forward(&mut tape, &self.params, "decoder.", y)?;
        let out = tape.clamp(raw, T::zero(), T::one());
        Ok(tape.value(out).clone())
    }

    pub fn rate_bpp(&self, y_hat: &Tensor<T>, num_pixels: usize) -> Result<f64> {
        rate_bpp(
            y_hat,
            self.params.value("entropy.mean").expect("entropy.mean"),
            self.params.value("entropy.log_scale").expect("entropy.log_scale"),
            num_pixels,
        )
    }

    /// Builds the objective on `tape`. In train mode the reconstruction is
    /// left unclamped so distortion gradients reach every pixel; eval mode
    /// clamps to `[0, 1]` like [`CodecModel::decode`].
    pub fn rd_loss(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        lambda: f64,
        mode: QuantizeMode,
        rng: &mut Rng,
    ) -> Result<(Var, RdLossParts)> {
        rd_loss_on(tape, &self.params, x, lambda, mode, rng)
    }

    /// Eval-mode round trip of one image.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Reconstruction<T>> {
        let y = self.encode(x)?;
        let y_hat = quantize_tensor(&y, QuantizeMode::Eval, &mut Rng::new(0));
        let x_hat = self.decode(&y_hat)?;
        let (_, h, w) = x.dims3()?;
        Ok(Reconstruction {
            psnr_db: psnr(x, &x_hat)?,
            bpp: self.rate_bpp(&y_hat, h * w)?,
            x_hat,
        })
    }
}

/// [`CodecModel::rd_loss`] over an arbitrary store holding codec parameters
/// (used by gradient checks that perturb the store).
pub fn rd_loss_on<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    lambda: f64,
    mode: QuantizeMode,
    rng: &mut Rng,
) -> Result<(Var, RdLossParts)> {
    let (_, h, w) = x.dims3()?;
    let xv = tape.constant(x.clone());
    let y = encoder_forward(tape, store, "encoder.", xv)?;
    let y_hat = quantize(tape, y, mode, rng)?;
    let raw = decoder_forward(tape, store, "decoder.", y_hat)?;
    let x_hat = match mode {
        QuantizeMode::Train => raw,
        QuantizeMode::Eval => tape.clamp(raw, T::zero(), T::one()),
    };
    let mean = tape.param(store, "entropy.mean")?;
    let log_scale = tape.param(store, "entropy.log_scale")?;
    let rate = tape.logistic_rate(y_hat, mean, log_scale, h * w)?;
    compose_rd(tape, xv, x_hat, rate, lambda)
}

/// Peak signal-to-noise ratio for `[0, 1]` images: `10·log10(1/MSE)`.
/// Identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim(format!(
            "psnr: shapes {:?} and {:?} differ",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lambda: DEFAULT_LAMBDA,
            lr: 1e-3,
            batch_size: 4,
            seed: 1,
        }
    }
}

/// Adam on the rate–distortion objective over `images`, decoupled from any
/// classifier. Returns the batch-mean loss parts of every step.
pub fn train_codec<T: Real>(
    model: &mut CodecModel<T>,
    images: &[Tensor<T>],
    cfg: &CodecTrainConfig,
) -> Result<Vec<RdLossParts>> {
    if cfg.steps > 0 && images.is_empty() {
        return Err(Error::Config("codec training needs at least one image".into()));
    }
    for img in images {
        check_image_shape(img.shape(), DOWNSAMPLE)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.derive(0);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| order_rng.below(images.len()))
            .collect();
        let params = &model.params;
        let results = Exec::default().map(picks.len(), |i| {
            let mut rng = root.derive(1 + (step * cfg.batch_size + i) as u64);
            let mut tape = Tape::with_exec(Exec::Sequential);
            let (loss, parts) =
                rd_loss_on(&mut tape, params, &images[picks[i]], cfg.lambda, QuantizeMode::Train, &mut rng)?;
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("codec step {}: {msg}", step + 1)),
                other => other,
            })?;
            Ok::<_, Error>((parts, grads.into_params()))
        });
        let (mut d, mut r) = (0.0, 0.0);
        for res in results {
            let (parts, grads) = res?;
            d += parts.d_mse;
            r += parts.r_bpp;
            model.params.accumulate(&grads)?;
        }
        let n = cfg.batch_size as f64;
        model.params.scale_grads(T::of(1.0 / n));
        model.params.adam_step(&adam, step as u64 + 1)?;
        history.push(RdLossParts::new(d / n, r / n, cfg.lambda));
    }
    Ok(history)
}
