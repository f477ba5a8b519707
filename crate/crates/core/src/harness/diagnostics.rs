//! Finite-difference gradient audit of the full pipeline, run by the CLI.

use crate::codec::{rd_loss_on, CodecModel, QuantizeMode};
use crate::error::Result;
use crate::tensor::{grad_check_params, ParamSlice, ParamStore, Rng, Tensor};
use crate::vit::{build_model, ModelDesc, Variant};

/// Central-difference step used by the audit.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Up to `per` evenly spaced coordinates of every trainable entry.
pub fn spread_slices(store: &ParamStore<f64>, per: usize) -> Vec<ParamSlice> {
    store
        .iter()
        .filter(|(_, e)| !e.frozen)
        .map(|(name, e)| {
            let len = e.value.len();
            let count = per.min(len);
            let step = (len / count).max(1);
            ParamSlice::strided(name, step / 2, step, count)
        })
        .collect()
}

/// Moves parameters off the points where the forward pass has kinks:
/// GDN `gamma` sits on its non-negativity bound at init, and zero biases can
/// leave a clipped activation exactly at its corner.
fn move_off_kinks(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let gamma = n.ends_with(".gamma") && n.contains("gdn");
        let bias = n.ends_with(".bias");
        if !(gamma || bias) {
            continue;
        }
        for v in store.value_mut(&n).expect("listed").data_mut() {
            if gamma {
                *v += rng.uniform_in(0.01, 0.05);
            } else {
                *v = rng.uniform_in(-0.1, 0.1);
            }
        }
    }
}

/// Rate–distortion loss of a small codec with the quantization noise fixed.
pub fn check_rd_loss(seed: u64) -> Result<GradCheckResult> {
    let mut rng = Rng::new(seed);
    let mut codec = CodecModel::<f64>::new(8, 12, seed)?;
    move_off_kinks(&mut codec.params, &mut rng);
    let x = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
    let slices = spread_slices(&codec.params, 3);
    let noise = rng.derive(1);
    let err = grad_check_params(
        &codec.params,
        &slices,
        |t, s| Ok(rd_loss_on(t, s, &x, 100.0, QuantizeMode::Train, &mut noise.clone())?.0),
        STEP,
    )?;
    Ok(GradCheckResult {
        name: "rd_loss".into(),
        probes: slices.iter().map(|s| s.indices.len()).sum(),
        max_rel_error: err,
    })
}

/// Classification loss of a tiny model of `variant`, probed at every
/// trainable entry and at input pixels (which flow through the frozen
/// encoder).
pub fn check_model(variant: Variant, seed: u64) -> Result<GradCheckResult> {
    let desc = ModelDesc::tiny(variant, 64, 2, 16, 2, 3);
    let mut rng = Rng::new(seed);
    let codec = if variant.uses_codec() {
        let mut c = CodecModel::<f64>::new(desc.codec_hidden, desc.codec_latent(), seed)?;
        move_off_kinks(&mut c.params, &mut rng);
        Some(c)
    } else {
        None
    };
    let (model, mut store) = build_model(&desc, codec.as_ref(), seed)?;
    move_off_kinks(&mut store, &mut rng);
    let s = desc.image_size;
    store.insert("input", Tensor::from_fn(&[3, s, s], |_| rng.uniform()), false)?;
    let slices = spread_slices(&store, 3);
    let label = (seed % desc.num_classes as u64) as usize;
    let err = grad_check_params(
        &store,
        &slices,
        |t, s| {
            let x = t.param(s, "input")?;
            let logits = model.forward(t, s, x)?;
            t.cross_entropy(logits, label)
        },
        STEP,
    )?;
    Ok(GradCheckResult {
        name: format!("{variant} (tiny)"),
        probes: slices.iter().map(|s| s.indices.len()).sum(),
        max_rel_error: err,
    })
}
