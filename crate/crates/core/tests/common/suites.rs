//! Acceptance checks. Each returns a one-line summary on success and a
//! description of the first violation on failure. Tolerances are fixed here.

use std::time::{Duration, Instant};

use ci2p_core::ci2p::{self, ci2p_forward, ci2p_forward_ds, InvertedResidualSpec, CNN_RESHAPE_PREFIX, ENCODER_PREFIX};
use ci2p_core::codec::{self, psnr, rd_loss_on, train_codec, CodecModel, CodecTrainConfig, QuantizeMode};
use ci2p_core::flops::{model_params, reduction_table, reference_desc};
use ci2p_core::harness::checkpoint::to_bytes;
use ci2p_core::harness::{gen_synthetic, train_classifier, Dataset, Split, TrainConfig, TrainOutputs};
use ci2p_core::tensor::kernels::{conv2d_forward, matmul, ConvGeom};
use ci2p_core::tensor::{grad_check, grad_check_params, Exec, ParamSlice, ParamStore, Rng, Tape, Tensor};
use ci2p_core::vit::{build_model, msa_forward, Classifier, ModelDesc, TransformerBlock, Variant};

use super::*;

pub type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<V, E: std::fmt::Display>(r: std::result::Result<V, E>, what: &str) -> std::result::Result<V, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn within_rel(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

// ---------------------------------------------------------------- FLOPs

pub const FLOPS_SIZES: [usize; 3] = [256, 384, 512];
pub const VIT_GFLOPS: [f64; 3] = [23.127, 55.433, 107.0];
pub const CI2P_GFLOPS: [f64; 3] = [8.477, 19.284, 34.81];
pub const DS_GFLOPS: [f64; 3] = [6.442, 14.492, 25.762];
pub const CI2P_REDUCTION: [f64; 3] = [63.35, 65.21, 67.47];
pub const DS_REDUCTION: [f64; 3] = [72.15, 73.86, 75.92];
pub const VIT_FLOPS_TOL: f64 = 0.01;
pub const CI2P_FLOPS_TOL: f64 = 0.10;
pub const REDUCTION_TOL_POINTS: f64 = 3.0;
pub const FLOPS_TIME_LIMIT: Duration = Duration::from_secs(1);

pub fn flops_table() -> Outcome {
    let start = Instant::now();
    let table = ok(reduction_table(&Variant::ALL, &FLOPS_SIZES), "reduction table")?;
    let csv = table.to_csv();
    let elapsed = start.elapsed();
    ensure!(elapsed < FLOPS_TIME_LIMIT, "analysis took {elapsed:?}");
    ensure!(csv.lines().count() > 1, "empty CSV");
    let mut worst_points = 0.0f64;
    for e in &table.entries {
        let i = FLOPS_SIZES.iter().position(|&s| s == e.report.image_size).unwrap();
        let g = e.report.total_flops() as f64 / 1e9;
        let (want, tol, red) = match e.report.variant {
            Variant::VitB16 => (VIT_GFLOPS[i], VIT_FLOPS_TOL, None),
            Variant::Ci2pVit => (CI2P_GFLOPS[i], CI2P_FLOPS_TOL, Some(CI2P_REDUCTION[i])),
            Variant::Ci2pVitDs => (DS_GFLOPS[i], CI2P_FLOPS_TOL, Some(DS_REDUCTION[i])),
        };
        ensure!(
            within_rel(g, want, tol),
            "{} at {}: {g:.3} G, want {want} G ± {}%",
            e.report.variant,
            e.report.image_size,
            tol * 100.0
        );
        if let Some(r) = red {
            let pts = (100.0 * e.reduction - r).abs();
            worst_points = worst_points.max(pts);
            ensure!(
                pts <= REDUCTION_TOL_POINTS,
                "{} at {}: reduction {:.2}%, want {r}% ± {REDUCTION_TOL_POINTS}",
                e.report.variant,
                e.report.image_size,
                100.0 * e.reduction
            );
        }
    }
    let at = |v: Variant| {
        table
            .entries
            .iter()
            .filter(|e| e.report.variant == v)
            .map(|e| format!("{:.3}", e.report.total_flops() as f64 / 1e9))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(format!(
        "GFLOPs vit_b16 {} ci2p_vit {} ci2p_vit_ds {}; worst reduction gap {worst_points:.2} pts; {elapsed:?}",
        at(Variant::VitB16),
        at(Variant::Ci2pVit),
        at(Variant::Ci2pVitDs)
    ))
}

// ---------------------------------------------------------------- params

pub const PARAM_TARGETS: [(Variant, f64, f64); 3] = [
    (Variant::VitB16, 86.0e6, 0.02),
    (Variant::Ci2pVit, 88.96e6, 0.05),
    (Variant::Ci2pVitDs, 49.7e6, 0.05),
];

/// Tiny configurations covering every variant with and without positional
/// embeddings.
pub fn tiny_descs() -> Vec<ModelDesc> {
    let mut v = Vec::new();
    for variant in Variant::ALL {
        for pos in [true, false] {
            let mut d = ModelDesc::tiny(variant, 64, 2, 16, 2, 3);
            d.use_pos_embed = pos;
            v.push(d);
        }
    }
    let mut d = ModelDesc::tiny(Variant::Ci2pVitDs, 96, 4, 32, 4, 5);
    d.ds_split = 1;
    d.reshape_expansion = 3;
    v.push(d);
    v
}

/// A codec that fits `desc`, with GDN weights moved off their lower bound.
pub fn tiny_codec(desc: &ModelDesc, seed: u64) -> Option<CodecModel<f64>> {
    desc.variant.uses_codec().then(|| {
        let mut c = CodecModel::new(desc.codec_hidden, desc.codec_latent(), seed).unwrap();
        jitter_gdn(&mut c.params, seed);
        c
    })
}

/// Adds small positive noise to every GDN/IGDN `gamma` so no entry sits on
/// the non-negativity bound (a kink for finite differences).
pub fn jitter_gdn(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed ^ 0x6D);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".gamma") && n.contains("gdn"))
        .map(str::to_string)
        .collect();
    for n in names {
        for v in store.value_mut(&n).unwrap().data_mut() {
            *v += rng.uniform_in(0.01, 0.05);
        }
    }
}

pub fn param_counts() -> Outcome {
    let mut parts = Vec::new();
    for (variant, want, tol) in PARAM_TARGETS {
        let got = ok(model_params(&reference_desc(variant, 256)), "model_params")? as f64;
        ensure!(
            within_rel(got, want, tol),
            "{variant}: {got} parameters, want {want} ± {}%",
            tol * 100.0
        );
        parts.push(format!("{variant} {:.2}M", got / 1e6));
    }
    let tiny = tiny_descs();
    for d in &tiny {
        let codec = tiny_codec(d, 1);
        let (_, store) = ok(build_model(d, codec.as_ref(), 2), "build_model")?;
        let analyzed = ok(model_params(d), "model_params")?;
        ensure!(
            analyzed == store.element_count() as u64,
            "{} tiny (pos {}): analyzer {analyzed} vs store {}",
            d.variant,
            d.use_pos_embed,
            store.element_count()
        );
    }
    Ok(format!("{}; {} tiny configs exact", parts.join(", "), tiny.len()))
}

// ---------------------------------------------------------------- tokens

pub fn token_counts() -> Outcome {
    let codec = ok(
        CodecModel::<f32>::new(codec::DEFAULT_HIDDEN, codec::DEFAULT_LATENT, 3),
        "codec",
    )?;
    let spec = InvertedResidualSpec::reshape(codec::DEFAULT_LATENT, ci2p::DEFAULT_EXPANSION);
    let mut reshape = ParamStore::new();
    ok(spec.init(&mut reshape, ci2p::PATCH_RESHAPE_PREFIX, &mut Rng::new(4)), "reshape init")?;
    let mut seen = Vec::new();
    for (size, want) in [(256, 64), (384, 144), (512, 256)] {
        let x = image_f32(size, size as u64);
        let t = ok(ci2p_forward(&codec, &reshape, &spec, &x), "ci2p_forward")?;
        ensure!(
            t.tokens.shape() == [want, 768],
            "ci2p_forward at {size}: {:?}, want [{want}, 768]",
            t.tokens.shape()
        );
        seen.push(format!("{size}²→{want}×768"));
    }
    let x = image_f32(256, 9);
    let t = ok(ci2p_forward_ds(&codec, &x), "ci2p_forward_ds")?;
    ensure!(
        t.tokens.shape() == [256, 192] && t.grid == (16, 16),
        "ci2p_forward_ds at 256: {:?} grid {:?}",
        t.tokens.shape(),
        t.grid
    );

    let spec = InvertedResidualSpec::reshape(192, ci2p::DEFAULT_EXPANSION);
    let mut store = ParamStore::<f32>::new();
    ok(spec.init(&mut store, CNN_RESHAPE_PREFIX, &mut Rng::new(5)), "cnn init")?;
    let mut tape = Tape::new();
    let tokens = tape.constant(Tensor::from_fn(&[256, 192], |i| ((i % 31) as f32 - 15.0) / 15.0));
    let (out, grid) = ok(
        ci2p::cnn_reshape(&mut tape, &store, CNN_RESHAPE_PREFIX, &spec, tokens, (16, 16)),
        "cnn_reshape",
    )?;
    ensure!(
        tape.shape(out) == [64, 768] && grid == (8, 8),
        "cnn_reshape: {:?} grid {grid:?}",
        tape.shape(out)
    );
    Ok(format!("{}; ds 256²→256×192; cnn_reshape 256×192→64×768", seen.join(", ")))
}

fn image_f32(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[3, size, size], |_| rng.uniform() as f32)
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TIME_LIMIT: Duration = Duration::from_secs(120);

/// Every tape op over several seeds. Returns (cases, worst error).
pub fn op_gradients(seeds: std::ops::Range<u64>) -> std::result::Result<(usize, f64), String> {
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in seeds {
        for case in op_cases(seed) {
            let err = ok(grad_check(&case.f, &case.point, GRAD_STEP), case.name)?;
            ensure!(err < GRAD_TOL, "{} (seed {seed}): relative error {err:e}", case.name);
            worst = worst.max(err);
            n += 1;
        }
    }
    Ok((n, worst))
}

/// Rate–distortion loss with the quantization noise pinned by a fixed seed,
/// checked on a handful of entries of every codec parameter.
pub fn rd_loss_gradients(seed: u64) -> std::result::Result<f64, String> {
    let mut codec = ok(CodecModel::<f64>::new(8, 12, seed), "codec")?;
    jitter_gdn(&mut codec.params, seed);
    let mut rng = Rng::new(seed);
    for v in codec.params.value_mut("entropy.mean").unwrap().data_mut() {
        *v = rng.uniform_in(-0.3, 0.3);
    }
    for v in codec.params.value_mut("entropy.log_scale").unwrap().data_mut() {
        *v = rng.uniform_in(-0.2, 0.4);
    }
    let x = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
    let slices = spread_slices(&codec.params, 3);
    let noise_seed = seed + 1;
    ok(
        grad_check_params(
            &codec.params,
            &slices,
            |t, s| {
                let mut r = Rng::new(noise_seed);
                Ok(rd_loss_on(t, s, &x, 100.0, QuantizeMode::Train, &mut r)?.0)
            },
            GRAD_STEP,
        ),
        "rd_loss gradient check",
    )
}

/// Up to `per` evenly spread indices of every non-frozen entry.
pub fn spread_slices<T: ci2p_core::tensor::Real>(store: &ParamStore<T>, per: usize) -> Vec<ParamSlice> {
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

/// Replaces every trainable bias with small random values. Zero biases can
/// leave a ReLU6 input exactly at 0 (a whole channel clipped upstream), where
/// central differences are not valid.
pub fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::new(seed ^ 0xB1A5);
    let names: Vec<String> = store
        .iter()
        .filter(|(n, e)| !e.frozen && n.ends_with(".bias"))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        for v in store.value_mut(&n).unwrap().data_mut() {
            *v = rng.uniform_in(-0.1, 0.1);
        }
    }
}

/// End-to-end classification loss of a tiny model: every trainable entry,
/// plus input pixels (which exercise the frozen encoder).
pub fn model_gradients(desc: &ModelDesc, seed: u64) -> std::result::Result<f64, String> {
    let codec = tiny_codec(desc, seed);
    let (model, mut store) = ok(build_model(desc, codec.as_ref(), seed), "build_model")?;
    jitter_biases(&mut store, seed);
    let s = desc.image_size;
    let mut rng = Rng::new(seed);
    ok(
        store.insert("input", Tensor::from_fn(&[3, s, s], |_| rng.uniform()), false),
        "insert",
    )?;
    let slices = spread_slices(&store, 3);
    let label = (seed as usize) % desc.num_classes;
    ok(
        grad_check_params(
            &store,
            &slices,
            |t, s| {
                let x = t.param(s, "input")?;
                let logits = model.forward(t, s, x)?;
                t.cross_entropy(logits, label)
            },
            GRAD_STEP,
        ),
        "model gradient check",
    )
}

pub fn gradient_descs() -> [ModelDesc; 2] {
    [
        ModelDesc::tiny(Variant::Ci2pVit, 64, 2, 16, 2, 3),
        ModelDesc::tiny(Variant::Ci2pVitDs, 64, 2, 16, 2, 3),
    ]
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (cases, op_worst) = op_gradients(0..4)?;
    let rd = rd_loss_gradients(7)?;
    ensure!(rd < GRAD_TOL, "rd_loss: relative error {rd:e}");
    let mut model_worst = Vec::new();
    for d in gradient_descs() {
        let e = model_gradients(&d, 3)?;
        ensure!(e < GRAD_TOL, "{} tiny: relative error {e:e}", d.variant);
        model_worst.push(format!("{} {e:.1e}", d.variant));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < GRAD_TIME_LIMIT, "gradient suite took {elapsed:?}");
    Ok(format!(
        "{cases} op cases worst {op_worst:.1e}; rd_loss {rd:.1e}; {}; {elapsed:.1?}",
        model_worst.join(", ")
    ))
}

// ---------------------------------------------------------------- oracles

pub const ORACLE_TOL: f64 = 1e-10;

/// Random small instances of each op against its loop oracle. Returns the
/// number of instances per op.
pub fn oracle_suite(instances: usize, seed: u64) -> Outcome {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut track = |got: &[f64], want: &[f64], what: &str, i: usize| -> std::result::Result<(), String> {
        ensure!(got.len() == want.len(), "{what} #{i}: length {} vs {}", got.len(), want.len());
        let e = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
        ensure!(e <= ORACLE_TOL, "{what} #{i}: max error {e:e}");
        Ok(())
    };
    for i in 0..instances {
        let (m, k, n) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = ok(tape.matmul(av, bv), "matmul")?;
        track(tape.value(c).data(), &naive_matmul(a.data(), b.data(), m, k, n), "matmul", i)?;
        let raw = matmul(Exec::Sequential, a.data(), b.data(), m, k, n);
        track(&raw, &naive_matmul(a.data(), b.data(), m, k, n), "matmul kernel", i)?;
    }
    for i in 0..instances {
        let groups = 1 + rng.below(3);
        let (cin, cout) = (groups * (1 + rng.below(2)), groups * (1 + rng.below(3)));
        let (stride, pad) = (1 + rng.below(3), rng.below(3));
        let (kh, kw) = (1 + rng.below(3), 1 + rng.below(3));
        let h = kh.max(1 + rng.below(7));
        let w = kw.max(1 + rng.below(7));
        let x = rand_tensor(&mut rng, &[cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[cout, cin / groups, kh, kw], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        let (want, ho, wo) = naive_conv2d(x.data(), (cin, h, w), wt.data(), (cout, kh, kw), Some(bias.data()), stride, pad, groups);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = ok(tape.conv2d(xv, wv, Some(bv), stride, pad, groups), "conv2d")?;
        ensure!(tape.shape(y) == [cout, ho, wo], "conv2d #{i}: shape {:?}", tape.shape(y));
        track(tape.value(y).data(), &want, "conv2d", i)?;
        let g = ok(ConvGeom::new(cin, h, w, cout, kh, kw, stride, pad, groups), "geom")?;
        let raw = conv2d_forward(Exec::Parallel, x.data(), wt.data(), Some(bias.data()), &g);
        track(&raw, &want, "conv2d kernel", i)?;
    }
    for i in 0..instances {
        let (rows, len) = (1 + rng.below(5), 1 + rng.below(10));
        let scale = rng.uniform_in(0.1, 30.0);
        let x = rand_tensor(&mut rng, &[rows, len], -scale, scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.softmax(xv);
        let want: Vec<f64> = x.data().chunks(len).flat_map(softmax_oracle).collect();
        track(tape.value(s).data(), &want, "softmax", i)?;
    }
    for i in 0..instances {
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(3));
        let n = 1 + rng.below(6);
        let store = attention_store(&mut rng, "a.", d);
        let x = rand_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = ok(msa_forward(&mut tape, &store, "a.", xv, heads), "msa_forward")?;
        let v = |k: &str| store.value(k).unwrap().data().to_vec();
        let want = naive_attention(x.data(), n, d, heads, &v("a.qkv.weight"), &v("a.qkv.bias"), &v("a.proj.weight"), &v("a.proj.bias"));
        track(tape.value(y).data(), &want, "msa_forward", i)?;
    }
    Ok(format!(
        "{instances} instances each of matmul, conv2d, softmax, msa_forward; worst error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- freeze / determinism

pub const FREEZE_STEPS: usize = 20;

fn freeze_setup() -> (ModelDesc, CodecModel<f32>, Dataset<f32>, TrainConfig) {
    let desc = ModelDesc::tiny(Variant::Ci2pVit, 64, 1, 16, 2, 2);
    let codec = CodecModel::<f32>::new(desc.codec_hidden, desc.codec_latent(), 8).unwrap();
    // 2 × 25 items leave 40 for training: 5 batches of 8 per epoch
    let data = gen_synthetic::<f32>(2, 25, 64, 6).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        lr: 1e-3,
        seed: 12,
        ..TrainConfig::default()
    };
    (desc, codec, data, cfg)
}

pub fn freeze_determinism() -> Outcome {
    let (desc, codec, data, cfg) = freeze_setup();
    let dir = ok(tempfile::tempdir(), "tempdir")?;
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let (model, mut store) = ok(build_model(&desc, Some(&codec), 3), "build_model")?;
        let before = store.snapshot(ENCODER_PREFIX);
        ensure!(!before.is_empty(), "model has no encoder parameters");
        let others = store.snapshot("blocks.");
        let metrics = dir.path().join(format!("metrics{run}.csv"));
        let ckpt = dir.path().join(format!("model{run}.ckpt"));
        let report = ok(
            train_classifier(
                &model,
                &mut store,
                &data,
                &cfg,
                TrainOutputs {
                    metrics: Some(&metrics),
                    checkpoint: Some(&ckpt),
                },
            ),
            "training",
        )?;
        let steps = report.history.last().map_or(0, |m| m.step);
        ensure!(steps == FREEZE_STEPS, "ran {steps} steps, want {FREEZE_STEPS}");
        ensure!(store.matches_snapshot(&before), "encoder moved during training");
        ensure!(report.encoder_intact == Some(true), "report says encoder moved");
        ensure!(!store.matches_snapshot(&others), "trainable blocks did not move");
        let m = ok(std::fs::read(&metrics), "read metrics")?;
        let c = ok(std::fs::read(&ckpt), "read checkpoint")?;
        ensure!(c == to_bytes(&store), "checkpoint file differs from final store");
        artifacts.push((m, c));
    }
    ensure!(artifacts[0].0 == artifacts[1].0, "metrics CSVs differ between runs");
    ensure!(artifacts[0].1 == artifacts[1].1, "checkpoints differ between runs");
    Ok(format!(
        "{FREEZE_STEPS} steps: encoder bit-identical; metrics ({} B) and checkpoint ({} B) byte-identical across runs",
        artifacts[0].0.len(),
        artifacts[0].1.len()
    ))
}

// ---------------------------------------------------------------- codec learnability

pub const CODEC_STEPS: usize = 300;
pub const CODEC_WINDOW: usize = 50;
pub const CODEC_MIN_PSNR_GAIN: f64 = 3.0;
pub const CODEC_TIME_LIMIT: Duration = Duration::from_secs(300);

pub fn codec_learnability() -> Outcome {
    let data = ok(gen_synthetic::<f32>(2, 100, 64, 3), "gen_synthetic")?;
    let train: Vec<Tensor<f32>> = data.split(Split::Train).iter().map(|i| i.image.clone()).collect();
    let held: Vec<Tensor<f32>> = data.split(Split::Val).iter().map(|i| i.image.clone()).collect();
    let mut model = ok(CodecModel::<f32>::new(32, 48, 1), "codec")?;
    let mean_psnr = |m: &CodecModel<f32>| -> std::result::Result<f64, String> {
        let mut s = 0.0;
        for x in &held {
            let r = ok(m.reconstruct(x), "reconstruct")?;
            ensure!(r.psnr_db == ok(psnr(x, &r.x_hat), "psnr")?, "psnr mismatch");
            s += r.psnr_db;
        }
        Ok(s / held.len() as f64)
    };
    let p0 = mean_psnr(&model)?;
    let start = Instant::now();
    let cfg = CodecTrainConfig {
        steps: CODEC_STEPS,
        ..CodecTrainConfig::default()
    };
    let hist = ok(train_codec(&mut model, &train, &cfg), "train_codec")?;
    let elapsed = start.elapsed();
    ensure!(hist.len() == CODEC_STEPS, "{} steps recorded", hist.len());
    let mean = |s: &[codec::RdLossParts]| s.iter().map(|p| p.d_mse).sum::<f64>() / s.len() as f64;
    let first = mean(&hist[..CODEC_WINDOW]);
    let last = mean(&hist[CODEC_STEPS - CODEC_WINDOW..]);
    let p1 = mean_psnr(&model)?;
    ensure!(last < first, "D_MSE did not fall: first {first:.4}, last {last:.4}");
    ensure!(
        p1 - p0 >= CODEC_MIN_PSNR_GAIN,
        "PSNR {p0:.2} → {p1:.2} dB, gain below {CODEC_MIN_PSNR_GAIN} dB"
    );
    ensure!(elapsed < CODEC_TIME_LIMIT, "training took {elapsed:?}");
    Ok(format!(
        "D_MSE {first:.3} → {last:.3}; held-out PSNR {p0:.2} → {p1:.2} dB; {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- classifier learnability

pub const CLS_EPOCHS: usize = 50;
pub const CLS_MIN_TRAIN_ACC: f64 = 0.95;
pub const CLS_MIN_VAL_ACC: f64 = 0.85;
pub const CLS_LR: f64 = 3e-4;
/// Final-epoch train loss must fall below this fraction of the first.
pub const CLS_LOSS_RATIO: f64 = 0.25;

pub fn classifier_desc() -> ModelDesc {
    let mut d = ModelDesc::tiny(Variant::Ci2pVit, 64, 2, 64, 4, 2);
    d.codec_hidden = 16;
    d.reshape_expansion = 4;
    d
}

fn classifier_run(
    codec: &CodecModel<f32>,
    data: &Dataset<f32>,
) -> std::result::Result<(Classifier, ci2p_core::harness::TrainReport), String> {
    let desc = classifier_desc();
    let (model, mut store) = ok(build_model(&desc, Some(codec), 1), "build_model")?;
    let cfg = TrainConfig {
        epochs: CLS_EPOCHS,
        lr: CLS_LR,
        seed: 1,
        ..TrainConfig::default()
    };
    let report = ok(
        train_classifier(&model, &mut store, data, &cfg, TrainOutputs::default()),
        "training",
    )?;
    Ok((model, report))
}

pub fn classifier_learnability() -> Outcome {
    let start = Instant::now();
    let data = ok(gen_synthetic::<f32>(2, 100, 64, 3), "gen_synthetic")?;
    let train: Vec<Tensor<f32>> = data.split(Split::Train).iter().map(|i| i.image.clone()).collect();
    let desc = classifier_desc();
    let mut codec = ok(CodecModel::<f32>::new(desc.codec_hidden, desc.codec_latent(), 1), "codec")?;
    let cc = CodecTrainConfig {
        steps: 200,
        ..CodecTrainConfig::default()
    };
    ok(train_codec(&mut codec, &train, &cc), "train_codec")?;

    let (_, report) = classifier_run(&codec, &data)?;
    let last = *report.history.last().ok_or("no epochs")?;
    let first = report.history[0];
    ensure!(report.encoder_intact == Some(true), "pretrained encoder moved");
    ensure!(
        last.train_loss < CLS_LOSS_RATIO * first.train_loss,
        "train loss {:.4} → {:.4}, not below {CLS_LOSS_RATIO} of the first epoch",
        first.train_loss,
        last.train_loss
    );
    ensure!(
        last.train_acc >= CLS_MIN_TRAIN_ACC && last.val_acc >= CLS_MIN_VAL_ACC,
        "after {CLS_EPOCHS} epochs: train {:.3}, val {:.3}",
        last.train_acc,
        last.val_acc
    );

    // control: same harness with an untrained, frozen encoder
    let random = ok(CodecModel::<f32>::new(desc.codec_hidden, desc.codec_latent(), 99), "codec")?;
    let (_, ablation) = classifier_run(&random, &data)?;
    let abl = *ablation.history.last().ok_or("no ablation epochs")?;
    ensure!(ablation.history.len() == CLS_EPOCHS, "ablation stopped early");
    ensure!(ablation.encoder_intact == Some(true), "random encoder moved");
    ensure!(abl.train_loss.is_finite() && abl.val_loss.is_finite(), "ablation loss not finite");
    Ok(format!(
        "pretrained encoder: train {:.1}% val {:.1}% loss {:.3} → {:.4}; random frozen encoder: train {:.1}% val {:.1}%; {:.1?}",
        100.0 * last.train_acc,
        100.0 * last.val_acc,
        first.train_loss,
        last.train_loss,
        100.0 * abl.train_acc,
        100.0 * abl.val_acc,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- permutations

pub const PERM_TOL: f64 = 1e-6;
pub const PERM_TRIALS: usize = 20;

pub fn permutation_properties() -> Outcome {
    let mut desc = ModelDesc::tiny(Variant::Ci2pVit, 64, 3, 16, 2, 4);
    desc.use_pos_embed = false;
    let codec = tiny_codec(&desc, 5);
    let (model, store) = ok(build_model(&desc, codec.as_ref(), 5), "build_model")?;
    let grid = (4, 4);
    let (n, d) = (grid.0 * grid.1, desc.dim);
    let mut rng = Rng::new(21);
    let stack = |x: &Tensor<f64>| -> std::result::Result<(Tensor<f64>, Tensor<f64>), String> {
        let mut tape = Tape::new();
        let mut v = tape.constant(x.clone());
        for index in 0..desc.depth {
            v = ok(TransformerBlock { index, heads: desc.heads }.forward(&mut tape, &store, v), "block")?;
        }
        let mut tape2 = Tape::new();
        let xv = tape2.constant(x.clone());
        let logits = ok(model.forward_tokens(&mut tape2, &store, xv, grid), "forward_tokens")?;
        Ok((tape.value(v).clone(), tape2.value(logits).clone()))
    };
    let (mut worst_eq, mut worst_inv) = (0.0f64, 0.0f64);
    for trial in 0..PERM_TRIALS {
        let x = rand_tensor(&mut rng, &[n, d], -1.5, 1.5);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let px = Tensor::from_fn(&[n, d], |i| x.data()[perm[i / d] * d + i % d]);
        let (y, z) = stack(&x)?;
        let (py, pz) = stack(&px)?;
        let eq = (0..n * d)
            .map(|i| (py.data()[i] - y.data()[perm[i / d] * d + i % d]).abs())
            .fold(0.0, f64::max);
        let inv = z.max_abs_diff(&pz);
        worst_eq = worst_eq.max(eq);
        worst_inv = worst_inv.max(inv);
        ensure!(eq <= PERM_TOL, "trial {trial}: block stack not equivariant, error {eq:e}");
        ensure!(inv <= PERM_TOL, "trial {trial}: logits not invariant, error {inv:e}");
    }
    Ok(format!(
        "{PERM_TRIALS} permutations of {n} tokens: equivariance error {worst_eq:.1e}, invariance error {worst_inv:.1e}"
    ))
}
