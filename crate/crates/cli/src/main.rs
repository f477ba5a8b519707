use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ci2p_core::codec::{train_codec, CodecModel, CodecTrainConfig};
use ci2p_core::flops::reduction_table;
use ci2p_core::harness::diagnostics::{self, GradCheckResult};
use ci2p_core::harness::ppm::{read_ppm, side_by_side, write_ppm};
use ci2p_core::harness::{
    evaluate, gen_synthetic, load_checkpoint, load_dataset, parse_kv, save_checkpoint, save_dataset, train_classifier,
    Dataset, Split, TrainConfig, TrainOutputs,
};
use ci2p_core::tensor::Tensor;
use ci2p_core::vit::{build_model, load_model, ModelDesc, Variant};
use ci2p_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const SEED_ENV: &str = "CI2P_SEED";
const MODEL_CKPT: &str = "model.ckpt";
const MODEL_CFG: &str = "model.cfg";
const METRICS_CSV: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "ci2p", version, about = "Compressed-image patch embedding for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic polygon dataset (PPM images + manifest.csv).
    GenData(GenDataArgs),
    /// Train the codec on the rate–distortion objective.
    TrainCodec(TrainCodecArgs),
    /// Train a classifier; writes model.ckpt, model.cfg and metrics.csv.
    Train(TrainArgs),
    /// Top-1 accuracy and loss of a trained classifier.
    Eval(EvalArgs),
    /// Analytic FLOPs and parameter counts.
    Analyze(AnalyzeArgs),
    /// Codec round trips: side-by-side PPMs plus PSNR and bpp.
    Reconstruct(ReconstructArgs),
    /// Finite-difference audit of codec and model gradients.
    GradCheck(GradCheckArgs),
}

/// Settings shared by commands that read `key=value` files.
#[derive(Args)]
struct Settings {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value setting, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed; falls back to the config file, then CI2P_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl Settings {
    /// Config-file pairs, then `--set` pairs, then `extra` (typed flags).
    fn pairs(&self, extra: Vec<(&str, Option<String>)>) -> Result<Vec<(String, String)>> {
        let mut kv = match &self.config {
            Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
            None => Vec::new(),
        };
        for s in &self.set {
            kv.extend(parse_kv(s)?);
        }
        for (k, v) in extra {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        }
        let seed = match self.seed {
            Some(s) => Some(s.to_string()),
            None if kv.iter().any(|(k, _)| k == "seed") => None,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => {
                    v.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
                    Some(v)
                }
                Err(_) => None,
            },
        };
        if let Some(s) = seed {
            kv.push(("seed".into(), s));
        }
        Ok(kv)
    }
}

fn opt<V: ToString>(v: &Option<V>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn unknown(key: &str, command: &str) -> Error {
    Error::Config(format!("unknown setting '{key}' for {command}"))
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side in pixels (multiple of 32).
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    settings: Settings,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (mut classes, mut per_class, mut size, mut seed) = (2usize, 100usize, 64usize, 0u64);
    let kv = a.settings.pairs(vec![
        ("classes", opt(&a.classes)),
        ("per_class", opt(&a.per_class)),
        ("size", opt(&a.size)),
    ])?;
    for (k, v) in &kv {
        match k.as_str() {
            "classes" => classes = num(k, v)?,
            "per_class" => per_class = num(k, v)?,
            "size" => size = num(k, v)?,
            "seed" => seed = num(k, v)?,
            _ => return Err(unknown(k, "gen-data")),
        }
    }
    let data = gen_synthetic::<f32>(classes, per_class, size, seed)?;
    save_dataset(&data, &a.out)?;
    println!(
        "wrote {} images ({} train / {} val) to {}",
        data.len(),
        data.split(Split::Train).len(),
        data.split(Split::Val).len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train-codec

#[derive(Args)]
struct TrainCodecArgs {
    /// Dataset directory; the train split is used.
    #[arg(long)]
    data: PathBuf,
    /// Codec checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Hidden width N.
    #[arg(long)]
    hidden: Option<usize>,
    /// Latent channels M.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Rate–distortion weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Per-step CSV `step,d_mse,r_bpp,loss`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

fn train_codec_cmd(a: &TrainCodecArgs) -> Result<()> {
    let (mut hidden, mut latent) = (32usize, 48usize);
    let mut cfg = CodecTrainConfig::default();
    let kv = a.settings.pairs(vec![
        ("hidden", opt(&a.hidden)),
        ("latent", opt(&a.latent)),
        ("steps", opt(&a.steps)),
        ("lambda", opt(&a.lambda)),
        ("lr", opt(&a.lr)),
        ("batch_size", opt(&a.batch_size)),
    ])?;
    for (k, v) in &kv {
        match k.as_str() {
            "hidden" => hidden = num(k, v)?,
            "latent" => latent = num(k, v)?,
            "steps" => cfg.steps = num(k, v)?,
            "lambda" => cfg.lambda = num(k, v)?,
            "lr" => cfg.lr = num(k, v)?,
            "batch_size" => cfg.batch_size = num(k, v)?,
            "seed" => cfg.seed = num(k, v)?,
            _ => return Err(unknown(k, "train-codec")),
        }
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("lambda must be non-negative and lr positive".into()));
    }
    let data = load_dataset::<f32>(&a.data)?;
    let train: Vec<Tensor<f32>> = data.split(Split::Train).iter().map(|i| i.image.clone()).collect();
    let mut model = CodecModel::<f32>::new(hidden, latent, cfg.seed)?;
    let start = Instant::now();
    let hist = train_codec(&mut model, &train, &cfg)?;
    save_checkpoint(&model.params, &a.out)?;
    if let Some(p) = &a.metrics {
        let mut csv = String::from("step,d_mse,r_bpp,loss\n");
        for (i, h) in hist.iter().enumerate() {
            let _ = writeln!(csv, "{},{:.9},{:.9},{:.9}", i + 1, h.d_mse, h.r_bpp, h.total);
        }
        write_file(p, csv)?;
    }
    let val = data.split(Split::Val);
    let mut psnr = 0.0;
    for it in &val {
        psnr += model.reconstruct(&it.image)?.psnr_db;
    }
    if let Some(last) = hist.last() {
        println!(
            "{} steps in {:.1?}: last D_MSE {:.4}, R {:.4} bpp",
            hist.len(),
            start.elapsed(),
            last.d_mse,
            last.r_bpp
        );
    }
    if !val.is_empty() {
        println!("val PSNR {:.2} dB over {} images", psnr / val.len() as f64, val.len());
    }
    println!("codec N={hidden} M={latent} saved to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Depth 2, width 64, 4 heads.
    Tiny,
    /// Depth 12, width 768, 12 heads.
    Base,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for model.ckpt, model.cfg and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// vit_b16, ci2p_vit or ci2p_vit_ds.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Pretrained codec checkpoint (CI2P variants).
    #[arg(long, conflicts_with = "random_codec")]
    codec: Option<PathBuf>,
    /// Use an untrained, frozen codec encoder instead (ablation).
    #[arg(long)]
    random_codec: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Cosine learning-rate decay.
    #[arg(long)]
    cosine: bool,
    #[command(flatten)]
    settings: Settings,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let kv = a.settings.pairs(vec![
        ("variant", a.variant.clone()),
        ("preset", a.preset.map(|p| format!("{p:?}").to_lowercase())),
        ("epochs", opt(&a.epochs)),
        ("lr", opt(&a.lr)),
        ("batch_size", opt(&a.batch_size)),
        ("flip_prob", opt(&a.flip_prob)),
        ("cosine", a.cosine.then(|| "true".to_string())),
    ])?;
    let get = |key: &str| kv.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let variant: Variant = get("variant").unwrap_or("ci2p_vit").parse()?;
    let preset = match get("preset").unwrap_or("tiny") {
        "tiny" => Preset::Tiny,
        "base" => Preset::Base,
        other => return Err(Error::Config(format!("preset: expected tiny or base, got '{other}'"))),
    };

    let data = load_dataset::<f32>(&a.data)?;
    let size = data
        .image_shape()
        .map(|s| s[1])
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let mut desc = match preset {
        Preset::Tiny => {
            let field = |k: &str, d: usize| get(k).map_or(Ok(d), |v| num(k, v));
            let mut d = ModelDesc::tiny(
                variant,
                size,
                field("depth", 2)?,
                field("dim", 64)?,
                field("heads", 4)?,
                data.class_count,
            );
            d.codec_hidden = 16;
            d.reshape_expansion = 4;
            d
        }
        Preset::Base => ModelDesc::new(variant, size, data.class_count),
    };
    let mut cfg = TrainConfig::default();
    let mut codec_hidden_set = false;
    for (k, v) in &kv {
        if matches!(k.as_str(), "variant" | "preset") {
            continue;
        }
        if cfg.set(k, v)? {
            continue;
        }
        if desc.set(k, v)? {
            codec_hidden_set |= k == "codec_hidden";
            continue;
        }
        return Err(unknown(k, "train"));
    }

    let codec = if variant.uses_codec() {
        let c = match (&a.codec, a.random_codec) {
            (Some(p), _) => CodecModel::from_params(load_checkpoint::<f32>(p)?)?,
            (None, true) => CodecModel::new(desc.codec_hidden, desc.codec_latent(), cfg.seed ^ 0xC0DEC)?,
            (None, false) => {
                return Err(Error::Config(format!(
                    "{variant} needs --codec <checkpoint> or --random-codec"
                )))
            }
        };
        if !codec_hidden_set {
            desc.codec_hidden = c.hidden();
        }
        Some(c)
    } else {
        None
    };
    let (model, mut store) = build_model(&desc, codec.as_ref(), cfg.seed)?;
    create_dir(&a.out)?;
    write_file(&a.out.join(MODEL_CFG), desc.to_kv())?;
    let metrics = a.out.join(METRICS_CSV);
    let ckpt = a.out.join(MODEL_CKPT);
    eprintln!(
        "training {variant} ({} parameters, {} trainable) on {} images for {} epochs",
        store.element_count(),
        store.trainable_element_count(),
        data.split(Split::Train).len(),
        cfg.epochs
    );
    let report = train_classifier(
        &model,
        &mut store,
        &data,
        &cfg,
        TrainOutputs {
            metrics: Some(&metrics),
            checkpoint: Some(&ckpt),
        },
    )?;
    if cfg.epochs == 0 {
        save_checkpoint(&store, &ckpt)?;
    }
    for m in &report.history {
        println!(
            "epoch {:>3} step {:>5}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            m.epoch, m.step, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        );
    }
    match report.encoder_intact {
        Some(true) => println!("encoder audit: bit-identical to pre-training snapshot"),
        Some(false) => return Err(Error::Contract("frozen encoder changed during training".into())),
        None => {}
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let desc = ModelDesc::from_kv(&read_text(&a.run.join(MODEL_CFG))?)?;
    let store = load_checkpoint::<f32>(&a.run.join(MODEL_CKPT))?;
    let (model, store) = load_model(&desc, store)?;
    let data: Dataset<f32> = ci2p_core::harness::data::load_dataset_with_classes(&a.data, Some(desc.num_classes))?;
    let items = match a.split {
        SplitArg::Train => data.split(Split::Train),
        SplitArg::Val => data.split(Split::Val),
        SplitArg::All => data.items.iter().collect(),
    };
    let r = evaluate(&model, &store, &items)?;
    println!(
        "split={} count={} accuracy={:.6} loss={:.6}",
        format!("{:?}", a.split).to_lowercase(),
        r.count,
        r.accuracy,
        r.loss
    );
    Ok(())
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// vit_b16, ci2p_vit, ci2p_vit_ds or all.
    #[arg(long, default_value = "all")]
    variant: String,
    /// Comma-separated input sizes (multiples of 32).
    #[arg(long, value_delimiter = ',', default_value = "256,384,512")]
    sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn analyze_cmd(a: &AnalyzeArgs) -> Result<()> {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        a.variant.split(',').map(|v| v.trim().parse()).collect::<Result<_>>()?
    };
    let table = reduction_table(&variants, &a.sizes)?;
    let text = match a.format {
        Format::Csv => table.to_csv(),
        Format::Table => table.to_text(),
    };
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- reconstruct

#[derive(Args)]
struct ReconstructArgs {
    /// Codec checkpoint.
    #[arg(long)]
    codec: PathBuf,
    /// A P6 image or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for recon_*.ppm and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of images taken from a dataset directory.
    #[arg(long)]
    limit: Option<usize>,
}

fn reconstruct_cmd(a: &ReconstructArgs) -> Result<()> {
    let codec = CodecModel::from_params(load_checkpoint::<f32>(&a.codec)?)?;
    let images: Vec<(String, Tensor<f32>)> = if a.input.is_dir() {
        let data = load_dataset::<f32>(&a.input)?;
        data.items
            .into_iter()
            .take(a.limit.unwrap_or(usize::MAX))
            .enumerate()
            .map(|(i, it)| (format!("item{i:05}"), it.image))
            .collect()
    } else {
        let name = a
            .input
            .file_stem()
            .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
        vec![(name, read_ppm(&a.input)?)]
    };
    create_dir(&a.out)?;
    let mut csv = String::from("image,psnr_db,bpp\n");
    let (mut psnr, mut bpp) = (0.0, 0.0);
    for (name, x) in &images {
        let r = codec.reconstruct(x)?;
        write_ppm(&a.out.join(format!("recon_{name}.ppm")), &side_by_side(&[x, &r.x_hat])?)?;
        let _ = writeln!(csv, "{name},{:.6},{:.6}", r.psnr_db, r.bpp);
        psnr += r.psnr_db;
        bpp += r.bpp;
    }
    write_file(&a.out.join(METRICS_CSV), csv)?;
    let n = images.len().max(1) as f64;
    println!(
        "{} images: mean PSNR {:.2} dB, mean rate {:.4} bpp",
        images.len(),
        psnr / n,
        bpp / n
    );
    Ok(())
}

// ---------------------------------------------------------------- grad-check

#[derive(Args)]
struct GradCheckArgs {
    /// Seed for the probe points; falls back to CI2P_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

fn grad_check_cmd(a: &GradCheckArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => num(SEED_ENV, &v)?,
            Err(_) => 0,
        },
    };
    let mut results: Vec<GradCheckResult> = vec![diagnostics::check_rd_loss(seed)?];
    for v in Variant::ALL {
        results.push(diagnostics::check_model(v, seed)?);
    }
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<4} {:<22} {:>4} probes  max rel error {:.2e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.probes,
            r.max_rel_error
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} for {}",
            diagnostics::TOLERANCE,
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainCodec(a) => train_codec_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Analyze(a) => analyze_cmd(&a),
        Command::Reconstruct(a) => reconstruct_cmd(&a),
        Command::GradCheck(a) => grad_check_cmd(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
