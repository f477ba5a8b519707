//! Analytical FLOPs and parameter counts.
//!
//! One multiply-accumulate counts as one FLOP. Matmuls cost `m·k·n`,
//! convolutions `kh·kw·(Cin/groups)·Cout·Hout·Wout`, an MLP
//! `2·hw·C·Hid`, and self-attention `4·hw·C² + 2·(hw)²·C`. Biases,
//! normalization (including GDN), softmax and activations are not counted.
//! The frozen codec encoder is counted: it still runs at inference.
//!
//! Parameter counts are closed-form and deliberately do not reuse the
//! builder's shape table, so comparing them with a built model is a real
//! check.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vit::{ModelDesc, Stage, Variant, PATCH};

/// Self-attention cost on `hw` tokens of width `c`: `4·hw·c² + 2·hw²·c`.
pub fn msa_flops(hw: u64, c: u64) -> u64 {
    4 * hw * c * c + 2 * hw * hw * c
}

/// Two linear layers `c → hid → c` on `hw` tokens.
pub fn mlp_flops(hw: u64, c: u64, hid: u64) -> u64 {
    2 * hw * c * hid
}

pub fn matmul_flops(m: u64, k: u64, n: u64) -> u64 {
    m * k * n
}

#[allow(clippy::too_many_arguments)]
pub fn conv_flops(kh: u64, kw: u64, cin: u64, groups: u64, cout: u64, hout: u64, wout: u64) -> u64 {
    kh * kw * (cin / groups) * cout * hout * wout
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentRow {
    pub component: String,
    pub flops: u64,
    pub params: u64,
}

/// Per-component breakdown of one model at one input size.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub variant: Variant,
    pub image_size: usize,
    pub rows: Vec<ComponentRow>,
}

impl FlopsReport {
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// `1 - total / baseline_total`.
    pub fn reduction_vs(&self, baseline: &FlopsReport) -> f64 {
        1.0 - self.total_flops() as f64 / baseline.total_flops() as f64
    }

    fn push(&mut self, component: impl Into<String>, flops: u64, params: u64) {
        self.rows.push(ComponentRow {
            component: component.into(),
            flops,
            params,
        });
    }
}

/// MACs and parameters of the codec encoder at input side `s`.
fn encoder_cost(n: u64, m: u64, s: u64) -> (u64, u64) {
    let chans = [3, n, n, n, m];
    let mut flops = 0;
    let mut params = 0;
    for i in 0..4 {
        let side = s >> (i + 1);
        flops += conv_flops(5, 5, chans[i], 1, chans[i + 1], side, side);
        params += 25 * chans[i] * chans[i + 1] + chans[i + 1];
    }
    // three GDN layers: beta [n] and gamma [n, n]
    params += 3 * (n + n * n);
    (flops, params)
}

/// MACs and parameters of a stride-2 reshape unit `c → 4c` with hidden
/// width `c·e` on an input of side `s`.
fn reshape_cost(c: u64, e: u64, s: u64) -> (u64, u64) {
    let hid = c * e;
    let out = 4 * c;
    let so = s.div_ceil(2);
    let flops = conv_flops(1, 1, c, 1, hid, s, s)
        + conv_flops(3, 3, hid, hid, hid, so, so)
        + conv_flops(1, 1, hid, 1, out, so, so);
    let params = (c * hid + hid) + (9 * hid + hid) + (hid * out + out);
    (flops, params)
}

fn stage_rows(report: &mut FlopsReport, st: &Stage) {
    let (hw, c, hid, b) = (
        st.tokens() as u64,
        st.dim as u64,
        st.mlp_hidden as u64,
        st.blocks as u64,
    );
    let name = format!("blocks{}-{}", st.first_block, st.first_block + st.blocks - 1);
    report.push(format!("{name}.attn"), b * msa_flops(hw, c), b * (4 * c * c + 4 * c));
    report.push(format!("{name}.mlp"), b * mlp_flops(hw, c, hid), b * (2 * c * hid + hid + c));
    report.push(format!("{name}.norm"), 0, b * 4 * c);
}

/// FLOPs breakdown of `desc` evaluated at `image_size` (positional
/// embedding sizes follow `image_size` as well).
pub fn model_flops(desc: &ModelDesc, image_size: usize) -> Result<FlopsReport> {
    let mut probe = desc.clone();
    probe.image_size = image_size;
    probe.validate()?;
    let s = image_size as u64;
    let d = desc.dim as u64;
    let mut r = FlopsReport {
        variant: desc.variant,
        image_size,
        rows: Vec::new(),
    };
    let stages = desc.stages(image_size);
    let n = desc.codec_hidden as u64;
    let e = desc.reshape_expansion as u64;
    match desc.variant {
        Variant::VitB16 => {
            let p = PATCH as u64;
            let side = s / p;
            r.push(
                "patch_embed",
                conv_flops(p, p, 3, 1, d, side, side),
                3 * p * p * d + d,
            );
        }
        Variant::Ci2pVit => {
            let (f, p) = encoder_cost(n, d / 4, s);
            r.push("codec_encoder", f, p);
            let (f, p) = reshape_cost(d / 4, e, s / 16);
            r.push("patch_reshape", f, p);
        }
        Variant::Ci2pVitDs => {
            let (f, p) = encoder_cost(n, desc.ds_early_dim as u64, s);
            r.push("codec_encoder", f, p);
        }
    }
    if desc.use_pos_embed {
        r.push("pos_embed", 0, (stages[0].tokens() * stages[0].dim) as u64);
    }
    stage_rows(&mut r, &stages[0]);
    if let Some(second) = stages.get(1) {
        let (f, p) = reshape_cost(desc.ds_early_dim as u64, e, s / 16);
        r.push("cnn_reshape", f, p);
        if desc.use_pos_embed {
            r.push("pos_embed2", 0, (second.tokens() * second.dim) as u64);
        }
        stage_rows(&mut r, second);
    }
    let c = desc.num_classes as u64;
    r.push("norm", 0, 2 * d);
    r.push("head", matmul_flops(1, d, c), d * c + c);
    Ok(r)
}

/// Exact parameter count of the model built from `desc` (codec encoder
/// included).
pub fn model_params(desc: &ModelDesc) -> Result<u64> {
    Ok(model_flops(desc, desc.image_size)?.total_params())
}

/// One variant at one size inside a [`ReductionTable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionEntry {
    pub report: FlopsReport,
    /// Fraction saved against the baseline at the same size.
    pub reduction: f64,
}

/// Reports for several variants and sizes, each compared with the
/// baseline at the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionTable {
    pub entries: Vec<ReductionEntry>,
}

/// Default (base-size, 1000-class) description used by the analyzer.
pub fn reference_desc(variant: Variant, image_size: usize) -> ModelDesc {
    ModelDesc::new(variant, image_size, 1000)
}

pub fn reduction_table(variants: &[Variant], image_sizes: &[usize]) -> Result<ReductionTable> {
    let mut entries = Vec::new();
    for &size in image_sizes {
        if size == 0 || size % 32 != 0 {
            return Err(Error::Config(format!("image size {size} is not a multiple of 32")));
        }
        let baseline = model_flops(&reference_desc(Variant::VitB16, size), size)?;
        for &v in variants {
            let report = model_flops(&reference_desc(v, size), size)?;
            entries.push(ReductionEntry {
                reduction: report.reduction_vs(&baseline),
                report,
            });
        }
    }
    Ok(ReductionTable { entries })
}

impl ReductionTable {
    /// `variant,image_size,component,flops,params`, one line per component
    /// plus a `total` line per model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,image_size,component,flops,params\n");
        for e in &self.entries {
            let r = &e.report;
            for row in &r.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.variant, r.image_size, row.component, row.flops, row.params
                );
            }
            let _ = writeln!(
                out,
                "{},{},total,{},{}",
                r.variant,
                r.image_size,
                r.total_flops(),
                r.total_params()
            );
        }
        out
    }

    /// Aligned summary: totals in GFLOPs, parameters in millions and the
    /// reduction against the baseline.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>12} {:>10} {:>11}\n",
            "variant", "size", "GFLOPs", "params(M)", "reduction"
        );
        for e in &self.entries {
            let r = &e.report;
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>12.3} {:>10.2} {:>10.2}%",
                r.variant.name(),
                format!("{0}²", r.image_size),
                r.total_flops() as f64 / 1e9,
                r.total_params() as f64 / 1e6,
                100.0 * e.reduction
            );
        }
        out
    }
}
