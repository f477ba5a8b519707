//! Brute-force oracles, gradient-check cases and acceptance checks shared
//! by the integration tests. The oracles never call the crate's kernels.

#![allow(dead_code)]

pub mod suites;

use ci2p_core::tensor::{Activation, ParamStore, Rng, Tape, Tensor, Var};
use ci2p_core::Result;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Uniform in `[lo, hi]` but at least `gap` away from every point in `kinks`.
pub fn rand_avoiding(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.uniform_in(lo, hi);
        if kinks.iter().all(|k| (v - k).abs() >= gap) {
            break v;
        }
    })
}

/// Triple loop `a[m,k] · b[k,n]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Direct grouped cross-correlation. Returns `(data, hout, wout)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cig = cin / groups;
    let cog = cout / groups;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let g = co / cog;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cig {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[((g * cig + ci) * h + iy as usize) * w + ix as usize];
                            s += xv * wt[((co * cig + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// `exp(x - max) / Σ exp(x - max)` in 64-bit.
pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-token attention with explicit loops: `q_i·k_j/√d`, softmax over
/// `j`, weighted sum of `v_j`, heads concatenated, output projection.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    wqkv: &[f64],
    bqkv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let proj = |i: usize, col: usize| -> f64 {
        bqkv[col] + (0..d).map(|p| x[i * d + p] * wqkv[p * 3 * d + col]).sum::<f64>()
    };
    let hd = d / heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..hd)
                        .map(|c| proj(i, h * hd + c) * proj(j, d + h * hd + c))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let a = softmax_oracle(&scores);
            for c in 0..hd {
                cat[i * d + h * hd + c] = (0..n).map(|j| a[j] * proj(j, 2 * d + h * hd + c)).sum();
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = bo[j] + (0..d).map(|p| cat[i * d + p] * wo[p * d + j]).sum::<f64>();
        }
    }
    out
}

/// Random attention parameters under `prefix` (`qkv.weight`, `qkv.bias`,
/// `proj.weight`, `proj.bias`).
pub fn attention_store(rng: &mut Rng, prefix: &str, d: usize) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, shape) in [
        ("qkv.weight", vec![d, 3 * d]),
        ("qkv.bias", vec![3 * d]),
        ("proj.weight", vec![d, d]),
        ("proj.bias", vec![d]),
    ] {
        s.insert(format!("{prefix}{n}"), rand_tensor(rng, &shape, -0.8, 0.8), false)
            .unwrap();
    }
    s
}

type Loss = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// A differentiable scalar function of one tensor, evaluated at `point`.
pub struct GradCase {
    pub name: &'static str,
    pub point: Tensor<f64>,
    pub f: Loss,
}

/// `Σ r ∘ v` with fixed random weights `r`, so every output coordinate
/// contributes a distinct amount.
fn wsum(t: &mut Tape<f64>, v: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = t.constant(r.clone().reshape(t.shape(v))?);
    let p = t.mul(v, r)?;
    Ok(t.sum(p))
}

macro_rules! case {
    ($cases:ident, $rng:ident, $name:expr, $point:expr, $out_len:expr, |$t:ident, $x:ident| $body:expr) => {{
        let point = $point;
        let weights = rand_tensor(&mut $rng, &[$out_len], -1.0, 1.0);
        $cases.push(GradCase {
            name: $name,
            point,
            f: Box::new(move |$t: &mut Tape<f64>, $x: Var| {
                let out: Var = $body?;
                wsum($t, out, &weights)
            }),
        });
    }};
}

/// Every differentiable tape op (and each differentiable input of
/// multi-input ops) at seeded random points of at most 64 elements.
/// Points stay clear of activation and clamp kinks so central differences
/// are valid.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = Rng::new(seed);
    let mut cases: Vec<GradCase> = Vec::new();

    let c34 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let pos34 = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let row4 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let c52 = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let c35 = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);

    let k = c34.clone();
    case!(cases, rng, "add.lhs", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.add(x, c)
    });
    let k = c34.clone();
    case!(cases, rng, "add.rhs", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.add(c, x)
    });
    let k = c34.clone();
    case!(cases, rng, "sub.lhs", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.sub(x, c)
    });
    let k = c34.clone();
    case!(cases, rng, "sub.rhs", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.sub(c, x)
    });
    let k = c34.clone();
    case!(cases, rng, "mul", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.mul(x, c)
    });
    case!(cases, rng, "mul.self", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| t.mul(x, x));
    let k = pos34.clone();
    case!(cases, rng, "div.num", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.div(x, c)
    });
    let k = c34.clone();
    case!(cases, rng, "div.den", rand_tensor(&mut rng, &[3, 4], 0.5, 2.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.div(c, x)
    });
    case!(cases, rng, "scale", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        Ok::<_, ci2p_core::Error>(t.scale(x, -1.7))
    });
    let k = row4.clone();
    case!(cases, rng, "add_row.matrix", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.add_row(x, c)
    });
    let k = c34.clone();
    case!(cases, rng, "add_row.row", rand_tensor(&mut rng, &[4], -1.0, 1.0), 12, |t, x| {
        let c = t.constant(k.clone());
        t.add_row(c, x)
    });
    let k = c52.clone();
    case!(cases, rng, "matmul.lhs", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0), 6, |t, x| {
        let c = t.constant(k.clone());
        t.matmul(x, c)
    });
    let k = c35.clone();
    case!(cases, rng, "matmul.rhs", rand_tensor(&mut rng, &[5, 2], -1.0, 1.0), 6, |t, x| {
        let c = t.constant(k.clone());
        t.matmul(c, x)
    });
    case!(cases, rng, "transpose", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0), 15, |t, x| t.transpose(x));
    case!(cases, rng, "reshape", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 12, |t, x| t.reshape(x, &[2, 6]));
    case!(cases, rng, "slice_cols", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0), 6, |t, x| t.slice_cols(x, 1, 2));
    let k = c35.clone();
    case!(cases, rng, "concat_cols", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), 42, |t, x| {
        let c = t.constant(k.clone());
        t.concat_cols(&[c, x, c])
    });

    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let xin = rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let (kw, kb) = (w.clone(), b.clone());
    case!(cases, rng, "conv2d.input", rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0), 27, |t, x| {
        let (w, b) = (t.constant(kw.clone()), t.constant(kb.clone()));
        t.conv2d(x, w, Some(b), 2, 1, 1)
    });
    let (kx, kb) = (xin.clone(), b.clone());
    case!(cases, rng, "conv2d.weight", rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5), 27, |t, w| {
        let (x, b) = (t.constant(kx.clone()), t.constant(kb.clone()));
        t.conv2d(x, w, Some(b), 2, 1, 1)
    });
    let (kx, kw) = (xin.clone(), w.clone());
    case!(cases, rng, "conv2d.bias", rand_tensor(&mut rng, &[3], -0.5, 0.5), 27, |t, b| {
        let (x, w) = (t.constant(kx.clone()), t.constant(kw.clone()));
        t.conv2d(x, w, Some(b), 2, 1, 1)
    });
    let dw = rand_tensor(&mut rng, &[4, 1, 3, 3], -0.5, 0.5);
    case!(cases, rng, "conv2d.depthwise", rand_tensor(&mut rng, &[4, 4, 4], -1.0, 1.0), 16, |t, x| {
        let w = t.constant(dw.clone());
        t.conv2d(x, w, None, 2, 1, 4)
    });
    let tw = rand_tensor(&mut rng, &[2, 3, 3, 3], -0.5, 0.5);
    let tb = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let tx = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let (kw, kb) = (tw.clone(), tb.clone());
    case!(cases, rng, "conv_transpose2d.input", rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0), 108, |t, x| {
        let (w, b) = (t.constant(kw.clone()), t.constant(kb.clone()));
        t.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    });
    let (kx, kb) = (tx.clone(), tb.clone());
    case!(cases, rng, "conv_transpose2d.weight", rand_tensor(&mut rng, &[2, 3, 3, 3], -0.5, 0.5), 108, |t, w| {
        let (x, b) = (t.constant(kx.clone()), t.constant(kb.clone()));
        t.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    });
    let (kx, kw) = (tx.clone(), tw.clone());
    case!(cases, rng, "conv_transpose2d.bias", rand_tensor(&mut rng, &[3], -0.5, 0.5), 108, |t, b| {
        let (x, w) = (t.constant(kx.clone()), t.constant(kw.clone()));
        t.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    });

    case!(cases, rng, "gelu", rand_tensor(&mut rng, &[16], -3.0, 3.0), 16, |t, x| {
        Ok::<_, ci2p_core::Error>(t.activation(x, Activation::Gelu))
    });
    case!(cases, rng, "relu6", rand_avoiding(&mut rng, &[16], -2.0, 8.0, &[0.0, 6.0], 1e-3), 16, |t, x| {
        Ok::<_, ci2p_core::Error>(t.activation(x, Activation::Relu6))
    });
    case!(cases, rng, "identity", rand_tensor(&mut rng, &[8], -2.0, 2.0), 8, |t, x| {
        Ok::<_, ci2p_core::Error>(t.activation(x, Activation::None))
    });
    case!(cases, rng, "sqrt", rand_tensor(&mut rng, &[12], 0.2, 3.0), 12, |t, x| {
        Ok::<_, ci2p_core::Error>(t.sqrt(x))
    });

    let g = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let be = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    let lx = rand_tensor(&mut rng, &[4, 6], -2.0, 2.0);
    let (kg, kb) = (g.clone(), be.clone());
    case!(cases, rng, "layernorm.input", rand_tensor(&mut rng, &[4, 6], -2.0, 2.0), 24, |t, x| {
        let (g, b) = (t.constant(kg.clone()), t.constant(kb.clone()));
        t.layernorm(x, g, b, 1e-6)
    });
    let (kx, kb) = (lx.clone(), be.clone());
    case!(cases, rng, "layernorm.gamma", rand_tensor(&mut rng, &[6], 0.5, 1.5), 24, |t, g| {
        let (x, b) = (t.constant(kx.clone()), t.constant(kb.clone()));
        t.layernorm(x, g, b, 1e-6)
    });
    let (kx, kg) = (lx.clone(), g.clone());
    case!(cases, rng, "layernorm.beta", rand_tensor(&mut rng, &[6], -0.5, 0.5), 24, |t, b| {
        let (x, g) = (t.constant(kx.clone()), t.constant(kg.clone()));
        t.layernorm(x, g, b, 1e-6)
    });
    case!(cases, rng, "softmax", rand_tensor(&mut rng, &[3, 5], -2.0, 2.0), 15, |t, x| {
        Ok::<_, ci2p_core::Error>(t.softmax(x))
    });
    case!(cases, rng, "mean_rows", rand_tensor(&mut rng, &[4, 3], -1.0, 1.0), 3, |t, x| t.mean_rows(x));
    case!(cases, rng, "sum", rand_tensor(&mut rng, &[7], -1.0, 1.0), 1, |t, x| {
        Ok::<_, ci2p_core::Error>(t.sum(x))
    });
    case!(cases, rng, "mean", rand_tensor(&mut rng, &[7], -1.0, 1.0), 1, |t, x| {
        Ok::<_, ci2p_core::Error>(t.mean(x))
    });
    let k = rand_tensor(&mut rng, &[10], -1.0, 1.0);
    case!(cases, rng, "mse", rand_tensor(&mut rng, &[10], -1.0, 1.0), 1, |t, x| {
        let c = t.constant(k.clone());
        t.mse(x, c)
    });
    case!(cases, rng, "cross_entropy", rand_tensor(&mut rng, &[5], -2.0, 2.0), 1, |t, x| t.cross_entropy(x, 3));
    case!(cases, rng, "clamp", rand_avoiding(&mut rng, &[16], -1.0, 2.0, &[0.0, 1.0], 1e-3), 16, |t, x| {
        Ok::<_, ci2p_core::Error>(t.clamp(x, 0.0, 1.0))
    });
    case!(cases, rng, "lower_bound", rand_tensor(&mut rng, &[8], 0.1, 2.0), 8, |t, x| {
        Ok::<_, ci2p_core::Error>(t.lower_bound(x, 0.05))
    });

    let mean = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let ls = rand_tensor(&mut rng, &[2], -0.5, 1.0);
    let ly = rand_tensor(&mut rng, &[2, 2, 3], -2.0, 2.0);
    let (km, kl) = (mean.clone(), ls.clone());
    case!(cases, rng, "logistic_rate.y", rand_tensor(&mut rng, &[2, 2, 3], -2.0, 2.0), 1, |t, y| {
        let (m, l) = (t.constant(km.clone()), t.constant(kl.clone()));
        t.logistic_rate(y, m, l, 48)
    });
    let (ky, kl) = (ly.clone(), ls.clone());
    case!(cases, rng, "logistic_rate.mean", rand_tensor(&mut rng, &[2], -0.5, 0.5), 1, |t, m| {
        let (y, l) = (t.constant(ky.clone()), t.constant(kl.clone()));
        t.logistic_rate(y, m, l, 48)
    });
    let (ky, km) = (ly.clone(), mean.clone());
    case!(cases, rng, "logistic_rate.log_scale", rand_tensor(&mut rng, &[2], -0.5, 1.0), 1, |t, l| {
        let (y, m) = (t.constant(ky.clone()), t.constant(km.clone()));
        t.logistic_rate(y, m, l, 48)
    });
    cases
}
