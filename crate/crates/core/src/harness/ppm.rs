//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Decodes a P6 image into `[3, H, W]` with values `byte / 255`. `path` is
/// only used in error messages.
pub fn decode_ppm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |msg: &str| Error::data(path, msg.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("PPM header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad(&format!("unsupported image format '{}', expected binary PPM (P6)", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("invalid PPM {what} '{s}'")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(bad(&format!("unsupported PPM maxval {maxval}, only 255 is accepted")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("truncated PPM header"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() < 3 * w * h {
        return Err(bad(&format!(
            "PPM raster has {} bytes, {w}x{h} needs {}",
            raster.len(),
            3 * w * h
        )));
    }
    let plane = w * h;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::of(raster[3 * p + c] as f64 / 255.0)
    }))
}

/// Encodes `[3, H, W]` values in `[0, 1]` as P6; values are clamped and
/// rounded to the nearest byte.
pub fn encode_ppm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, got {:?}", img.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = img.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let v = d[ch * plane + p].as_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Places images of equal height next to each other.
pub fn side_by_side<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, h, _) = images[0].dims3()?;
    let mut widths = Vec::new();
    for img in images {
        let (c, ih, iw) = img.dims3()?;
        if c != 3 || ih != h {
            return Err(Error::dim(format!(
                "side-by-side needs [3, {h}, _] images, got {:?}",
                img.shape()
            )));
        }
        widths.push(iw);
    }
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[3, h, total]);
    let mut x0 = 0;
    for (img, &iw) in images.iter().zip(&widths) {
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * iw..][..iw];
                out.data_mut()[(c * h + y) * total + x0..][..iw].copy_from_slice(src);
            }
        }
        x0 += iw;
    }
    Ok(out)
}
