//! Labeled image datasets: synthetic generation, directory loading and
//! augmentation.

use std::f64::consts::PI;
use std::path::Path;

use super::ppm;
use crate::error::{Error, Result};
use crate::tensor::{splitmix, Real, Rng, Tensor};

/// Fraction of each class held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

const SPLIT_SALT: u64 = 0x5EED_5A17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item<T> {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub items: Vec<Item<T>>,
    pub class_count: usize,
}

impl<T: Real> Dataset<T> {
    /// Builds a dataset and assigns the train/val split.
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract("one label per image is required".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {l} out of range for {class_count} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::dim("all images in a dataset must share one shape"));
            }
        }
        let splits = assign_splits(&labels);
        let items = images
            .into_iter()
            .zip(labels)
            .zip(splits)
            .map(|((image, label), split)| Item { image, label, split })
            .collect();
        Ok(Self { items, class_count })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Item<T>> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Shape of every image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|it| it.image.shape())
    }
}

/// Stratified split: within each class, items are ordered by a fixed hash
/// of their dataset index and the first `round(0.2 · n)` go to validation.
pub fn assign_splits(labels: &[usize]) -> Vec<Split> {
    let mut out = vec![Split::Train; labels.len()];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.sort_by_key(|&i| (splitmix(i as u64 ^ SPLIT_SALT), i));
        let n_val = (idx.len() as f64 * VAL_FRACTION).round() as usize;
        for &i in &idx[..n_val] {
            out[i] = Split::Val;
        }
    }
    out
}

fn inside_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    // vertices are counter-clockwise, so inside means left of every edge
    (0..verts.len()).all(|i| {
        let (ax, ay) = verts[i];
        let (bx, by) = verts[(i + 1) % verts.len()];
        (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
    })
}

/// One image of class `class`: a filled regular `(class + 2)`-gon at random
/// position, size and rotation over a textured noise background.
pub fn render_shape(class: usize, size: usize, rng: &mut Rng) -> Tensor<f64> {
    let s = size as f64;
    let sides = class + 2;
    let cx = s * rng.uniform_in(0.4, 0.6);
    let cy = s * rng.uniform_in(0.4, 0.6);
    let r = s * rng.uniform_in(0.28, 0.38);
    let rot = rng.uniform_in(0.0, 2.0 * PI);
    let verts: Vec<(f64, f64)> = (0..sides)
        .map(|k| {
            let a = rot + 2.0 * PI * k as f64 / sides as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    let bg: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.05, 0.4)).collect();
    let fg: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.6, 0.95)).collect();
    let (fx, fy, phase) = (
        rng.uniform_in(0.05, 0.3),
        rng.uniform_in(0.05, 0.3),
        rng.uniform_in(0.0, 2.0 * PI),
    );
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = inside_polygon(px, py, &verts);
            let wave = 0.1 * (fx * px + fy * py + phase).sin();
            for c in 0..3 {
                let noise = rng.uniform_in(-0.06, 0.06);
                let base = if inside { fg[c] } else { bg[c] + wave };
                img.data_mut()[c * plane + y * size + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `classes × per_class` synthetic images, class-major, with an exact
/// stratified 80/20 split. Image `i` is drawn from `Rng::new(seed).derive(i)`.
pub fn gen_synthetic<T: Real>(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("image size {size} must be a positive multiple of 32")));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let root = Rng::new(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for k in 0..per_class {
            let i = c * per_class + k;
            images.push(render_shape(c, size, &mut root.derive(i as u64)).cast());
            labels.push(c);
        }
    }
    Dataset::new(images, labels, classes)
}

/// Loads `dir/manifest.csv` (header `path,label`, paths relative to `dir`)
/// and the P6 images it lists. The split is assigned as in
/// [`gen_synthetic`], so a saved synthetic dataset reloads identically.
pub fn load_dataset<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    load_dataset_with_classes(dir, None)
}

/// [`load_dataset`] that also rejects labels `>= classes`.
pub fn load_dataset_with_classes<T: Real>(dir: &Path, classes: Option<usize>) -> Result<Dataset<T>> {
    let manifest = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::data(&manifest, e.to_string()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "path,label" => {}
        _ => return Err(Error::data(&manifest, "missing 'path,label' header")),
    }
    let mut images: Vec<Tensor<T>> = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        let (p, l) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::data(&manifest, format!("line {}: expected path,label", n + 1)))?;
        let label: usize = l
            .trim()
            .parse()
            .map_err(|_| Error::data(&manifest, format!("line {}: bad label '{}'", n + 1, l.trim())))?;
        let path = dir.join(p.trim());
        if let Some(c) = classes.filter(|&c| label >= c) {
            return Err(Error::data(&path, format!("label {label} out of range for {c} classes")));
        }
        let img = ppm::read_ppm::<T>(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::data(&path, source.to_string()),
            other => other,
        })?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(Error::data(
                    &path,
                    format!("image is {:?}, dataset images are {:?}", img.shape(), first.shape()),
                ));
            }
        }
        images.push(img);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::data(&manifest, "manifest lists no images"));
    }
    let class_count = classes.unwrap_or(labels.iter().max().expect("non-empty") + 1);
    Dataset::new(images, labels, class_count)
}

/// Writes `dir/manifest.csv` plus one `img_NNNNN.ppm` per item.
pub fn save_dataset<T: Real>(dataset: &Dataset<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("path,label\n");
    for (i, it) in dataset.items.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        ppm::write_ppm(&dir.join(&name), &it.image)?;
        manifest.push_str(&format!("{name},{}\n", it.label));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Horizontal mirror of `[C, H, W]`.
pub fn flip_horizontal<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, w) = x.dims3()?;
    let src = x.data();
    Ok(Tensor::from_fn(x.shape(), |i| {
        let col = i % w;
        src[i - col + (w - 1 - col)]
    }))
}

/// Mirrors `x` with probability `p`; draws exactly one value from `rng`.
pub fn augment_flip<T: Real>(x: &Tensor<T>, rng: &mut Rng, p: f64) -> Result<Tensor<T>> {
    if rng.bernoulli(p) {
        flip_horizontal(x)
    } else {
        Ok(x.clone())
    }
}
