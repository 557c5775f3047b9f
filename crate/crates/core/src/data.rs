//! Datasets: deterministic synthetic blobs and the IDX image/label format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const IDX_IMAGES_MAGIC: u32 = 2051;

/// Inputs in `[0, 1]^d` with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub name: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, _) = inputs
            .dims2()
            .ok_or_else(|| Error::Contract("dataset inputs must be [n, d]".into()))?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        if let Some(i) = inputs.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "input entry {i} lies outside [0, 1]"
            )));
        }
        let name = name.into();
        Ok(Self {
            inputs,
            labels,
            classes,
            provenance: name.clone(),
            name,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows `idx` as a new dataset with the same metadata.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: self.name.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }
}

/// Class-conditional uniform blobs.
///
/// Each class mean has every coordinate at `0.5 ± margin/2` with an
/// independent random sign, so distinct means are `margin` apart in ℓ∞.
/// Points add `Unif[-spread, spread]^d` jitter and are clamped to `[0, 1]`.
/// Rows are grouped by class.
pub fn synth_blobs(
    d: usize,
    classes: usize,
    per_class: usize,
    margin: f64,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_mixture(d, classes, 1, per_class, margin, spread, seed)
}

/// Like [`synth_blobs`] but every class is a mixture of `modes` blobs,
/// visited round-robin, so no linear rule separates the classes.
pub fn synth_mixture(
    d: usize,
    classes: usize,
    modes: usize,
    per_class: usize,
    margin: f64,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(margin >= 0.0) || !(spread >= 0.0) {
        return Err(Error::Config(
            "margin and spread must be non-negative".into(),
        ));
    }
    if margin > 1.0 {
        return Err(Error::Config(format!(
            "margin {margin} does not fit in the unit cube"
        )));
    }
    if d == 0 || classes < 2 || modes == 0 || per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs d >= 1, classes >= 2, modes >= 1, per_class >= 1".into(),
        ));
    }
    let means = classes * modes;
    if margin > 0.0 && d < 64 && means as u64 > 1u64 << d {
        return Err(Error::Config(format!(
            "{means} distinct sign patterns do not exist in dimension {d}"
        )));
    }
    let mut rng = stream(seed, &[purpose::DATA]);
    let mut patterns: Vec<Vec<bool>> = Vec::with_capacity(means);
    while patterns.len() < means {
        let p: Vec<bool> = (0..d).map(|_| rng.random::<bool>()).collect();
        if margin == 0.0 || !patterns.contains(&p) {
            patterns.push(p);
        }
    }
    let half = margin / 2.0;
    let mut data = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for i in 0..per_class {
            for &up in &patterns[c * modes + i % modes] {
                let mean = if up { 0.5 + half } else { 0.5 - half };
                let jitter = spread * (2.0 * rng.random::<f64>() - 1.0);
                data.push((mean + jitter).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let inputs = Tensor::new(vec![classes * per_class, d], data)?;
    let name = if modes == 1 {
        "synth_blobs"
    } else {
        "synth_mixture"
    };
    let mut ds = Dataset::new(inputs, labels, classes, name)?;
    ds.provenance = format!(
        "{name}(d={d}, classes={classes}, modes={modes}, per_class={per_class}, margin={margin}, spread={spread}, seed={seed})"
    );
    Ok(ds)
}

/// MNIST-like images on a `side × side` grid.
///
/// Each class owns a template of three random thick strokes. A sample is its
/// class template shifted by up to `shift` pixels per axis. Every pixel
/// moves `Unif[0, spread]` away from its ideal 0 or 1.
pub fn synth_strokes(
    side: usize,
    classes: usize,
    per_class: usize,
    shift: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spread) {
        return Err(Error::Config("spread must lie in [0, 1]".into()));
    }
    if side < 8 || classes < 2 || per_class == 0 {
        return Err(Error::Config(
            "stroke data needs side >= 8, classes >= 2, per_class >= 1".into(),
        ));
    }
    let mut rng = stream(seed, &[purpose::DATA]);
    let lo = side as f64 * 0.15;
    let hi = side as f64 * 0.85;
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut t = vec![false; side * side];
        for _ in 0..3 {
            let (x0, y0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let (x1, y1) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            for k in 0..=4 * side {
                let s = k as f64 / (4 * side) as f64;
                let (x, y) = (x0 + s * (x1 - x0), y0 + s * (y1 - y0));
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (c, r) = (x as usize + dx, y as usize + dy);
                    if c < side && r < side {
                        t[r * side + c] = true;
                    }
                }
            }
        }
        templates.push(t);
    }
    let d = side * side;
    let span = shift as i64;
    let mut data = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let dx = rng.random_range(-span..=span);
            let dy = rng.random_range(-span..=span);
            for r in 0..side as i64 {
                for col in 0..side as i64 {
                    let (sr, sc) = (r - dy, col - dx);
                    let on = sr >= 0
                        && sc >= 0
                        && sr < side as i64
                        && sc < side as i64
                        && t[(sr * side as i64 + sc) as usize];
                    let noise = spread * rng.random::<f64>();
                    let v = if on { 1.0 - noise } else { noise };
                    data.push(v);
                }
            }
            labels.push(c);
        }
    }
    let inputs = Tensor::new(vec![classes * per_class, d], data)?;
    let mut ds = Dataset::new(inputs, labels, classes, "synth_strokes")?;
    ds.provenance = format!(
        "synth_strokes(side={side}, classes={classes}, per_class={per_class}, shift={shift}, spread={spread}, seed={seed})"
    );
    Ok(ds)
}

/// A shuffled prefix of `n` rows.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Config(format!(
            "subset size {n} must lie in 1..={}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, &[purpose::DATA, 1]));
    idx.truncate(n);
    let mut out = ds.select(&idx);
    let counts: BTreeMap<usize, usize> = out
        .class_counts()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0)
        .collect();
    out.provenance = format!(
        "{} | subset(n={n}, seed={seed}) class counts {counts:?}",
        ds.provenance
    );
    Ok(out)
}

/// Splits off the first `n_test` rows of a seeded permutation as a test set.
pub fn split(ds: &Dataset, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_test == 0 || n_test >= ds.len() {
        return Err(Error::Config(format!(
            "test split {n_test} must lie in 1..{}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, &[purpose::DATA, 2]));
    let test = ds.select(&idx[..n_test]);
    let train = ds.select(&idx[n_test..]);
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn parse(bytes: &[u8], path: &Path, expected_magic: u32) -> Result<(Self, usize)> {
        let be = |o: usize| -> Result<u32> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
                .ok_or(Error::Truncated {
                    path: path.to_path_buf(),
                    got: bytes.len(),
                    expected: o + 4,
                })
        };
        let magic = be(0)?;
        if magic != expected_magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
                expected: expected_magic,
            });
        }
        let ndims = if magic == IDX_IMAGES_MAGIC { 3 } else { 1 };
        let dims = (0..ndims)
            .map(|k| be(4 + 4 * k))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self { magic, dims }, 4 + 4 * ndims))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.magic.to_be_bytes().to_vec();
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn read_payload(path: &Path, magic: u32) -> Result<(IdxHeader, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let (header, offset) = IdxHeader::parse(&bytes, path, magic)?;
    let need: usize = header.dims.iter().map(|&d| d as usize).product();
    let got = bytes.len() - offset;
    if got < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got,
            expected: need,
        });
    }
    Ok((header, bytes[offset..offset + need].to_vec()))
}

/// Reads an image file (magic 2051) and a label file (magic 2049); pixels
/// are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (ih, pixels) = read_payload(images, IDX_IMAGES_MAGIC)?;
    let (lh, raw_labels) = read_payload(labels, IDX_LABELS_MAGIC)?;
    let n = ih.dims[0] as usize;
    if n != lh.dims[0] as usize {
        return Err(Error::CountMismatch {
            images: n,
            labels: lh.dims[0] as usize,
        });
    }
    let d = ih.dims[1] as usize * ih.dims[2] as usize;
    let inputs = Tensor::new(
        vec![n, d],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let ys: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = ys.iter().max().map_or(2, |m| (m + 1).max(2));
    let mut ds = Dataset::new(inputs, ys, classes, "idx")?;
    ds.provenance = format!("idx({}, {})", images.display(), labels.display());
    Ok(ds)
}

/// Writes inputs quantized to `round(255·x)` as a `rows × cols` image file
/// plus a label file.
pub fn write_idx(
    ds: &Dataset,
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::Config(format!(
            "{rows}x{cols} images do not match input dimension {}",
            ds.dim()
        )));
    }
    if ds.classes() > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let n = ds.len() as u32;
    let mut img = IdxHeader {
        magic: IDX_IMAGES_MAGIC,
        dims: vec![n, rows as u32, cols as u32],
    }
    .encode();
    img.extend(
        ds.inputs()
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8),
    );
    let mut lab = IdxHeader {
        magic: IDX_LABELS_MAGIC,
        dims: vec![n],
    }
    .encode();
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}
