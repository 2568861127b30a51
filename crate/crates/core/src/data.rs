//! Image datasets: CIFAR-10 binary batches, a seeded synthetic stand-in,
//! per-channel normalization, annotation CSVs, deterministic splits, and the
//! on-disk dataset container shared with the attack pipeline.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::seed;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PLANE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape::rgb(CIFAR_SIDE, CIFAR_SIDE);

    pub const fn rgb(height: usize, width: usize) -> Self {
        ImageShape {
            channels: 3,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// One image in channel-major (C, H, W) layout with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub label: usize,
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
}

impl ImageSample {
    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
    pub shape: ImageShape,
    pub source: DataSource,
}

impl LabeledDataset {
    /// Build a dataset, checking label range, pixel range, shape and id order.
    pub fn new(
        samples: Vec<ImageSample>,
        class_names: Vec<String>,
        shape: ImageShape,
        source: DataSource,
    ) -> Result<Self> {
        let k = class_names.len();
        let mut prev: Option<u64> = None;
        for s in &samples {
            if s.label >= k {
                return Err(Error::Index {
                    label: s.label,
                    classes: k,
                });
            }
            if s.shape != shape || s.pixels.len() != shape.len() {
                return Err(Error::Shape {
                    expected: shape.len(),
                    got: s.pixels.len(),
                });
            }
            if !s.in_unit_range() {
                return Err(Error::input(format!("sample {} has pixels outside [0,1]", s.id)));
            }
            if prev.is_some_and(|p| p >= s.id) {
                return Err(Error::input(format!(
                    "sample ids must be strictly increasing (at id {})",
                    s.id
                )));
            }
            prev = Some(s.id);
        }
        Ok(LabeledDataset {
            samples,
            class_names,
            shape,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Subset by positional indices; the result keeps id order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        LabeledDataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            shape: self.shape,
            source: self.source,
        }
    }
}

/// Parse a CIFAR-10 binary batch (one label byte + 3072 pixel bytes per record).
pub fn parse_cifar10_batch(raw: &[u8]) -> Result<LabeledDataset> {
    if raw.is_empty() || !raw.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 batch length {} is not a positive multiple of {CIFAR_RECORD}",
            raw.len()
        )));
    }
    let samples = raw
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label as usize >= CIFAR10_CLASSES.len() {
                return Err(Error::CorruptRecord { index, label });
            }
            Ok(ImageSample {
                id: index as u64,
                label: label as usize,
                shape: ImageShape::CIFAR,
                pixels: rec[1..].iter().map(|&b| b as f32 / 255.0).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        samples,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        shape: ImageShape::CIFAR,
        source: DataSource::Cifar10,
    })
}

/// Serialize to CIFAR-10 binary layout. Pixels are quantized with
/// `round(p * 255)`, which inverts the parser exactly.
pub fn to_cifar10_bytes(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    if dataset.shape != ImageShape::CIFAR {
        return Err(Error::Shape {
            expected: ImageShape::CIFAR.len(),
            got: dataset.shape.len(),
        });
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for s in &dataset.samples {
        if s.label >= CIFAR10_CLASSES.len() {
            return Err(Error::Index {
                label: s.label,
                classes: CIFAR10_CLASSES.len(),
            });
        }
        out.push(s.label as u8);
        out.extend(s.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    parse_cifar10_batch(&container::read_file(path)?)
}

/// Per-class drawing parameters for the synthetic generator.
#[derive(Debug, Clone, Copy)]
struct ClassPattern {
    color: [f32; 3],
    shape: PatternShape,
    center: (f32, f32),
}

#[derive(Debug, Clone, Copy)]
enum PatternShape {
    Disc,
    HorizontalBar,
    VerticalBar,
    DiagonalBar,
}

impl ClassPattern {
    fn for_class(class: usize, k: usize) -> Self {
        let hue = class as f32 / k as f32;
        let shape = match class % 4 {
            0 => PatternShape::Disc,
            1 => PatternShape::HorizontalBar,
            2 => PatternShape::VerticalBar,
            _ => PatternShape::DiagonalBar,
        };
        // Centers walk a 3x3 grid so neighbouring hues land in different places.
        let cell = (class * 4) % 9;
        let center = (0.3 + 0.2 * (cell % 3) as f32, 0.3 + 0.2 * (cell / 3) as f32);
        ClassPattern {
            color: hue_to_rgb(hue),
            shape,
            center,
        }
    }

    fn covers(&self, u: f32, v: f32, cx: f32, cy: f32, scale: f32) -> bool {
        let (du, dv) = (u - cx, v - cy);
        let half_w = 0.09 * scale;
        let half_len = 0.32 * scale;
        match self.shape {
            PatternShape::Disc => du * du + dv * dv <= (0.2 * scale).powi(2),
            PatternShape::HorizontalBar => dv.abs() <= half_w && du.abs() <= half_len,
            PatternShape::VerticalBar => du.abs() <= half_w && dv.abs() <= half_len,
            PatternShape::DiagonalBar => {
                let across = (du - dv).abs() / std::f32::consts::SQRT_2;
                let along = (du + dv).abs() / std::f32::consts::SQRT_2;
                across <= half_w && along <= half_len
            }
        }
    }
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // Pull toward mid-gray so noise has room on both sides.
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Appearance knobs for [`gen_synthetic_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticStyle {
    /// Blend of the class colour over the background inside the shape (1 = opaque).
    pub contrast: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        SyntheticStyle {
            contrast: 0.3,
            noise: 0.1,
        }
    }
}

/// Seeded synthetic dataset: each class draws a coloured shape at a
/// class-specific position (with per-sample jitter in position, size and
/// background) plus uniform pixel noise.
pub fn gen_synthetic(seed: u64, n: usize, k: usize, height: usize, width: usize) -> Result<LabeledDataset> {
    gen_synthetic_with(seed, n, k, height, width, &SyntheticStyle::default())
}

pub fn gen_synthetic_with(
    seed: u64,
    n: usize,
    k: usize,
    height: usize,
    width: usize,
    style: &SyntheticStyle,
) -> Result<LabeledDataset> {
    if k < 2 {
        return Err(Error::config(format!("synthetic data needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::config(format!("synthetic data needs n >= k (n = {n}, k = {k})")));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("image height and width must be positive"));
    }
    if !(0.0..=1.0).contains(&style.contrast) || !(0.0..=0.5).contains(&style.noise) {
        return Err(Error::config(format!("invalid synthetic style {style:?}")));
    }
    let (contrast, amp) = (style.contrast as f32, style.noise as f32);
    let shape = ImageShape::rgb(height, width);
    let patterns: Vec<ClassPattern> = (0..k).map(|c| ClassPattern::for_class(c, k)).collect();
    let samples = (0..n)
        .map(|i| {
            let label = i % k;
            let mut rng = seed::rng(seed, &[i as u64]);
            let pat = &patterns[label];
            let cx = pat.center.0 + rng.gen_range(-0.06..=0.06);
            let cy = pat.center.1 + rng.gen_range(-0.06..=0.06);
            let scale = rng.gen_range(0.85..=1.15);
            let background: f32 = rng.gen_range(0.3..=0.6);
            let mut pixels = vec![0.0f32; shape.len()];
            for r in 0..height {
                let v = (r as f32 + 0.5) / height as f32;
                for c in 0..width {
                    let u = (c as f32 + 0.5) / width as f32;
                    let inside = pat.covers(u, v, cx, cy, scale);
                    for ch in 0..3 {
                        let base = if inside {
                            background + contrast * (pat.color[ch] - background)
                        } else {
                            background
                        };
                        let noise = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
                        pixels[ch * shape.plane() + r * width + c] = (base + noise).clamp(0.0, 1.0);
                    }
                }
            }
            ImageSample {
                id: i as u64,
                label,
                shape,
                pixels,
            }
        })
        .collect();
    let class_names = (0..k).map(|c| format!("class_{c}")).collect();
    LabeledDataset::new(samples, class_names, shape, DataSource::Synthetic)
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        let n = Normalization { mean, std };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::config(
                "normalization mean/std must be nonempty and equal length",
            ));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("normalization std must be positive, got {s}")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("normalization mean must be finite"));
        }
        Ok(())
    }

    fn check(&self, shape: ImageShape, len: usize) -> Result<()> {
        if shape.channels != self.mean.len() {
            return Err(Error::Shape {
                expected: self.mean.len(),
                got: shape.channels,
            });
        }
        if len != shape.len() {
            return Err(Error::Shape {
                expected: shape.len(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, shape: ImageShape, pixels: &[f32]) -> Result<Vec<f32>> {
        self.check(shape, pixels.len())?;
        let plane = shape.plane();
        Ok(pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i / plane;
                (p - self.mean[c]) / self.std[c]
            })
            .collect())
    }

    pub fn denormalize(&self, shape: ImageShape, values: &[f32]) -> Result<Vec<f32>> {
        self.check(shape, values.len())?;
        let plane = shape.plane();
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                v * self.std[c] + self.mean[c]
            })
            .collect())
    }
}

pub fn normalize(sample: &ImageSample, mean: &[f32], std: &[f32]) -> Result<Vec<f32>> {
    Normalization::new(mean.to_vec(), std.to_vec())?.normalize(sample.shape, &sample.pixels)
}

pub fn denormalize(shape: ImageShape, values: &[f32], mean: &[f32], std: &[f32]) -> Result<Vec<f32>> {
    Normalization::new(mean.to_vec(), std.to_vec())?.denormalize(shape, values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub filename: String,
    pub label_index: usize,
    pub label_text: String,
}

pub fn image_filename(id: u64) -> String {
    format!("img_{id:06}.png")
}

pub fn annotation_records(dataset: &LabeledDataset) -> Vec<AnnotationRecord> {
    dataset
        .samples
        .iter()
        .map(|s| AnnotationRecord {
            filename: image_filename(s.id),
            label_index: s.label,
            label_text: dataset.class_names[s.label].clone(),
        })
        .collect()
}

const ANNOTATION_HEADER: [&str; 3] = ["filename", "label_index", "label_text"];

pub fn write_annotations(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(ANNOTATION_HEADER).map_err(csv_err)?;
    for r in annotation_records(dataset) {
        w.write_record([r.filename.as_str(), &r.label_index.to_string(), &r.label_text])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    container::write_file(path, &bytes)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let bytes = container::read_file(path)?;
    parse_annotations(&bytes)
}

pub fn parse_annotations(bytes: &[u8]) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = rdr.records();
    let parse_err = |line: u64, message: String| Error::Parse { line, message };
    match records.next() {
        Some(Ok(h)) if h.iter().eq(ANNOTATION_HEADER.iter().copied()) => {}
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        _ => {
            return Err(parse_err(
                1,
                format!("missing header `{}`", ANNOTATION_HEADER.join(",")),
            ))
        }
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let label_index = rec[1]
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("label_index `{}` is not an integer", &rec[1])))?;
        out.push(AnnotationRecord {
            filename: rec[0].to_string(),
            label_index,
            label_text: rec[2].to_string(),
        });
    }
    Ok(out)
}

/// Seeded train/validation split; `|train| = floor(fraction * N)`.
pub fn split(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::input("cannot split an empty dataset"));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[0x5917]));
    let n_train = (train_fraction * n as f64).floor() as usize;
    let (train, val) = order.split_at(n_train);
    Ok((dataset.select(train), dataset.select(val)))
}

/// Dataset plus per-sample provenance: which attack chain produced each image.
/// Clean samples carry the empty chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedDataset {
    pub dataset: LabeledDataset,
    /// Distinct chains, indexed by `chain_index`.
    pub chains: Vec<Vec<String>>,
    pub chain_index: Vec<u32>,
    /// Free-form generation metadata (attack config, mix, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TaggedMeta {
    class_names: Vec<String>,
    shape: ImageShape,
    source: DataSource,
    chains: Vec<Vec<String>>,
    count: usize,
    generation: serde_json::Value,
}

pub const DATASET_MAGIC: [u8; 4] = *b"AADV";

impl TaggedDataset {
    pub fn clean(dataset: LabeledDataset) -> Self {
        let n = dataset.len();
        TaggedDataset {
            dataset,
            chains: vec![Vec::new()],
            chain_index: vec![0; n],
            meta: serde_json::Value::Null,
        }
    }

    /// Assemble from samples and their chains, interning the chain table in
    /// first-seen order.
    pub fn from_parts(
        samples: Vec<(ImageSample, Vec<String>)>,
        class_names: Vec<String>,
        shape: ImageShape,
        source: DataSource,
        meta: serde_json::Value,
    ) -> Result<Self> {
        let mut chains: Vec<Vec<String>> = Vec::new();
        let mut chain_index = Vec::with_capacity(samples.len());
        let mut imgs = Vec::with_capacity(samples.len());
        for (s, chain) in samples {
            let idx = match chains.iter().position(|c| *c == chain) {
                Some(i) => i,
                None => {
                    chains.push(chain);
                    chains.len() - 1
                }
            };
            chain_index.push(idx as u32);
            imgs.push(s);
        }
        Ok(TaggedDataset {
            dataset: LabeledDataset::new(imgs, class_names, shape, source)?,
            chains,
            chain_index,
            meta,
        })
    }

    pub fn chain_of(&self, i: usize) -> &[String] {
        &self.chains[self.chain_index[i] as usize]
    }

    pub fn is_adversarial(&self, i: usize) -> bool {
        !self.chain_of(i).is_empty()
    }

    /// Container bytes: metadata JSON, then per record
    /// `id u64 | label u32 | chain u32 | pixels f32 * len`, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ds = &self.dataset;
        let meta = TaggedMeta {
            class_names: ds.class_names.clone(),
            shape: ds.shape,
            source: ds.source,
            chains: self.chains.clone(),
            count: ds.len(),
            generation: self.meta.clone(),
        };
        let mut blob = Vec::with_capacity(ds.len() * (16 + 4 * ds.shape.len()));
        for (s, &c) in ds.samples.iter().zip(&self.chain_index) {
            blob.extend_from_slice(&s.id.to_le_bytes());
            blob.extend_from_slice(&(s.label as u32).to_le_bytes());
            blob.extend_from_slice(&c.to_le_bytes());
            container::put_f32s(&mut blob, &s.pixels);
        }
        container::encode(DATASET_MAGIC, &serde_json::to_value(meta)?, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(DATASET_MAGIC, bytes)?;
        let meta: TaggedMeta = serde_json::from_value(c.meta)?;
        let record = 16 + 4 * meta.shape.len();
        container::expect_len(&c.blob, record * meta.count)?;
        let mut samples = Vec::with_capacity(meta.count);
        let mut chain_index = Vec::with_capacity(meta.count);
        for rec in c.blob.chunks_exact(record) {
            let id = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let label = u32::from_le_bytes(rec[8..12].try_into().unwrap()) as usize;
            let chain = u32::from_le_bytes(rec[12..16].try_into().unwrap());
            if chain as usize >= meta.chains.len() {
                return Err(Error::Format(format!("record {id}: chain index {chain} out of range")));
            }
            chain_index.push(chain);
            samples.push(ImageSample {
                id,
                label,
                shape: meta.shape,
                pixels: container::take_f32s(&rec[16..]),
            });
        }
        Ok(TaggedDataset {
            dataset: LabeledDataset::new(samples, meta.class_names, meta.shape, meta.source)?,
            chains: meta.chains,
            chain_index,
            meta: meta.generation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Ids present in a dataset, for coverage checks.
pub fn id_set(dataset: &LabeledDataset) -> BTreeSet<u64> {
    dataset.samples.iter().map(|s| s.id).collect()
}
