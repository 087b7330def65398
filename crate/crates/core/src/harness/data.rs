//! Labelled image datasets: IDX ingestion and a procedural two-task
//! generator for transfer experiments.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::stream_seed;
use crate::tensor::{ChannelStack, Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ChannelStack>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<ChannelStack>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!("{} images for {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dimension(format!("label {l} out of range for {classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|x| x.d() != first.d() || x.channel_shape() != first.channel_shape()) {
                return Err(Error::Dimension("images differ in shape".into()));
            }
        }
        Ok(Dataset { images, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Channel count and per-channel shape of the images.
    pub fn image_format(&self) -> Option<(usize, &Shape)> {
        self.images.first().map(|x| (x.d(), x.channel_shape()))
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format { offset: at as u64, msg: format!("truncated {what}") })
}

/// Parses an IDX3 image file: big-endian header, then unsigned bytes scaled
/// to `[0, 1]`. Returns `(rows, cols, images)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad image magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format { offset: 8, msg: "zero image extent".into() });
    }
    let px = rows * cols;
    let expected = 16 + n * px;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            msg: format!("image file is {} bytes, header implies {expected}", bytes.len()),
        });
    }
    let images = bytes[16..].chunks_exact(px).map(|c| c.iter().map(|&b| b as f64 / 255.0).collect()).collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: bytes.len().min(8 + n) as u64,
            msg: format!("label file is {} bytes, header implies {}", bytes.len(), 8 + n),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair as single-channel images. The class count
/// is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if pixels.len() != labels.len() {
        return Err(Error::Format { offset: 4, msg: format!("{} images but {} labels", pixels.len(), labels.len()) });
    }
    let shape = Shape::new(vec![rows, cols])?;
    let images = pixels
        .into_iter()
        .map(|p| ChannelStack::new(vec![Tensor::from_parts(shape.clone(), p)]))
        .collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, classes, split)
}

/// Encodes single-channel byte images and their labels as IDX bytes.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    images.iter().for_each(|i| img.extend_from_slice(i));
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Source task.
    A,
    /// Task A passed through [`shift_b`].
    BShifted,
}

pub const SYNTH_CLASSES: usize = 8;
pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_CHANNELS: usize = 2;

/// One task-A image of `class`. The class index packs three binary
/// factors: bit 0 picks a filled disk or a ring in channel 0, bit 1 the
/// stripe period (2.5 or 4.5 pixels) and bit 2 the stripe orientation
/// (horizontal or vertical) of the texture in channel 1. Position, radius,
/// intensity and stripe phase are nuisances, and both channels carry a
/// little uniform noise. Every factor survives a horizontal flip, so flip
/// augmentation preserves labels.
fn render_a(class: usize, rng: &mut ChaCha8Rng) -> [Vec<f64>; 2] {
    let ring = class & 1 == 1;
    let period = if class & 2 == 0 { 2.5 } else { 4.5 };
    let vertical = class & 4 != 0;
    let side = SYNTH_SIDE as f64;
    let cx = side / 2.0 - 0.5 + rng.gen_range(-1.5..1.5);
    let cy = side / 2.0 - 0.5 + rng.gen_range(-1.5..1.5);
    let r = rng.gen_range(4.0..6.5);
    let level = rng.gen_range(0.6..1.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut ch0 = vec![0.0; SYNTH_SIDE * SYNTH_SIDE];
    let mut ch1 = vec![0.0; SYNTH_SIDE * SYNTH_SIDE];
    for yi in 0..SYNTH_SIDE {
        for xi in 0..SYNTH_SIDE {
            let (x, y) = (xi as f64, yi as f64);
            let i = yi * SYNTH_SIDE + xi;
            let rad = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let inside = rad <= r && (!ring || rad >= r - 1.5);
            let u = if vertical { x } else { y };
            ch0[i] = if inside { level } else { 0.0 } + (rng.gen::<f64>() - 0.5) * 0.1;
            ch1[i] = 0.5 + 0.4 * (2.0 * PI * u / period + phase).cos() + (rng.gen::<f64>() - 0.5) * 0.1;
        }
    }
    [ch0, ch1]
}

/// The appearance shift that turns a task-A image into a task-B image:
/// channel 0 loses contrast (`v -> 0.3 + 0.4 v`), channel 1 is folded about
/// its midpoint (`v -> |2v - 1|`, which doubles the stripe frequency), and a
/// diagonal background grating of amplitude 0.25 and period 3 is added to
/// both channels.
pub fn shift_b(image: &ChannelStack) -> ChannelStack {
    let chans = image
        .channels()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let side = c.shape().dims()[1];
            let data = c
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (x, y) = ((i % side) as f64, (i / side) as f64);
                    let remapped = if k == 0 { 0.3 + 0.4 * v } else { (2.0 * v - 1.0).abs() };
                    remapped + 0.25 * (2.0 * PI * (x + y) / 3.0).sin()
                })
                .collect();
            Tensor::from_parts(c.shape().clone(), data)
        })
        .collect();
    ChannelStack::new(chans).expect("same channel layout")
}

/// `n` procedurally rendered 16x16 two-channel images over 8 classes,
/// assigned round-robin so classes are balanced. Deterministic in
/// `(task, n, seed)`; task B is exactly task A with [`shift_b`] applied.
pub fn gen_synthetic(task: Task, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n < 2 * SYNTH_CLASSES {
        return Err(Error::Config(format!("need at least {} samples, got {n}", 2 * SYNTH_CLASSES)));
    }
    let shape = Shape::new(vec![SYNTH_SIDE, SYNTH_SIDE])?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0xda7a]));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTH_CLASSES;
        let [c0, c1] = render_a(class, &mut rng);
        let img =
            ChannelStack::new(vec![Tensor::from_parts(shape.clone(), c0), Tensor::from_parts(shape.clone(), c1)])?;
        images.push(match task {
            Task::A => img,
            Task::BShifted => shift_b(&img),
        });
        labels.push(class);
    }
    Dataset::new(images, labels, SYNTH_CLASSES, split)
}

/// Mirror image along the last axis.
pub fn hflip(image: &ChannelStack) -> ChannelStack {
    let chans = image
        .channels()
        .iter()
        .map(|c| {
            let w = *c.shape().dims().last().unwrap_or(&1);
            let mut data = c.data().to_vec();
            data.chunks_mut(w).for_each(|row| row.reverse());
            Tensor::from_parts(c.shape().clone(), data)
        })
        .collect();
    ChannelStack::new(chans).expect("same channel layout")
}
