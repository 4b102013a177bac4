//! Deterministic synthetic shape datasets.
//!
//! Classification: one of {square, disc, plus, stripes} per image. Segmentation:
//! several squares and discs over background, labelled per pixel.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Task;
use crate::nn::derive_seed;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDK1";
const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const VAL_STREAM: u64 = 0x0076_616c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub image_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            image_size: 16,
            num_train: 1000,
            num_val: 500,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::domain("dataset sizes must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::domain(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::domain(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// Row-major `H*W` class ids.
    Mask(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `1 x H x W`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: Tensor,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub image_size: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        num_classes(self.task)
    }

    /// Stacks the selected samples into an `N x 1 x H x W` batch plus flat labels
    /// (one per sample, or `H*W` per sample for masks).
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let mut x = Tensor::stack(&images)?;
        if x.rank() == 3 {
            x = x.reshape(&[indices.len(), 1, self.image_size, self.image_size])?;
        }
        let mut labels = Vec::new();
        for &i in indices {
            match &self.samples[i].label {
                Label::Class(c) => labels.push(*c),
                Label::Mask(m) => labels.extend_from_slice(m),
            }
        }
        Ok((x, labels))
    }
}

pub fn num_classes(task: Task) -> usize {
    match task {
        Task::Classify => 4,
        Task::Segment => 3,
    }
}

/// Generates `(train, val)` from disjoint seed streams; each sample has its own derived seed.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let make = |stream: u64, count: usize| Dataset {
        task: spec.task,
        image_size: spec.image_size,
        samples: (0..count)
            .map(|i| {
                let seed = derive_seed(derive_seed(spec.seed, stream), i as u64);
                gen_sample(spec, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .collect(),
    };
    Ok((make(TRAIN_STREAM, spec.num_train), make(VAL_STREAM, spec.num_val)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Disc,
    Plus,
    Stripes,
}

/// Pixel membership of a shape whose bounding box is `size x size` at `(top, left)`.
fn covers(shape: Shape, size: usize, top: usize, left: usize, y: usize, x: usize) -> bool {
    if y < top || x < left || y >= top + size || x >= left + size {
        return false;
    }
    let (dy, dx) = (y - top, x - left);
    match shape {
        Shape::Square => true,
        Shape::Disc => {
            let r = size as f64 / 2.0;
            let (cy, cx) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
            cy * cy + cx * cx <= r * r
        }
        Shape::Plus => {
            let bar = (size / 3).max(1);
            let lo = (size - bar) / 2;
            let hi = lo + bar;
            (lo..hi).contains(&dy) || (lo..hi).contains(&dx)
        }
        Shape::Stripes => dy % 2 == 0,
    }
}

fn gen_sample(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let s = spec.image_size;
    let background = rng.gen_range(0.0..0.35);
    let mut image = vec![background; s * s];
    let mut paint =
        |rng: &mut ChaCha8Rng, shape: Shape, min: usize, max: usize, mask: Option<(&mut [usize], usize)>| {
            let size = rng.gen_range(min..=max.clamp(min, s));
            let top = rng.gen_range(0..=s - size);
            let left = rng.gen_range(0..=s - size);
            let fg = rng.gen_range(0.55..1.0);
            let mut mask = mask;
            for y in 0..s {
                for x in 0..s {
                    if covers(shape, size, top, left, y, x) {
                        image[y * s + x] = fg;
                        if let Some((m, id)) = mask.as_mut() {
                            m[y * s + x] = *id;
                        }
                    }
                }
            }
        };
    let label = match spec.task {
        Task::Classify => {
            let class = rng.gen_range(0..4);
            let shape = [Shape::Square, Shape::Disc, Shape::Plus, Shape::Stripes][class];
            paint(rng, shape, 5, s * 3 / 4, None);
            Label::Class(class)
        }
        Task::Segment => {
            let mut mask = vec![0usize; s * s];
            let count = rng.gen_range(1..=3);
            for _ in 0..count {
                let (shape, id) = if rng.gen_bool(0.5) {
                    (Shape::Square, 1)
                } else {
                    (Shape::Disc, 2)
                };
                paint(rng, shape, 4, s * 3 / 8, Some((&mut mask, id)));
            }
            Label::Mask(mask)
        }
    };
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        for v in &mut image {
            *v += noise.sample(rng);
        }
    }
    // clip, then round through f32 so dumps round-trip exactly
    for v in &mut image {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    SyntheticSample {
        image: Tensor::new(&[1, s, s], image).expect("image shape"),
        label,
    }
}

/// Shuffled batch index lists for one epoch; the last partial batch is kept.
pub fn batches(len: usize, batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::domain("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn task_id(task: Task) -> u32 {
    match task {
        Task::Classify => 0,
        Task::Segment => 1,
    }
}

/// Binary dump: `SDK1`, task id, count, image size (u32 LE), then per sample the
/// image as f32 LE followed by the u32 LE label(s).
pub fn write_dataset<W: Write>(mut w: W, set: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [task_id(set.task), set.len() as u32, set.image_size as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for sample in &set.samples {
        for &v in sample.image.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        match &sample.label {
            Label::Class(c) => w.write_all(&(*c as u32).to_le_bytes())?,
            Label::Mask(m) => {
                for &c in m {
                    w.write_all(&(c as u32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let task = match read_u32(&mut r)? {
        0 => Task::Classify,
        1 => Task::Segment,
        other => return Err(Error::Format(format!("unknown task id {other}"))),
    };
    let count = read_u32(&mut r)? as usize;
    let size = read_u32(&mut r)? as usize;
    let k = num_classes(task);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut image = Vec::with_capacity(size * size);
        for _ in 0..size * size {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            image.push(f32::from_le_bytes(b) as f64);
        }
        let n_labels = if task == Task::Classify { 1 } else { size * size };
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let c = read_u32(&mut r)? as usize;
            if c >= k {
                return Err(Error::Format(format!("label {c} out of range for {k} classes")));
            }
            labels.push(c);
        }
        let label = match task {
            Task::Classify => Label::Class(labels[0]),
            Task::Segment => Label::Mask(labels),
        };
        samples.push(SyntheticSample {
            image: Tensor::new(&[1, size, size], image)?,
            label,
        });
    }
    Ok(Dataset {
        task,
        image_size: size,
        samples,
    })
}
