//! Synthetic moving-blob clips.
//!
//! Every clip is a Gaussian blob on uniform background noise. The class is
//! the blob's motion: 0 moves right, 1 moves down, 2 orbits clockwise and 3
//! orbits counter-clockwise. Positions live on the torus, so each frame's
//! blob position is uniform whatever the class; a single frame carries no
//! label information and only the motion across frames separates classes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{put_f64, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GKDD";
pub const VERSION: u32 = 1;
pub const MAX_CLASSES: usize = 4;
/// Orbit angular step per frame.
pub const ORBIT_STEP: f64 = PI / 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Blob displacement per frame in pixels, drawn uniformly per clip.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Background noise is uniform on `[0, noise]`.
    pub noise: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 4,
            train_per_class: 50,
            val_per_class: 25,
            frames: 8,
            height: 16,
            width: 16,
            speed_min: 2.0,
            speed_max: 3.0,
            noise: 0.15,
            blob_sigma: 1.5,
            blob_amplitude: 0.8,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 4 {
            return bad("frames must be at least 4 for motion to be observable");
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return bad("num_classes must be between 2 and 4");
        }
        if self.height < 4 || self.width < 4 {
            return bad("height and width must be at least 4");
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return bad("each split needs at least one clip per class");
        }
        let finite = [self.speed_min, self.speed_max, self.noise, self.blob_sigma, self.blob_amplitude];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("dataset floats must be finite");
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min {
            return bad("speed range must satisfy 0 <= speed_min <= speed_max");
        }
        if self.noise < 0.0 || self.blob_sigma <= 0.0 || self.blob_amplitude < 0.0 {
            return bad("noise and blob_amplitude must be >= 0 and blob_sigma > 0");
        }
        Ok(())
    }

    fn clip_len(&self) -> usize {
        self.frames * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Usage(format!("unknown split `{s}` (expected train or val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    /// `(1, T, H, W)`, values in `[0, 1]`.
    pub clip: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ClipSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Independent generator for one clip: the ChaCha stream id encodes split and index.
fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((split.stream() << 32) | index as u64);
    r
}

/// Blob centre at frame `t` for class `label`.
fn trajectory(label: usize, t: f64, start: (f64, f64), speed: f64, phase: f64) -> (f64, f64) {
    let (y0, x0) = start;
    match label {
        0 => (y0, x0 + speed * t),
        1 => (y0 + speed * t, x0),
        _ => {
            // Chord length between consecutive frames equals `speed`.
            let radius = speed / (2.0 * (ORBIT_STEP / 2.0).sin());
            let dir = if label == 2 { 1.0 } else { -1.0 };
            let a = phase + dir * ORBIT_STEP * t;
            // Rows grow downward, so increasing angle turns clockwise on screen.
            (y0 + radius * a.sin(), x0 + radius * a.cos())
        }
    }
}

fn wrapped(d: f64, extent: f64) -> f64 {
    let d = d.rem_euclid(extent);
    d.min(extent - d)
}

fn render(spec: &DatasetSpec, label: usize, r: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let start = (r.random_range(0.0..h), r.random_range(0.0..w));
    let speed = if spec.speed_max > spec.speed_min {
        r.random_range(spec.speed_min..spec.speed_max)
    } else {
        spec.speed_min
    };
    let phase = r.random_range(0.0..2.0 * PI);
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut data = Vec::with_capacity(spec.clip_len());
    for t in 0..spec.frames {
        let (cy, cx) = trajectory(label, t as f64, start, speed, phase);
        for y in 0..spec.height {
            let dy = wrapped(y as f64 - cy, h);
            for x in 0..spec.width {
                let dx = wrapped(x as f64 - cx, w);
                let bg = if spec.noise > 0.0 { r.random_range(0.0..spec.noise) } else { 0.0 };
                let v = bg + spec.blob_amplitude * (-(dy * dy + dx * dx) * inv).exp();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([1, spec.frames, spec.height, spec.width], data).expect("length matches spec")
}

fn generate_split(spec: &DatasetSpec, split: Split, per_class: usize) -> Vec<ClipSample> {
    (0..per_class * spec.num_classes)
        .map(|i| {
            let label = i % spec.num_classes;
            let mut r = clip_rng(spec.seed, split, i);
            ClipSample {
                clip: render(spec, label, &mut r),
                label,
            }
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train, spec.train_per_class),
        val: generate_split(spec, Split::Val, spec.val_per_class),
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let s = &ds.spec;
    let mut out = Vec::with_capacity(64 + (ds.train.len() + ds.val.len()) * (4 + 8 * s.clip_len()));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [
        (s.num_classes, "num_classes"),
        (s.train_per_class, "train_per_class"),
        (s.val_per_class, "val_per_class"),
        (s.frames, "frames"),
        (s.height, "height"),
        (s.width, "width"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    put_u32(&mut out, s.seed as u32);
    put_u32(&mut out, (s.seed >> 32) as u32);
    for v in [s.speed_min, s.speed_max, s.noise, s.blob_sigma, s.blob_amplitude] {
        put_f64(&mut out, v);
    }
    for sample in ds.train.iter().chain(&ds.val) {
        if sample.clip.shape() != [1, s.frames, s.height, s.width] {
            return Err(Error::Data(format!("clip shape {:?} disagrees with spec", sample.clip.shape())));
        }
        put_u32(&mut out, to_u32(sample.label, "label")?);
        for &v in sample.clip.data() {
            put_f64(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported dataset version {version}"));
    }
    let mut ints = [0usize; 6];
    for (slot, what) in ints.iter_mut().zip(["num_classes", "train_per_class", "val_per_class", "frames", "height", "width"]) {
        *slot = r.u32(what)? as usize;
    }
    let lo = r.u32("seed")? as u64;
    let hi = r.u32("seed")? as u64;
    let spec_at = r.offset();
    let spec = DatasetSpec {
        num_classes: ints[0],
        train_per_class: ints[1],
        val_per_class: ints[2],
        frames: ints[3],
        height: ints[4],
        width: ints[5],
        seed: lo | (hi << 32),
        speed_min: r.f64("speed_min")?,
        speed_max: r.f64("speed_max")?,
        noise: r.f64("noise")?,
        blob_sigma: r.f64("blob_sigma")?,
        blob_amplitude: r.f64("blob_amplitude")?,
    };
    if let Err(e) = spec.validate() {
        return Err(Error::Format {
            offset: spec_at,
            msg: format!("invalid spec block: {e}"),
        });
    }
    let mut read_split = |n: usize| -> Result<Vec<ClipSample>> {
        (0..n)
            .map(|_| {
                let at = r.offset();
                let label = r.u32("label")? as usize;
                if label >= spec.num_classes {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("label {label} outside [0, {})", spec.num_classes),
                    });
                }
                let data = r.f64s(spec.clip_len(), "clip")?;
                Ok(ClipSample {
                    clip: Tensor::new([1, spec.frames, spec.height, spec.width], data)?,
                    label,
                })
            })
            .collect()
    };
    let train = read_split(spec.train_per_class * spec.num_classes)?;
    let val = read_split(spec.val_per_class * spec.num_classes)?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after the last sample", r.remaining()));
    }
    Ok(Dataset { spec, train, val })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// One mini-batch: clips stacked to `(B, 1, T, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clips: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Stack the given samples into one batch.
pub fn stack(samples: &[ClipSample], indices: &[usize]) -> Result<Batch> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::Data("empty batch".into()))?)
        .ok_or_else(|| Error::Data("batch index out of range".into()))?;
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(first.clip.shape());
    let mut data = Vec::with_capacity(indices.len() * first.clip.numel());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples.get(i).ok_or_else(|| Error::Data("batch index out of range".into()))?;
        data.extend_from_slice(s.clip.data());
        labels.push(s.label);
    }
    Ok(Batch {
        clips: Tensor::new(shape, data)?,
        labels,
        indices: indices.to_vec(),
    })
}

/// Seeded shuffle, then consecutive batches; the last may be short.
pub fn batches(samples: &[ClipSample], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(|c| stack(samples, c)).collect()
}

/// Batches in dataset order, for evaluation.
pub fn sequential_batches(samples: &[ClipSample], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    order.chunks(batch_size).map(|c| stack(samples, c)).collect()
}

fn frame_rows(split: &[ClipSample], d: usize) -> Vec<(&[f64], usize)> {
    split
        .iter()
        .flat_map(|c| c.clip.data().chunks_exact(d).map(move |f| (f, c.label)))
        .collect()
}

/// Per-frame softmax-regression probe on raw pixels.
///
/// Every frame of every training clip becomes one example labelled with its
/// clip's class; the probe is fit by full-batch gradient descent and scored
/// on the individual frames of the validation clips. Because frames are
/// taken one at a time, temporal order is invisible to it.
pub fn spatial_probe(ds: &Dataset, epochs: usize, lr: f64) -> f64 {
    let s = &ds.spec;
    let d = s.height * s.width;
    let k = s.num_classes;
    let train = frame_rows(&ds.train, d);
    let val = frame_rows(&ds.val, d);
    let mut w = vec![0.0; k * (d + 1)];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
                row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    let mut grad = vec![0.0; w.len()];
    for _ in 0..epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &(x, y) in &train {
            let z = scores(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / sum - if c == y { 1.0 } else { 0.0 };
                let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                for (g, xi) in row[..d].iter_mut().zip(x) {
                    *g += delta * xi;
                }
                row[d] += delta;
            }
        }
        let scale = lr / train.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= scale * g);
    }
    let correct = val
        .iter()
        .filter(|(x, y)| {
            let z = scores(&w, x);
            let best = (0..k).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == *y
        })
        .count();
    correct as f64 / val.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            train_per_class: 3,
            val_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn orbit_chord_equals_speed() {
        for label in [2, 3] {
            let a = trajectory(label, 0.0, (5.0, 5.0), 1.7, 0.3);
            let b = trajectory(label, 1.0, (5.0, 5.0), 1.7, 0.3);
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!((d - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn orbits_turn_opposite_ways() {
        // Cross product of successive displacements, in (x, down) screen orientation.
        let turn = |label| {
            let p: Vec<_> = (0..3).map(|t| trajectory(label, t as f64, (8.0, 8.0), 1.5, 0.0)).collect();
            let (d1, d2) = ((p[1].1 - p[0].1, p[1].0 - p[0].0), (p[2].1 - p[1].1, p[2].0 - p[1].0));
            d1.0 * d2.1 - d1.1 * d2.0
        };
        assert!(turn(2) > 0.0, "clockwise on screen");
        assert!(turn(3) < 0.0);
    }

    #[test]
    fn wrapped_distance() {
        assert_eq!(wrapped(15.0, 16.0), 1.0);
        assert_eq!(wrapped(-3.0, 16.0), 3.0);
        assert_eq!(wrapped(8.0, 16.0), 8.0);
    }

    #[test]
    fn interleaved_labels_are_balanced() {
        let ds = generate_dataset(&small()).unwrap();
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.label == k).count(), 3);
            assert_eq!(ds.val.iter().filter(|s| s.label == k).count(), 2);
        }
    }

    #[test]
    fn splits_use_distinct_streams() {
        let ds = generate_dataset(&small()).unwrap();
        assert_ne!(ds.train[0].clip, ds.val[0].clip);
    }

    #[test]
    fn short_clips_rejected() {
        let spec = DatasetSpec { frames: 3, ..small() };
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }
}
