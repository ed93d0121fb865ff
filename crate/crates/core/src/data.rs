//! Synthetic multi-organ images and the on-disk dataset format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic "CDDS" | version u32 | n u64 | classes u32 | height u32 | width u32 | channels u32 | dtype u8
//! per sample: id_len u32 | id utf-8 | image f32[channels·h·w] | mask u8[h·w] | crc32 u32
//! ```
//!
//! The checksum covers every byte of the sample record before it.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask;

const MAGIC: &[u8; 4] = b"CDDS";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[channels, h, w]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[h, w]` class labels.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.pixels();
        for s in &self.samples {
            if s.image.len() != self.channels * hw || s.mask.len() != hw {
                return Err(Error::Shape(format!("sample {} does not match {}x{}x{}", s.id, self.channels, self.height, self.width)));
            }
            if let Some(&l) = s.mask.iter().find(|&&l| l as usize >= self.classes) {
                return Err(Error::Format(format!("sample {}: label {l} outside {} classes", s.id, self.classes)));
            }
        }
        Ok(())
    }

    /// Stacks the chosen samples into an image batch and a `{0,1}` one-hot mask batch.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut img = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
            img.extend_from_slice(&s.image);
            labels.push(s.mask.clone());
        }
        let image = Tensor::from_vec(img, (indices.len(), c, h, w), device)?.to_dtype(dtype)?;
        let onehot = mask::one_hot(&labels, self.classes, h, w, dtype, device)?;
        Ok((image, onehot))
    }

    /// Pixel count per class over the whole dataset.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for s in &self.samples {
            for &l in &s.mask {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// `presence[i][c]` is true when sample `i` has any pixel of class `c`.
    pub fn presence(&self) -> Vec<Vec<bool>> {
        self.samples
            .iter()
            .map(|s| {
                let mut p = vec![false; self.classes];
                for &l in &s.mask {
                    p[l as usize] = true;
                }
                p
            })
            .collect()
    }
}

/// Per-class pixel frequencies summing to one.
pub fn class_frequencies(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Invalid("class frequencies of an empty dataset".into()));
    }
    let counts = ds.class_counts();
    let total: u64 = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Probability that the last foreground class appears in a sample.
    pub rare_rate: f64,
    /// Height and width must be multiples of this (the model's total stride).
    pub multiple_of: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 200,
            classes: 4,
            height: 64,
            width: 64,
            seed: 0,
            rare_rate: 0.2,
            multiple_of: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.classes < 2 {
            out.push(format!("data.classes must be >= 2, got {}", self.classes));
        }
        if self.classes > 255 {
            out.push(format!("data.classes must fit in a byte, got {}", self.classes));
        }
        let m = self.multiple_of.max(1);
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            out.push(format!("data size {}x{} must be a positive multiple of {m}", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.rare_rate) {
            out.push(format!("data.rare_rate must lie in [0, 1], got {}", self.rare_rate));
        }
        out
    }
}

/// Mean intensity of each class; background sits lowest.
fn class_intensity(class: usize, classes: usize) -> f32 {
    if class == 0 {
        0.15
    } else {
        0.15 + 0.75 * class as f32 / (classes - 1) as f32
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let scale = h.min(w) as f32 / 64.0;
        let a = rng.random_range(10.0..20.0) * scale;
        let b = rng.random_range(10.0..20.0) * scale;
        let margin = 0.5 * a.min(b);
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        Self {
            cy: rng.random_range(margin..h as f32 - margin),
            cx: rng.random_range(margin..w as f32 - margin),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius; the ellipse is `r ≤ 1`.
    fn radius(&self, y: f32, x: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Draws `spec.n` samples with one ellipse per foreground class; later classes
/// paint over earlier ones. The last class is kept with probability `rare_rate`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, 0.04).expect("valid std");
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut image = vec![class_intensity(0, k); h * w];
        let mut labels = vec![0u8; h * w];
        // low-frequency background texture
        let (fy, fx, ph): (f32, f32, f32) = (
            rng.random_range(0.05..0.2),
            rng.random_range(0.05..0.2),
            rng.random_range(0.0..std::f32::consts::TAU),
        );
        for y in 0..h {
            for x in 0..w {
                image[y * w + x] += 0.05 * ((y as f32 * fy + x as f32 * fx + ph).sin());
            }
        }
        for c in 1..k {
            let ellipse = Ellipse::random(&mut rng, h, w);
            let present = c + 1 < k || k == 2 || rng.random_bool(spec.rare_rate);
            if !present {
                continue;
            }
            let level = class_intensity(c, k) + rng.random_range(-0.03..0.03);
            for y in 0..h {
                for x in 0..w {
                    let r = ellipse.radius(y as f32 + 0.5, x as f32 + 0.5);
                    // soft edge over roughly one pixel
                    let alpha = 1.0 / (1.0 + ((r - 1.0) * ellipse.a.min(ellipse.b) * 1.5).exp());
                    let p = y * w + x;
                    image[p] += alpha * (level - image[p]);
                    if r <= 1.0 {
                        labels[p] = c as u8;
                    }
                }
            }
        }
        for v in image.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        samples.push(Sample {
            id: format!("synth-{}-{i:05}", spec.seed),
            image,
            mask: labels,
        });
    }
    Ok(Dataset {
        classes: k,
        channels: 1,
        height: h,
        width: w,
        samples,
    })
}

/// Train and validation sets drawn from disjoint seed streams.
pub fn synthetic_split(spec: &SyntheticSpec, n_val: usize) -> Result<(Dataset, Dataset)> {
    let train = generate_synthetic(spec)?;
    let val = generate_synthetic(&SyntheticSpec {
        n: n_val,
        seed: spec.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        ..spec.clone()
    })?;
    Ok((train, val))
}

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + s.id.len() + 4 * s.image.len() + s.mask.len());
    buf.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.id.as_bytes());
    for v in &s.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&s.mask);
    buf
}

pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> Result<()> {
    ds.validate()?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(ds.len() as u64).to_le_bytes())?;
    for v in [ds.classes, ds.height, ds.width, ds.channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&[DTYPE_F32])?;
    for s in &ds.samples {
        let rec = encode_sample(s);
        out.write_all(&rec)?;
        out.write_all(&crc32fast::hash(&rec).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated input while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_dataset(mut input: impl Read) -> Result<Dataset> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = c.u64("sample count")? as usize;
    let classes = c.u32("classes")? as usize;
    let height = c.u32("height")? as usize;
    let width = c.u32("width")? as usize;
    let channels = c.u32("channels")? as usize;
    let dtype = c.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let hw = height * width;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let start = c.pos;
        let id_len = c.u32("id length")? as usize;
        let id = String::from_utf8(c.take(id_len, "id")?.to_vec())
            .map_err(|_| Error::Format(format!("sample {i}: id is not utf-8")))?;
        let image = c
            .take(4 * channels * hw, "image")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mask = c.take(hw, "mask")?.to_vec();
        let stored = c.u32("checksum")?;
        if crc32fast::hash(&buf[start..c.pos - 4]) != stored {
            return Err(Error::Format(format!("sample {i}: checksum mismatch")));
        }
        samples.push(Sample { id, image, mask });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last sample", buf.len() - c.pos)));
    }
    let ds = Dataset {
        classes,
        channels,
        height,
        width,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n: 6,
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = small();
        assert_eq!(a, small());
        let b = generate_synthetic(&SyntheticSpec {
            n: 6,
            height: 32,
            width: 32,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.samples[0].image, b.samples[0].image);
    }

    #[test]
    fn labels_and_intensities_in_range() {
        let ds = small();
        for s in &ds.samples {
            assert!(s.mask.iter().all(|&l| l < 4));
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn indivisible_size_rejected() {
        let spec = SyntheticSpec {
            height: 40,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::Format(_))));

        assert!(matches!(read_dataset(&buf[..buf.len() - 3]), Err(Error::Format(_))));

        let mut flipped = buf.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0xff;
        assert!(matches!(read_dataset(flipped.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            classes: 3,
            channels: 1,
            height: 4,
            width: 4,
            samples: vec![],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn frequencies_of_hand_built_dataset() {
        let ds = Dataset {
            classes: 2,
            channels: 1,
            height: 2,
            width: 2,
            samples: vec![Sample {
                id: "a".into(),
                image: vec![0.0; 4],
                mask: vec![0, 0, 1, 0],
            }],
        };
        assert_eq!(class_frequencies(&ds).unwrap(), vec![0.75, 0.25]);
    }
}
