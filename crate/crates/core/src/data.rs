//! Hyperspectral cubes, tiling and preprocessing, normalization, and the
//! synthetic generators used for desk-scale experiments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::filteradapt::FilterBank;
use crate::tensor::{read_tensor_body, write_tensor_body, Tensor};

const HSC_MAGIC: &[u8; 4] = b"HSC1";
const TLS_MAGIC: &[u8; 4] = b"TLS1";

/// A `C × H × W` image with an optional per-pixel label map (`-1` marks
/// unlabelled pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    data: Tensor,
    labels: Option<Vec<i32>>,
}

impl HyperCube {
    pub fn new(data: Tensor, labels: Option<Vec<i32>>) -> Result<Self> {
        if data.order() != 3 {
            return Err(Error::shape(format!("cube must be C×H×W, got {:?}", data.shape())));
        }
        if let Some(l) = &labels {
            let hw = data.shape()[1] * data.shape()[2];
            if l.len() != hw {
                return Err(Error::shape(format!("label map has {} entries, expected {hw}", l.len())));
            }
            if let Some(bad) = l.iter().find(|v| **v < -1) {
                return Err(Error::Data(format!("label {bad} below -1")));
            }
        }
        Ok(HyperCube { data, labels })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// HSC1: magic, `u32` channels/height/width, `u8` label flag, `f32`
    /// channel-major data, then an `i32` label plane when flagged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(HSC_MAGIC);
        for &d in self.data.shape() {
            w.u32(d as u32);
        }
        w.u8(u8::from(self.labels.is_some()));
        let f: Vec<f32> = self.data.data().iter().map(|v| *v as f32).collect();
        w.f32s(&f);
        if let Some(l) = &self.labels {
            l.iter().for_each(|v| w.i32(*v));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "HSC1");
        r.magic(HSC_MAGIC)?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims.contains(&0) {
            return Err(Error::Format(format!("HSC1 extents must be >= 1, got {dims:?}")));
        }
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("HSC1 label flag must be 0 or 1, got {f}"))),
        };
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Format("HSC1 extents overflow".into()))?;
        let plane = dims[1] * dims[2];
        r.require(n * 4 + if has_labels { plane * 4 } else { 0 })?;
        let data = r.f32s(n)?.into_iter().map(f64::from).collect();
        let labels = if has_labels {
            Some((0..plane).map(|_| r.i32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        r.finish()?;
        HyperCube::new(Tensor::new(dims.to_vec(), data)?, labels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    HyperCube::load(path)
}

/// Source coordinate and blend weight of output index `i` under
/// pixel-centre (align-corners = false) mapping.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Per-channel bilinear resize of a `C × H × W` tensor (align-corners =
/// false, edges clamped). Constants are preserved exactly.
pub fn bilinear_resize(x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    if x.order() != 3 || size.0 == 0 || size.1 == 0 {
        return Err(Error::shape(format!("cannot resize {:?} to {size:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == size {
        return Ok(x.clone());
    }
    let rows: Vec<_> = (0..size.0).map(|i| source_coord(i, h, size.0)).collect();
    let cols: Vec<_> = (0..size.1).map(|j| source_coord(j, w, size.1)).collect();
    let d = x.data();
    Ok(Tensor::from_fn(&[c, size.0, size.1], |i| {
        let (r0, r1, fy) = rows[i[1]];
        let (c0, c1, fx) = cols[i[2]];
        let at = |r: usize, col: usize| d[(i[0] * h + r) * w + col];
        let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
        let top = lerp(at(r0, c0), at(r0, c1), fx);
        let bottom = lerp(at(r1, c0), at(r1, c1), fx);
        lerp(top, bottom, fy)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::All => 0,
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::All),
            1 => Ok(Split::Train),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Equally shaped `C × h × w` tiles with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub stats: Option<Stats>,
}

impl TileSet {
    pub fn new(tiles: Vec<Tensor>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if tiles.len() != labels.len() {
            return Err(Error::Data(format!("{} tiles but {} labels", tiles.len(), labels.len())));
        }
        if let Some(first) = tiles.first() {
            if first.order() != 3 || tiles.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::shape("tiles must share one C×h×w shape"));
            }
        }
        Ok(TileSet {
            tiles,
            labels,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_shape(&self) -> Option<&[usize]> {
        self.tiles.first().map(Tensor::shape)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// TLS1: magic, split tag, tile count, stats (flag, channel count,
    /// means, stds), labels, then each tile as a tensor body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(TLS_MAGIC);
        w.u8(self.split.tag());
        w.usize(self.tiles.len());
        match &self.stats {
            Some(s) => {
                w.u8(1);
                w.usize(s.mean.len());
                w.f64s(&s.mean);
                w.f64s(&s.std);
            }
            None => w.u8(0),
        }
        self.labels.iter().for_each(|l| w.usize(*l));
        self.tiles.iter().for_each(|t| write_tensor_body(&mut w, t));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "TLS1");
        r.magic(TLS_MAGIC)?;
        let split = Split::from_tag(r.u8()?)?;
        let n = r.usize()?;
        let stats = match r.u8()? {
            0 => None,
            1 => {
                let c = r.usize()?;
                r.require(c.saturating_mul(16))?;
                Some(Stats {
                    mean: r.f64s(c)?,
                    std: r.f64s(c)?,
                })
            }
            f => return Err(Error::Format(format!("TLS1 stats flag must be 0 or 1, got {f}"))),
        };
        r.require(n.saturating_mul(8))?;
        let labels = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let tiles = (0..n).map(|_| read_tensor_body(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut set = TileSet::new(tiles, labels, split).map_err(|e| Error::Format(e.to_string()))?;
        set.stats = stats;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Number of tile positions along an axis of length `n`.
pub fn tile_positions(n: usize, tile: usize, stride: usize) -> usize {
    if n < tile || stride == 0 {
        0
    } else {
        (n - tile) / stride + 1
    }
}

/// Cuts `tile × tile` windows at offsets `0, stride, …` along both axes,
/// keeps those whose centre pixel (offset `tile / 2`) is labelled, and
/// resizes each to `resize_to × resize_to`.
pub fn tile_remote_sensing(cube: &HyperCube, tile: usize, stride: usize, resize_to: usize) -> Result<TileSet> {
    if tile == 0 || stride == 0 || resize_to == 0 {
        return Err(Error::Usage("tile, stride and resize must be >= 1".into()));
    }
    if cube.height() < tile || cube.width() < tile {
        return Err(Error::shape(format!(
            "tile {tile} larger than cube {}x{}",
            cube.height(),
            cube.width()
        )));
    }
    let labels = cube
        .labels()
        .ok_or_else(|| Error::Data("tiling needs a cube with a label plane".into()))?;
    let (c, w) = (cube.channels(), cube.width());
    let ny = tile_positions(cube.height(), tile, stride);
    let nx = tile_positions(w, tile, stride);
    let keep: Vec<(usize, usize, usize)> = (0..ny * nx)
        .filter_map(|p| {
            let (y, x) = ((p / nx) * stride, (p % nx) * stride);
            let l = labels[(y + tile / 2) * w + x + tile / 2];
            (l >= 0).then_some((y, x, l as usize))
        })
        .collect();
    let tiles = keep
        .par_iter()
        .map(|&(y, x, _)| {
            let crop = Tensor::from_fn(&[c, tile, tile], |i| cube.data.get(&[i[0], y + i[1], x + i[2]]));
            bilinear_resize(&crop, (resize_to, resize_to))
        })
        .collect::<Result<Vec<_>>>()?;
    TileSet::new(tiles, keep.into_iter().map(|k| k.2).collect(), Split::All)
}

/// Options of the near-range (single-object image) pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NearRange {
    /// Side of the centred square crop.
    pub crop: usize,
    pub resize_to: usize,
    /// Channels dropped from the start and the end of the spectrum.
    pub drop: (usize, usize),
    /// Zero padding added on every side after resizing.
    pub pad: usize,
}

/// Channel drop, centre crop, bilinear resize and zero padding. A label
/// plane, if present, follows the same geometry (nearest sample; padding
/// is unlabelled).
pub fn preprocess_nearrange(cube: &HyperCube, opts: &NearRange) -> Result<HyperCube> {
    let (c, h, w) = (cube.channels(), cube.height(), cube.width());
    if opts.crop == 0 || opts.crop > h.min(w) {
        return Err(Error::shape(format!("crop {} does not fit a {h}x{w} image", opts.crop)));
    }
    if opts.drop.0 + opts.drop.1 >= c {
        return Err(Error::shape(format!(
            "dropping {}+{} channels leaves none of {c}",
            opts.drop.0, opts.drop.1
        )));
    }
    if opts.resize_to == 0 {
        return Err(Error::Usage("resize target must be >= 1".into()));
    }
    let kept = c - opts.drop.0 - opts.drop.1;
    let (y0, x0) = ((h - opts.crop) / 2, (w - opts.crop) / 2);
    let cropped = Tensor::from_fn(&[kept, opts.crop, opts.crop], |i| {
        cube.data.get(&[i[0] + opts.drop.0, y0 + i[1], x0 + i[2]])
    });
    let s = opts.resize_to;
    let resized = bilinear_resize(&cropped, (s, s))?;
    let p = opts.pad;
    let side = s + 2 * p;
    let inside = |r: usize, col: usize| r >= p && r < p + s && col >= p && col < p + s;
    let data = Tensor::from_fn(&[kept, side, side], |i| {
        if inside(i[1], i[2]) {
            resized.get(&[i[0], i[1] - p, i[2] - p])
        } else {
            0.0
        }
    });
    let labels = cube.labels().map(|l| {
        let nearest = |i: usize| ((i as f64 + 0.5) * opts.crop as f64 / s as f64).floor() as usize;
        (0..side * side)
            .map(|k| {
                let (r, col) = (k / side, k % side);
                if inside(r, col) {
                    l[(y0 + nearest(r - p)) * w + x0 + nearest(col - p)]
                } else {
                    -1
                }
            })
            .collect()
    });
    HyperCube::new(data, labels)
}

/// Seeded tile-level split; the first `round(n · train_fraction)` tiles of
/// the shuffled order go to the training set.
pub fn split_tiles(set: &TileSet, train_fraction: f64, seed: u64) -> Result<(TileSet, TileSet)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Usage(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (set.len() as f64 * train_fraction).round() as usize;
    let pick = |idx: &[usize], split| {
        TileSet::new(
            idx.iter().map(|&i| set.tiles[i].clone()).collect(),
            idx.iter().map(|&i| set.labels[i]).collect(),
            split,
        )
    };
    Ok((pick(&order[..n_train], Split::Train)?, pick(&order[n_train..], Split::Test)?))
}

/// Channel statistics over all pixels of all tiles. Channels whose
/// standard deviation is below `1e-12` get a standard deviation of 1.
pub fn channel_stats(set: &TileSet) -> Result<Stats> {
    let shape = set
        .tile_shape()
        .ok_or_else(|| Error::Data("cannot compute statistics of an empty tile set".into()))?;
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let n = (plane * set.len()) as f64;
    let channel = |ch: usize| set.tiles.iter().flat_map(move |t| &t.data()[ch * plane..(ch + 1) * plane]);
    let mean: Vec<f64> = (0..c).map(|ch| channel(ch).sum::<f64>() / n).collect();
    let std = (0..c)
        .map(|ch| {
            let var = channel(ch).map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(Stats { mean, std })
}

/// Applies `(x − mean) / std` per channel and records the stats.
pub fn apply_stats(set: &mut TileSet, stats: &Stats) -> Result<()> {
    if let Some(shape) = set.tile_shape() {
        if shape[0] != stats.mean.len() {
            return Err(Error::shape(format!(
                "stats for {} channels applied to {}-channel tiles",
                stats.mean.len(),
                shape[0]
            )));
        }
        let plane = shape[1] * shape[2];
        set.tiles.par_iter_mut().for_each(|t| {
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                let ch = k / plane;
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        });
    }
    set.stats = Some(stats.clone());
    Ok(())
}

/// Normalizes a training set with its own statistics and returns them for
/// use on the matching test set.
pub fn normalize(train: &mut TileSet) -> Result<Stats> {
    let stats = channel_stats(train)?;
    apply_stats(train, &stats)?;
    Ok(stats)
}

/// A 1-D Gaussian-windowed cosine of length `k`.
fn gabor_1d(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let centre = (k as f64 - 1.0) / 2.0;
    let sigma = rng.random_range(0.25..0.6) * k as f64;
    let freq = rng.random_range(0.0..std::f64::consts::PI / 1.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..k)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp() * (freq * d + phase).cos()
        })
        .collect()
}

/// A `C_out × 3 × k × k` bank of coloured, windowed-sinusoid filters. Each
/// filter is an RGB triple times a separable spatial pattern (exactly rank
/// one in the 3-way sense), plus Gaussian noise of standard deviation
/// `noise` relative to the filter's peak.
pub fn synth_filter_bank(c_out: usize, k: usize, noise: f64, seed: u64) -> Result<FilterBank> {
    if c_out == 0 || k == 0 {
        return Err(Error::Usage("filter bank extents must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(c_out * 3 * k * k);
    let mut bias = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[o as u64]));
        let rgb: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (h, v) = (gabor_1d(k, &mut rng), gabor_1d(k, &mut rng));
        let start = data.len();
        for c in &rgb {
            for a in &h {
                for b in &v {
                    data.push(c * a * b);
                }
            }
        }
        if noise > 0.0 {
            let peak = data[start..].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for x in &mut data[start..] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += noise * peak * z;
            }
        }
        bias.push(rng.random_range(-0.1..0.1));
    }
    FilterBank::new(Tensor::new(vec![c_out, 3, k, k], data)?, Some(bias))
}

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTask {
    pub channels: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Tile side.
    pub size: usize,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
    pub seed: u64,
    /// Overrides the generated class signatures (`classes × channels`).
    pub signatures: Option<Vec<Vec<f64>>>,
}

impl Default for SpectralTask {
    fn default() -> Self {
        SpectralTask {
            channels: 64,
            classes: 4,
            train: 200,
            test: 200,
            size: 12,
            noise: 0.3,
            seed: 0,
            signatures: None,
        }
    }
}

/// Smooth, well separated spectra: one Gaussian bump per class, centred at
/// evenly spaced wavelengths, on a small common baseline.
pub fn class_signatures(channels: usize, classes: usize) -> Vec<Vec<f64>> {
    let spacing = channels as f64 / classes as f64;
    let sigma = (spacing / 3.0).max(0.5);
    (0..classes)
        .map(|k| {
            let centre = (k as f64 + 0.5) * spacing - 0.5;
            (0..channels)
                .map(|c| 0.05 + (-(c as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect()
        })
        .collect()
}

/// Angle in degrees between two spectra.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let cos = crate::linalg::dot(a, b) / (crate::linalg::norm2(a) * crate::linalg::norm2(b));
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Minimum separation guaranteed between generated class signatures.
pub const MIN_SIGNATURE_ANGLE: f64 = 30.0;

/// Generates train and test tile sets. Every sample is background noise
/// plus a Gaussian blob at a random position whose spectrum is its class
/// signature; labels cycle through the classes.
pub fn synth_spectral_task(task: &SpectralTask) -> Result<(TileSet, TileSet)> {
    if task.classes < 2 {
        return Err(Error::Usage("a classification task needs at least 2 classes".into()));
    }
    if task.channels == 0 || task.size == 0 {
        return Err(Error::Usage("channels and tile size must be >= 1".into()));
    }
    let sigs = match &task.signatures {
        Some(s) => {
            if s.len() != task.classes || s.iter().any(|v| v.len() != task.channels) {
                return Err(Error::shape("custom signatures must be classes × channels"));
            }
            s.clone()
        }
        None => {
            let s = class_signatures(task.channels, task.classes);
            for i in 0..s.len() {
                for j in 0..i {
                    let angle = spectral_angle(&s[i], &s[j]);
                    if angle < MIN_SIGNATURE_ANGLE {
                        return Err(Error::Usage(format!(
                            "{} classes cannot be separated by {MIN_SIGNATURE_ANGLE}° over {} channels (got {angle:.1}°)",
                            task.classes, task.channels
                        )));
                    }
                }
            }
            s
        }
    };
    let make = |split: Split, n: usize, salt: u64| {
        let tiles = (0..n)
            .into_par_iter()
            .map(|i| sample(task, &sigs[i % task.classes], crate::derive_seed(task.seed, &[salt, i as u64])))
            .collect();
        TileSet::new(tiles, (0..n).map(|i| i % task.classes).collect(), split)
    };
    Ok((make(Split::Train, task.train, 0)?, make(Split::Test, task.test, 1)?))
}

fn sample(task: &SpectralTask, sig: &[f64], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = task.size as f64;
    let (cy, cx) = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
    let radius = rng.random_range(0.15..0.3) * s;
    let amp = rng.random_range(0.75..1.25);
    let blob: Vec<f64> = (0..task.size * task.size)
        .map(|k| {
            let (y, x) = ((k / task.size) as f64 + 0.5, (k % task.size) as f64 + 0.5);
            amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * radius * radius)).exp()
        })
        .collect();
    let plane = task.size * task.size;
    let mut data = Vec::with_capacity(task.channels * plane);
    for &c in sig {
        for b in &blob {
            let z: f64 = if task.noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
            data.push(c * b + task.noise * z);
        }
    }
    Tensor::new(vec![task.channels, task.size, task.size], data).expect("consistent sample shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose_bank, CpOptions, DecompKind};

    fn random_cube(c: usize, h: usize, w: usize, labelled: bool, seed: u64) -> HyperCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::from_fn(&[c, h, w], |_| f64::from(rng.random_range(-5.0f32..5.0)));
        let labels = labelled.then(|| (0..h * w).map(|_| rng.random_range(-1..4)).collect());
        HyperCube::new(data, labels).unwrap()
    }

    #[test]
    fn cube_round_trip_is_bit_identical() {
        for labelled in [false, true] {
            let cube = random_cube(5, 7, 6, labelled, 1);
            let back = HyperCube::from_bytes(&cube.to_bytes()).unwrap();
            assert_eq!(back, cube);
        }
    }

    #[test]
    fn truncated_and_empty_cubes_are_rejected() {
        let bytes = random_cube(2, 3, 3, true, 2).to_bytes();
        let err = HyperCube::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format(_)));
        assert!(msg.contains(&bytes.len().to_string()) && msg.contains(&(bytes.len() - 3).to_string()), "{msg}");
        let mut header = b"HSC1".to_vec();
        for d in [0u32, 4, 4] {
            header.extend_from_slice(&d.to_le_bytes());
        }
        header.push(0);
        assert!(matches!(HyperCube::from_bytes(&header), Err(Error::Format(_))));
        assert!(matches!(HyperCube::from_bytes(b"HSC2"), Err(Error::Format(_))));
    }

    #[test]
    fn resize_preserves_constants_and_is_identity_at_same_size() {
        let c = Tensor::filled(&[2, 11, 11], 0.1);
        let r = bilinear_resize(&c, (32, 32)).unwrap();
        assert!(r.data().iter().all(|v| *v == 0.1));
        let x = random_cube(3, 5, 5, false, 3).data;
        assert_eq!(bilinear_resize(&x, (5, 5)).unwrap(), x);
    }

    #[test]
    fn resize_matches_pixel_centre_mapping() {
        // 2 → 4 under align-corners = false samples at -0.25, 0.25, 0.75, 1.25.
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize(&x, (1, 4)).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
        // Downscaling 4 → 2 averages neighbouring pairs.
        let x = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(bilinear_resize(&x, (1, 2)).unwrap().data(), &[1.0, 5.0]);
        // Scaling the input scales the output; increasing 2×2 inputs stay ordered.
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = bilinear_resize(&x, (4, 4)).unwrap();
        let r3 = bilinear_resize(&x.scale(3.0), (4, 4)).unwrap();
        assert!(r.data().iter().zip(r3.data()).all(|(a, b)| (3.0 * a - b).abs() <= 1e-12));
        for i in 0..4 {
            for j in 1..4 {
                assert!(r.get(&[0, i, j]) >= r.get(&[0, i, j - 1]));
                assert!(r.get(&[0, j, i]) >= r.get(&[0, j - 1, i]));
            }
        }
    }

    #[test]
    fn tiling_counts_and_labels() {
        let data = Tensor::filled(&[2, 32, 32], 4.0);
        let cube = HyperCube::new(data.clone(), Some(vec![1; 32 * 32])).unwrap();
        let set = tile_remote_sensing(&cube, 11, 3, 32).unwrap();
        assert_eq!(set.len(), 64);
        assert_eq!(set.tile_shape(), Some(&[2, 32, 32][..]));
        assert!(set.tiles.iter().all(|t| t.data().iter().all(|v| *v == 4.0)));
        let none = HyperCube::new(data, Some(vec![-1; 32 * 32])).unwrap();
        assert!(tile_remote_sensing(&none, 11, 3, 32).unwrap().is_empty());
        for (h, w) in [(11, 11), (13, 40), (25, 17)] {
            let cube = random_cube(1, h, w, true, 4);
            let lab = cube.labels().unwrap();
            let set = tile_remote_sensing(&cube, 11, 3, 8).unwrap();
            let expected = (0..tile_positions(h, 11, 3))
                .flat_map(|y| (0..tile_positions(w, 11, 3)).map(move |x| (y * 3 + 5) * w + x * 3 + 5))
                .filter(|k| lab[*k] >= 0)
                .count();
            assert_eq!(set.len(), expected);
            assert_eq!(tile_positions(h, 11, 3), (h - 11) / 3 + 1);
        }
    }

    #[test]
    fn nearrange_drop_crop_resize_pad() {
        let cube = random_cube(204, 10, 12, true, 5);
        let opts = NearRange {
            crop: 10,
            resize_to: 10,
            drop: (5, 5),
            pad: 0,
        };
        let out = preprocess_nearrange(&cube, &opts).unwrap();
        assert_eq!(out.channels(), 194);
        assert_eq!(out.data().get(&[0, 3, 4]), cube.data().get(&[5, 3, 5]));
        let c = HyperCube::new(Tensor::filled(&[6, 9, 9], 2.0), None).unwrap();
        let o = preprocess_nearrange(
            &c,
            &NearRange {
                crop: 7,
                resize_to: 4,
                drop: (1, 0),
                pad: 2,
            },
        )
        .unwrap();
        assert_eq!(o.data().shape(), &[5, 8, 8]);
        assert_eq!(o.data().get(&[0, 0, 0]), 0.0);
        assert_eq!(o.data().get(&[4, 2, 5]), 2.0);
        let too_big = NearRange { crop: 11, ..opts };
        assert!(matches!(preprocess_nearrange(&cube, &too_big), Err(Error::Shape(_))));
        let too_many = NearRange { drop: (100, 104), ..opts };
        assert!(preprocess_nearrange(&cube, &too_many).is_err());
    }

    #[test]
    fn hand_computed_normalization() {
        let t = |v| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
        let mut set = TileSet::new(vec![t(1.0), t(5.0)], vec![0, 1], Split::Train).unwrap();
        let stats = normalize(&mut set).unwrap();
        assert_eq!((stats.mean[0], stats.std[0]), (3.0, 2.0));
        assert_eq!(set.tiles[0].data(), &[-1.0]);
        assert_eq!(set.tiles[1].data(), &[1.0]);
        let mut constant = TileSet::new(vec![t(7.0), t(7.0)], vec![0, 0], Split::Train).unwrap();
        normalize(&mut constant).unwrap();
        assert!(constant.tiles.iter().all(|x| x.data() == [0.0]));
    }

    #[test]
    fn normalization_uses_training_stats_only() {
        let task = SpectralTask {
            channels: 6,
            train: 20,
            test: 10,
            size: 5,
            ..SpectralTask::default()
        };
        let (mut train, mut test) = synth_spectral_task(&task).unwrap();
        let raw_test = test.clone();
        let stats = normalize(&mut train).unwrap();
        let again = channel_stats(&train).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() <= 1e-10));
        assert!(again.std.iter().all(|s| (s - 1.0).abs() <= 1e-6));
        apply_stats(&mut test, &stats).unwrap();
        let v = raw_test.tiles[3].get(&[2, 1, 4]);
        assert_eq!(test.tiles[3].get(&[2, 1, 4]), (v - stats.mean[2]) / stats.std[2]);
        let renorm = normalize(&mut train.clone()).unwrap();
        assert!(renorm.mean.iter().all(|m| m.abs() <= 1e-10));
    }

    #[test]
    fn split_is_seeded_and_balanced() {
        let t = |v| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
        let set = TileSet::new((0..11).map(|i| t(i as f64)).collect(), vec![0; 11], Split::All).unwrap();
        let (a, b) = split_tiles(&set, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len(), a.split, b.split), (6, 5, Split::Train, Split::Test));
        let mut all: Vec<f64> = a.tiles.iter().chain(&b.tiles).map(|x| x.data()[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..11).map(f64::from).collect::<Vec<_>>());
        assert_eq!(split_tiles(&set, 0.5, 3).unwrap().0, a);
    }

    #[test]
    fn tileset_round_trip() {
        let (mut train, _) = synth_spectral_task(&SpectralTask {
            channels: 3,
            train: 4,
            test: 1,
            size: 4,
            ..SpectralTask::default()
        })
        .unwrap();
        normalize(&mut train).unwrap();
        let bytes = train.to_bytes();
        assert_eq!(TileSet::from_bytes(&bytes).unwrap(), train);
        assert!(TileSet::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn synthetic_bank_is_rank_one_and_reproducible() {
        let bank = synth_filter_bank(12, 7, 0.0, 9).unwrap();
        assert_eq!(bank, synth_filter_bank(12, 7, 0.0, 9).unwrap());
        assert_ne!(bank, synth_filter_bank(12, 7, 0.0, 10).unwrap());
        for kind in [DecompKind::Cp, DecompKind::Tucker] {
            let d = decompose_bank(&bank, kind, 1, &CpOptions::default()).unwrap();
            assert!(d.errors.iter().all(|e| *e <= 1e-8), "{kind:?}: {:?}", d.errors);
        }
        let noisy = synth_filter_bank(12, 7, 0.05, 9).unwrap();
        let d = decompose_bank(&noisy, DecompKind::Cp, 1, &CpOptions::default()).unwrap();
        assert!(d.mean_error() > 1e-3);
    }

    #[test]
    fn signatures_are_separated() {
        for (c, k) in [(64, 4), (8, 2), (200, 10), (16, 8)] {
            let s = class_signatures(c, k);
            for i in 0..k {
                for j in 0..i {
                    assert!(spectral_angle(&s[i], &s[j]) >= MIN_SIGNATURE_ANGLE);
                }
            }
        }
        let (train, _) = synth_spectral_task(&SpectralTask::default()).unwrap();
        let means = class_means(&train);
        for i in 0..means.len() {
            for j in 0..i {
                assert!(spectral_angle(&means[i], &means[j]) >= MIN_SIGNATURE_ANGLE);
            }
        }
        assert!(synth_spectral_task(&SpectralTask {
            channels: 3,
            classes: 10,
            ..SpectralTask::default()
        })
        .is_err());
    }

    fn class_means(set: &TileSet) -> Vec<Vec<f64>> {
        let shape = set.tile_shape().unwrap();
        let plane = shape[1] * shape[2];
        let k = set.num_classes();
        let mut sums = vec![vec![0.0; shape[0]]; k];
        for (t, &l) in set.tiles.iter().zip(&set.labels) {
            for (ch, s) in sums[l].iter_mut().enumerate() {
                *s += t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        sums
    }

    #[test]
    fn one_hot_task_is_solved_by_nearest_mean() {
        let task = SpectralTask {
            channels: 4,
            classes: 2,
            train: 10,
            test: 10,
            size: 6,
            noise: 0.0,
            seed: 1,
            signatures: Some(vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]),
        };
        let (train, test) = synth_spectral_task(&task).unwrap();
        assert_eq!(synth_spectral_task(&task).unwrap().0, train);
        let means = class_means(&train);
        let spectrum = |t: &Tensor| (0..4).map(|c| t.data()[c * 36..(c + 1) * 36].iter().sum::<f64>()).collect::<Vec<f64>>();
        for (t, &l) in test.tiles.iter().zip(&test.labels) {
            let s = spectrum(t);
            let pred = (0..2)
                .min_by(|a, b| {
                    let d = |m: &Vec<f64>| {
                        let n = crate::linalg::norm2(m);
                        crate::linalg::norm2(&s.iter().zip(m).map(|(x, y)| x / crate::linalg::norm2(&s) - y / n).collect::<Vec<_>>())
                    };
                    d(&means[*a]).total_cmp(&d(&means[*b]))
                })
                .unwrap();
            assert_eq!(pred, l);
        }
    }
}
