//! Synthetic scenes, covariate shift, sparse sampling, on-disk storage and
//! the single-pass batch stream.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::{ImageBuffer, Luma, Rgb};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth quantization used on disk: one unit is 1/256 m, 0 means missing.
pub const DEPTH_SCALE: f64 = 256.0;

/// An RGB raster with intensities in `[0, 1]`, stored planar (`[3][H][W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Contract(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Contract(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Mean over RGB at one pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        (self.get(0, y, x) + self.get(1, y, x) + self.get(2, y, x)) / 3.0
    }

    /// Snaps every intensity to the 8-bit grid `k / 255`.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth raster in meters. A pixel is valid iff its value is positive;
/// invalid pixels hold exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn empty(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Builds a map from raw values; non-positive entries become missing.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Contract(format!(
                "depth data has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("depth values must be finite".into()));
        }
        let data = values.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.data[i] > 0.0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.0).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Indices of valid pixels in raster order.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] > 0.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub sparse: DepthMap,
    pub gt: DepthMap,
    pub domain_tag: DomainTag,
    pub seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt.height
    }

    pub fn width(&self) -> usize {
        self.gt.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseStrategy {
    #[default]
    Uniform,
    GradientCorners,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Fraction of valid ground-truth pixels kept in the sparse map.
    pub density: f64,
    pub strategy: SparseStrategy,
    /// Haze blend at the far plane, in [0, 1].
    pub haze: f64,
}

const HAZE_COLOR: [f64; 3] = [0.55, 0.68, 0.9];

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_objects: 3,
            max_objects: 6,
            d_min: 1.0,
            d_max: 10.0,
            density: 0.05,
            strategy: SparseStrategy::Uniform,
            haze: 0.6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "depth range needs 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1]", self.density)));
        }
        if !(0.0..=1.0).contains(&self.haze) {
            return Err(Error::Config(format!("haze {} outside [0, 1]", self.haze)));
        }
        Ok(())
    }
}

/// Generates one synthetic scene: fronto-parallel rectangles and ellipses
/// over a ground ramp, shaded by depth and per-object albedo.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Sample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = config.d_max - config.d_min;

    // Ground ramp: far at the top row, near at the bottom row.
    let mut depth = vec![0.0; h * w];
    let mut albedo = vec![[0.0f64; 3]; h * w];
    let ground: [f64; 3] = [
        rng.gen_range(0.35..0.85),
        rng.gen_range(0.35..0.85),
        rng.gen_range(0.35..0.85),
    ];
    for y in 0..h {
        let t = y as f64 / (h - 1) as f64;
        let d = config.d_max - 0.8 * span * t;
        for x in 0..w {
            depth[y * w + x] = d;
            albedo[y * w + x] = ground;
        }
    }

    let count = rng.gen_range(config.min_objects..=config.max_objects);
    for _ in 0..count {
        let ellipse = rng.gen_bool(0.5);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(h as f64 / 10.0..h as f64 / 4.0);
        let rx = rng.gen_range(w as f64 / 10.0..w as f64 / 4.0);
        let d = config.d_min + span * rng.gen_range(0.0..0.85);
        let color: [f64; 3] = [
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
        ];
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                let i = y * w + x;
                if inside && d < depth[i] {
                    depth[i] = d;
                    albedo[i] = color;
                }
            }
        }
    }
    for d in &mut depth {
        *d = d.clamp(config.d_min, config.d_max);
    }

    // Depth-dependent shading plus aerial perspective: distant surfaces fade
    // toward a bluish haze colour.
    let mut pixels = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let far = (depth[i] - config.d_min) / span;
        let shade = 0.3 + 0.7 * (1.0 - far);
        let haze = config.haze * far;
        for c in 0..3 {
            let v = (1.0 - haze) * albedo[i][c] * shade + haze * HAZE_COLOR[c];
            pixels[c * h * w + i] = to_u8(v) as f64 / 255.0;
        }
    }
    let gt = DepthMap::from_values(h, w, depth)?;
    let sparse = sample_sparse_depth(&gt, config.density, config.strategy, derive_seed(seed, 1))?;
    Ok(Sample {
        id: format!("{seed:08}"),
        image: Image::from_planar(h, w, pixels)?,
        sparse,
        gt,
        domain_tag: DomainTag::Source,
        seed,
    })
}

/// Mixes a stream index into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Photometric and depth-noise corruption applied to a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub gamma: f64,
    pub color_matrix: [[f64; 3]; 3],
    pub brightness_offset: f64,
    pub noise_std: f64,
    pub depth_noise_std: f64,
    /// Fraction of the existing sparse points kept.
    pub density: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig {
            gamma: 1.0,
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            brightness_offset: 0.0,
            noise_std: 0.0,
            depth_noise_std: 0.0,
            density: 1.0,
        }
    }

    /// The strong photometric shift: gamma 1.8, a random hue rotation of
    /// 90 to 270 degrees, and intensity noise with std 0.05.
    pub fn strong(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = rng.gen_range(0.5..1.5) * std::f64::consts::PI;
        ShiftConfig {
            gamma: 1.8,
            color_matrix: hue_rotation(angle),
            brightness_offset: 0.0,
            noise_std: 0.05,
            depth_noise_std: 0.0,
            density: 1.0,
        }
    }

    /// Named shift presets used by the experiments.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
        let shift = match name {
            "none" | "identity" => Self::identity(),
            "strong" => Self::strong(seed),
            // Washed-out, low contrast, brighter.
            "fog" => ShiftConfig {
                gamma: 0.6,
                color_matrix: scaled_identity(0.45),
                brightness_offset: 0.35,
                noise_std: 0.02,
                ..Self::identity()
            },
            "night" => ShiftConfig {
                gamma: 2.2,
                color_matrix: scaled_identity(0.8),
                brightness_offset: -0.02,
                noise_std: 0.06,
                ..Self::identity()
            },
            "hue" => ShiftConfig {
                color_matrix: hue_rotation(rng.gen_range(0.6..1.4) * std::f64::consts::PI),
                noise_std: 0.01,
                ..Self::identity()
            },
            "noisy" => ShiftConfig {
                gamma: 1.4,
                color_matrix: hue_rotation(rng.gen_range(0.3..0.6) * std::f64::consts::PI),
                noise_std: 0.12,
                ..Self::identity()
            },
            other => return Err(Error::Config(format!("unknown shift preset `{other}`"))),
        };
        Ok(shift)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.noise_std < 0.0 || self.depth_noise_std < 0.0 {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1]", self.density)));
        }
        Ok(())
    }
}

fn scaled_identity(s: f64) -> [[f64; 3]; 3] {
    [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]]
}

/// Rotation of RGB space about the gray axis by `angle` radians.
pub fn hue_rotation(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3.0;
    let r = (1.0f64 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - r * s;
    let d = k * (1.0 - c) + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Applies `clamp((M I)^gamma + offset + noise)` to the image, perturbs and
/// thins the sparse map, and tags the result as target-domain.
/// Ground truth is never modified.
pub fn apply_domain_shift(sample: &Sample, shift: &ShiftConfig, seed: u64) -> Result<Sample> {
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.height(), sample.width());
    let hw = h * w;
    let src = sample.image.data();
    let noise = (shift.noise_std > 0.0)
        .then(|| Normal::new(0.0, shift.noise_std).expect("finite std"));
    let mut out = vec![0.0; 3 * hw];
    for i in 0..hw {
        let rgb = [src[i], src[hw + i], src[2 * hw + i]];
        for c in 0..3 {
            let m = &shift.color_matrix[c];
            let mixed = (m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2]).max(0.0);
            let mut v = if shift.gamma == 1.0 { mixed } else { mixed.powf(shift.gamma) };
            v += shift.brightness_offset;
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            out[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }

    let mut sparse = sample.sparse.data().to_vec();
    let valid = sample.sparse.valid_indices();
    if shift.density < 1.0 && !valid.is_empty() {
        let keep = ((shift.density * valid.len() as f64).round() as usize).max(1);
        let mut kept = vec![false; valid.len()];
        for j in index::sample(&mut rng, valid.len(), keep) {
            kept[j] = true;
        }
        for (j, &i) in valid.iter().enumerate() {
            if !kept[j] {
                sparse[i] = 0.0;
            }
        }
    }
    if shift.depth_noise_std > 0.0 {
        let n = Normal::new(0.0, shift.depth_noise_std).expect("finite std");
        for v in sparse.iter_mut().filter(|v| **v > 0.0) {
            *v = (*v + n.sample(&mut rng)).max(1e-3);
        }
    }

    Ok(Sample {
        id: sample.id.clone(),
        image: Image::from_planar(h, w, out)?,
        sparse: DepthMap::from_values(h, w, sparse)?,
        gt: sample.gt.clone(),
        domain_tag: DomainTag::Target,
        seed: sample.seed,
    })
}

/// Samples `round(density * |valid gt|)` pixels of `gt` as a sparse map.
///
/// `GradientCorners` ranks valid pixels by local depth-gradient magnitude
/// (ties by raster order) and draws from the top quartile, widening the pool
/// only when the quartile is smaller than the requested count.
pub fn sample_sparse_depth(
    gt: &DepthMap,
    density: f64,
    strategy: SparseStrategy,
    seed: u64,
) -> Result<DepthMap> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density {density} outside (0, 1]")));
    }
    let valid = gt.valid_indices();
    if valid.is_empty() {
        return Err(Error::EmptySupport("ground truth has no valid pixels".into()));
    }
    let count = ((density * valid.len() as f64).round() as usize).min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = match strategy {
        SparseStrategy::Uniform => valid,
        SparseStrategy::GradientCorners => {
            let mut ranked: Vec<(f64, usize)> =
                valid.iter().map(|&i| (gradient_magnitude(gt, i), i)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let quartile = ranked.len().div_ceil(4).max(count);
            ranked.truncate(quartile);
            ranked.into_iter().map(|(_, i)| i).collect()
        }
    };
    let mut values = vec![0.0; gt.data.len()];
    for j in index::sample(&mut rng, pool.len(), count) {
        let i = pool[j];
        values[i] = gt.data[i];
    }
    DepthMap::from_values(gt.height, gt.width, values)
}

fn gradient_magnitude(gt: &DepthMap, i: usize) -> f64 {
    let (y, x) = (i / gt.width, i % gt.width);
    let at = |yy: usize, xx: usize| {
        let v = gt.get(yy, xx);
        if v > 0.0 {
            v
        } else {
            gt.data[i]
        }
    };
    let gx = at(y, (x + 1).min(gt.width - 1)) - at(y, x.saturating_sub(1));
    let gy = at((y + 1).min(gt.height - 1), x) - at(y.saturating_sub(1), x);
    (gx * gx + gy * gy).sqrt()
}

/// `(I_0, z_0)`: an all-zero image and a depth map with no valid pixels.
pub fn make_null_inputs(height: usize, width: usize) -> (Image, DepthMap) {
    (Image::zeros(height, width), DepthMap::empty(height, width))
}

/// Generates `count` source scenes with per-sample seeds derived from `seed`.
pub fn generate_dataset(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Sample>> {
    (0..count)
        .map(|k| {
            let mut s = generate_scene(derive_seed(seed, k as u64), config)?;
            s.id = format!("{k:06}");
            Ok(s)
        })
        .collect()
}

/// Shifts every sample with a per-sample noise seed derived from `seed`.
pub fn shift_dataset(samples: &[Sample], shift: &ShiftConfig, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| apply_domain_shift(s, shift, derive_seed(seed, k as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Streaming

/// One batch handed out by a stream.
#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    pub samples: Vec<Sample>,
    /// Present when the stream is instrumented with a [`RetentionProbe`].
    pub lease: Option<Lease>,
}

/// Counts samples currently held outside an instrumented stream, and the
/// peak of that count.
#[derive(Clone, Debug, Default)]
pub struct RetentionProbe {
    counts: Arc<Mutex<(usize, usize)>>,
}

impl RetentionProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> usize {
        self.counts.lock().expect("probe lock").0
    }

    pub fn peak(&self) -> usize {
        self.counts.lock().expect("probe lock").1
    }

    fn lease(&self, n: usize) -> Lease {
        let mut c = self.counts.lock().expect("probe lock");
        c.0 += n;
        c.1 = c.1.max(c.0);
        Lease {
            probe: self.clone(),
            n,
        }
    }
}

/// Held by a [`Batch`] while its samples are alive; cloning the batch takes
/// a second lease.
#[derive(Debug)]
pub struct Lease {
    probe: RetentionProbe,
    n: usize,
}

impl Clone for Lease {
    fn clone(&self) -> Self {
        self.probe.lease(self.n)
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        if let Ok(mut c) = self.probe.counts.lock() {
            c.0 -= self.n;
        }
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

/// A forward-only source of batches. After the end-of-stream `None`, any
/// further call is a protocol violation.
pub trait SampleStream {
    fn next_batch(&mut self) -> Result<Option<Batch>>;
    fn batch_size(&self) -> usize;
}

/// Single-pass stream over an owned dataset. Samples are moved out as they
/// are served, so the stream itself never retains a consumed sample.
pub struct BatchStream {
    slots: Vec<Option<Sample>>,
    batch_size: usize,
    next_index: usize,
    finished: bool,
    served: Vec<String>,
    probe: Option<RetentionProbe>,
}

impl BatchStream {
    pub fn new(samples: Vec<Sample>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(BatchStream {
            slots: samples.into_iter().map(Some).collect(),
            batch_size,
            next_index: 0,
            finished: false,
            served: Vec::new(),
            probe: None,
        })
    }

    /// Attaches a probe that tracks how many served samples are still alive.
    pub fn with_probe(mut self, probe: RetentionProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn num_batches(&self) -> usize {
        self.slots.len().div_ceil(self.batch_size)
    }

    /// Ids served so far, in order.
    pub fn access_log(&self) -> &[String] {
        &self.served
    }

    /// Requests batch `k`. Only the next unconsumed batch may be requested.
    pub fn request(&mut self, k: usize) -> Result<Batch> {
        if k < self.next_index {
            return Err(Error::Protocol(format!(
                "batch {k} was already consumed; streams are single-pass"
            )));
        }
        if k > self.next_index {
            return Err(Error::Protocol(format!(
                "batch {k} requested before batch {}",
                self.next_index
            )));
        }
        if k >= self.num_batches() {
            return Err(Error::Protocol(format!("batch {k} is past the end of the stream")));
        }
        let start = k * self.batch_size;
        let end = (start + self.batch_size).min(self.slots.len());
        let samples: Vec<Sample> = self.slots[start..end]
            .iter_mut()
            .map(|s| s.take().expect("unconsumed slot"))
            .collect();
        self.served.extend(samples.iter().map(|s| s.id.clone()));
        self.next_index += 1;
        let lease = self.probe.as_ref().map(|p| p.lease(samples.len()));
        Ok(Batch {
            index: k,
            samples,
            lease,
        })
    }
}

impl SampleStream for BatchStream {
    fn next_batch(&mut self) -> Result<Option<Batch>> {
        if self.finished {
            return Err(Error::Protocol("stream already fully consumed".into()));
        }
        if self.next_index >= self.num_batches() {
            self.finished = true;
            return Ok(None);
        }
        let k = self.next_index;
        self.request(k).map(Some)
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }
}

/// Convenience for the common case: a stream over a dataset.
pub fn stream_batches(samples: Vec<Sample>, batch_size: usize) -> Result<BatchStream> {
    BatchStream::new(samples, batch_size)
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Sample ids in stream order.
    pub ids: Vec<String>,
    pub domains: Vec<DomainTag>,
    pub seeds: Vec<u64>,
    /// Generator settings that produced the data, free-form.
    #[serde(default)]
    pub generator: serde_json::Value,
    #[serde(default)]
    pub seed: u64,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Writes `image/<id>.png` (8-bit RGB), `sparse/<id>.png` and `gt/<id>.png`
/// (16-bit gray, depth x 256) plus `manifest.json`.
pub fn write_sample_dir(
    samples: &[Sample],
    root: &Path,
    generator: serde_json::Value,
    seed: u64,
) -> Result<()> {
    for sub in ["image", "sparse", "gt"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_image(&s.image, &root.join("image").join(format!("{}.png", s.id)))?;
        write_depth(&s.sparse, &root.join("sparse").join(format!("{}.png", s.id)))?;
        write_depth(&s.gt, &root.join("gt").join(format!("{}.png", s.id)))?;
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        domains: samples.iter().map(|s| s.domain_tag).collect(),
        seeds: samples.iter().map(|s| s.seed).collect(),
        generator,
        seed,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    if manifest.domains.len() != manifest.ids.len() || manifest.seeds.len() != manifest.ids.len() {
        return Err(Error::format(&path, "ids, domains and seeds differ in length"));
    }
    Ok(manifest)
}

/// Reads a dataset directory in manifest (stream) order.
pub fn read_sample_dir(root: &Path) -> Result<Vec<Sample>> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.ids.len());
    for (k, id) in manifest.ids.iter().enumerate() {
        let image = read_image(&root.join("image").join(format!("{id}.png")))?;
        let sparse = read_depth(&root.join("sparse").join(format!("{id}.png")))?;
        let gt_path = root.join("gt").join(format!("{id}.png"));
        let gt = read_depth(&gt_path)?;
        if (image.height, image.width) != (gt.height, gt.width)
            || (sparse.height, sparse.width) != (gt.height, gt.width)
        {
            return Err(Error::format(gt_path, "rasters for this id disagree in size"));
        }
        out.push(Sample {
            id: id.clone(),
            image,
            sparse,
            gt,
            domain_tag: manifest.domains[k],
            seed: manifest.seeds[k],
        });
    }
    Ok(out)
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
    });
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn read_image(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = match dynamic {
        image::DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f64 / 255.0;
        }
    }
    Image::from_planar(h, w, data)
}

/// Meters to the on-disk 16-bit code.
pub fn encode_depth(meters: f64) -> Option<u16> {
    if !meters.is_finite() || meters < 0.0 {
        return None;
    }
    let code = (meters * DEPTH_SCALE).round();
    (code <= u16::MAX as f64).then_some(code as u16)
}

pub fn decode_depth(code: u16) -> f64 {
    code as f64 / DEPTH_SCALE
}

fn write_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut codes = Vec::with_capacity(depth.data.len());
    for &v in &depth.data {
        let code = encode_depth(v).ok_or_else(|| {
            Error::format(path, format!("depth {v} m cannot be stored as a 16-bit code"))
        })?;
        codes.push(code);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, codes)
            .expect("buffer sized from raster");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn read_depth(path: &Path) -> Result<DepthMap> {
    let dynamic = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let gray = match dynamic {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::format(
                path,
                format!("expected 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let values = gray.into_raw().into_iter().map(decode_depth).collect();
    DepthMap::from_values(h, w, values)
}
