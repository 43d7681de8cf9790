//! Procedural two-domain scenes with pixel-exact labels.
//!
//! Layout (which class sits where) depends only on the seed and sample
//! index; appearance (colors, texture, noise, blur) depends on the domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;

/// Class names, indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "large_stuff",
    "big_object",
    "small_object",
    "thin_structure",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Per-domain rendering parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Mean RGB color per class, in `[0, 1]`.
    pub colors: [[f64; 3]; NUM_CLASSES],
    /// Brightness of the raised bands on large-stuff regions.
    pub stripe_amplitude: f64,
    /// Per-pixel gaussian noise standard deviation.
    pub noise_std: f64,
    /// Gaussian blur standard deviation in pixels; 0 disables blur.
    pub blur_sigma: f64,
}

/// Scene layout statistics plus source and target appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Stripe period range on large-stuff regions, in pixels.
    pub stripe_period: (f64, f64),
    /// Per-image brightness offset of both stuff classes, uniform on
    /// `+- stuff_brightness_jitter`.
    pub stuff_brightness_jitter: f64,
    /// Horizon height range as a fraction of the image height; large
    /// stuff fills the image below it.
    pub horizon: (f64, f64),
    pub rects: (usize, usize),
    pub rect_size: (usize, usize),
    pub disks: (usize, usize),
    pub disk_radius: (usize, usize),
    pub lines: (usize, usize),
    pub line_length: (usize, usize),
    pub line_width: (usize, usize),
    pub source: Appearance,
    pub target: Appearance,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let source = [
            [0.45, 0.45, 0.45],
            [0.45, 0.45, 0.45],
            [0.25, 0.35, 0.62],
            [0.85, 0.25, 0.20],
            [0.90, 0.85, 0.30],
        ];
        // target: contrast compressed towards gray
        let target = source.map(|c| c.map(|v| 0.6 * v + 0.1));
        Self {
            height: 128,
            width: 128,
            stripe_period: (32.0, 40.0),
            stuff_brightness_jitter: 0.1,
            horizon: (0.3, 0.55),
            rects: (0, 3),
            rect_size: (14, 30),
            disks: (1, 4),
            disk_radius: (3, 6),
            lines: (0, 2),
            line_length: (30, 70),
            line_width: (2, 4),
            source: Appearance {
                colors: source,
                stripe_amplitude: 0.2,
                noise_std: 0.03,
                blur_sigma: 0.0,
            },
            target: Appearance {
                colors: target,
                stripe_amplitude: 0.12,
                noise_std: 0.08,
                blur_sigma: 0.7,
            },
        }
    }
}

impl SceneSpec {
    pub fn appearance(&self, d: Domain) -> &Appearance {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("SceneSpec", m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        let ranges = [
            self.rects,
            self.rect_size,
            self.disks,
            self.disk_radius,
            self.lines,
            self.line_length,
            self.line_width,
        ];
        if ranges.iter().any(|(a, b)| a > b) {
            return bad("range lower bound exceeds upper bound");
        }
        if self.rect_size.0 == 0
            || self.disk_radius.0 == 0
            || self.line_length.0 == 0
            || self.line_width.0 == 0
        {
            return bad("zero-area shape");
        }
        if self.rect_size.1 > self.height.min(self.width) {
            return bad("rectangles larger than the image");
        }
        let (h0, h1) = self.horizon;
        if !(0.0..=1.0).contains(&h0) || !(0.0..=1.0).contains(&h1) || h0 > h1 {
            return bad("horizon range must lie in [0, 1]");
        }
        if self.stuff_brightness_jitter < 0.0 {
            return bad("brightness jitter must be non-negative");
        }
        if self.stripe_period.0 <= 0.0 || self.stripe_period.0 > self.stripe_period.1 {
            return bad("stripe period must be positive");
        }
        for a in [&self.source, &self.target] {
            if a.noise_std < 0.0 || a.blur_sigma < 0.0 {
                return bad("noise and blur must be non-negative");
            }
        }
        Ok(())
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// `[3,H,W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            f64::from(self.rgb[(i % plane) * 3 + i / plane]) / 255.0
        })
    }
}

/// Class id per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    /// One-hot `[C,H,W]` tensor.
    pub fn one_hot(&self, num_classes: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[num_classes, self.height, self.width]);
        for (p, &c) in self.classes.iter().enumerate() {
            t.data_mut()[c as usize * plane + p] = 1.0;
        }
        t
    }
}

/// Mixes a base seed with a sequence of integers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Geometry of one scene plus the stripe parameters of its large stuff.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub label: LabelMap,
    stripe_period: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    stuff_offset: f64,
}

fn range_usize(rng: &mut impl Rng, (a, b): (usize, usize)) -> usize {
    rng.random_range(a..=b)
}

pub fn generate_layout(spec: &SceneSpec, seed: u64) -> Layout {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cls = vec![0u8; h * w];

    let horizon = rng.random_range(spec.horizon.0..=spec.horizon.1) * h as f64;
    let amp = rng.random_range(0.0..0.08) * h as f64;
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / w as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            if y as f64 >= horizon + amp * (freq * x as f64 + phase).sin() {
                cls[y * w + x] = 1;
            }
        }
    }

    for _ in 0..range_usize(&mut rng, spec.rects) {
        let rh = range_usize(&mut rng, spec.rect_size);
        let rw = range_usize(&mut rng, spec.rect_size);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for y in top..top + rh {
            cls[y * w + left..y * w + left + rw].fill(2);
        }
    }

    for _ in 0..range_usize(&mut rng, spec.lines) {
        let len = range_usize(&mut rng, spec.line_length) as f64;
        let width = range_usize(&mut rng, spec.line_width) as f64;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (dx, dy) = (theta.cos(), theta.sin());
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                if along.abs() <= len / 2.0 && across.abs() < width / 2.0 {
                    cls[y * w + x] = 4;
                }
            }
        }
    }

    for _ in 0..range_usize(&mut rng, spec.disks) {
        let r = range_usize(&mut rng, spec.disk_radius) as f64;
        let cx = rng.random_range(r..w as f64 - r);
        let cy = rng.random_range(r..h as f64 - r);
        let (y0, y1) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(h),
        );
        let (x0, x1) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(w),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if px * px + py * py <= r * r {
                    cls[y * w + x] = 3;
                }
            }
        }
    }

    Layout {
        label: LabelMap {
            height: h,
            width: w,
            classes: cls,
        },
        stripe_period: rng.random_range(spec.stripe_period.0..=spec.stripe_period.1),
        stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
        stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        stuff_offset: if spec.stuff_brightness_jitter > 0.0 {
            rng.random_range(-spec.stuff_brightness_jitter..=spec.stuff_brightness_jitter)
        } else {
            0.0
        },
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_plane(p: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            p[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
}

/// Fraction of each stripe period that is raised.
const STRIPE_DUTY: f64 = 0.6;

/// Renders a layout in the given appearance.
pub fn render(layout: &Layout, app: &Appearance, seed: u64) -> Image {
    let (h, w) = (layout.label.height, layout.label.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, app.noise_std.max(1e-12)).expect("valid std");
    let (sa, ca) = layout.stripe_angle.sin_cos();
    let mut planes = vec![vec![0.0; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            let c = layout.label.classes[y * w + x] as usize;
            let stripe = match c {
                0 => layout.stuff_offset,
                1 => {
                    let t = (x as f64 * ca + y as f64 * sa) / layout.stripe_period
                        + layout.stripe_phase / std::f64::consts::TAU;
                    let raised = t.rem_euclid(1.0) < STRIPE_DUTY;
                    layout.stuff_offset + if raised { app.stripe_amplitude } else { 0.0 }
                }
                _ => 0.0,
            };
            for (ch, plane) in planes.iter_mut().enumerate() {
                let n = if app.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                plane[y * w + x] = app.colors[c][ch] + stripe + n;
            }
        }
    }
    if app.blur_sigma > 0.0 {
        for plane in &mut planes {
            blur_plane(plane, h, w, app.blur_sigma);
        }
    }
    let mut rgb = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for ch in 0..3 {
            rgb[p * 3 + ch] = (planes[ch][p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Image {
        height: h,
        width: w,
        rgb,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub label: Option<LabelMap>,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of one domain and split.
    pub fn subset(&self, domain: Domain, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && s.split == split)
            .collect()
    }

    /// Drops the labels of every sample matching `(domain, split)`.
    pub fn hide_labels(&mut self, domain: Domain, split: Split) {
        for s in &mut self.samples {
            if s.domain == domain && s.split == split {
                s.label = None;
            }
        }
    }
}

/// `n` labeled scenes rendered in `domain`. Label maps depend only on
/// `seed` and the sample index.
pub fn generate(
    spec: &SceneSpec,
    n: usize,
    domain: Domain,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate", "sample count must be >= 1"));
    }
    let app = spec.appearance(domain);
    let dom = match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    };
    let samples = (0..n as u64)
        .map(|i| {
            let layout = generate_layout(spec, derive_seed(seed, &[i]));
            let image = render(&layout, app, derive_seed(seed, &[i, 1 + dom]));
            Sample {
                image,
                label: Some(layout.label),
                domain,
                split,
            }
        })
        .collect();
    Ok(Dataset { samples })
}

/// Sizes and seed of a complete benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            source_train: 200,
            target_train: 200,
            target_val: 50,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.scene.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Labeled source training set, unlabeled target training set and labeled
/// target validation set, each from its own layout stream.
pub fn generate_benchmark(b: &BenchmarkSpec) -> Result<Dataset> {
    let mut d = generate(
        &b.scene,
        b.source_train,
        Domain::Source,
        Split::Train,
        derive_seed(b.seed, &[10]),
    )?;
    let mut t = generate(
        &b.scene,
        b.target_train,
        Domain::Target,
        Split::Train,
        derive_seed(b.seed, &[11]),
    )?;
    let v = generate(
        &b.scene,
        b.target_val,
        Domain::Target,
        Split::Val,
        derive_seed(b.seed, &[12]),
    )?;
    t.hide_labels(Domain::Target, Split::Train);
    d.samples.extend(t.samples);
    d.samples.extend(v.samples);
    Ok(d)
}
