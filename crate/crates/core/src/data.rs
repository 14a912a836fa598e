//! Procedural cue-conflict dataset.
//!
//! Every image is a binary shape silhouette filled with a procedural texture
//! over a low-contrast gray noise background. In the training and clean
//! evaluation splits the texture class equals the shape class, so both cues
//! predict the label. The cue-conflict split pairs each shape with one of
//! the seven other textures; the stylized split does the same using texture
//! parameters (frequency band) never seen in training.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 8;

/// Foreground coverage accepted by the generator.
pub const MIN_COVERAGE: f64 = 0.15;
pub const MAX_COVERAGE: f64 = 0.60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star5,
    Cross,
    Ring,
    Ellipse,
    Diamond,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Star5,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Ellipse,
        ShapeClass::Diamond,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Star5 => "star5",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Diamond => "diamond",
        }
    }

    /// Membership test in the shape's unit frame (extent radius 1).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeClass::Circle => u * u + v * v <= 1.0,
            ShapeClass::Square => u.abs().max(v.abs()) <= 0.75,
            ShapeClass::Triangle => in_polygon(&TRIANGLE, u, v),
            ShapeClass::Star5 => in_polygon(&star_vertices(), u, v),
            ShapeClass::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95)
            }
            ShapeClass::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2)
            }
            ShapeClass::Ellipse => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
            ShapeClass::Diamond => u.abs() / 0.7 + v.abs() <= 1.0,
        }
    }
}

const TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (0.866_025_403_784_438_6, 0.5), (-0.866_025_403_784_438_6, 0.5)];

fn star_vertices() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
        let a = -PI / 2.0 + i as f64 * PI / 5.0;
        *p = (r * a.cos(), r * a.sin());
    }
    pts
}

/// Even-odd ray casting.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureClass {
    Stripes,
    Checker,
    Dots,
    Noise,
    Grad,
    Zigzag,
    Rings,
    Blotch,
}

impl TextureClass {
    pub const ALL: [TextureClass; NUM_CLASSES] = [
        TextureClass::Stripes,
        TextureClass::Checker,
        TextureClass::Dots,
        TextureClass::Noise,
        TextureClass::Grad,
        TextureClass::Zigzag,
        TextureClass::Rings,
        TextureClass::Blotch,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Stripes => "stripes",
            TextureClass::Checker => "checker",
            TextureClass::Dots => "dots",
            TextureClass::Noise => "noise",
            TextureClass::Grad => "grad",
            TextureClass::Zigzag => "zigzag",
            TextureClass::Rings => "rings",
            TextureClass::Blotch => "blotch",
        }
    }
}

/// Pose of a shape. The extent radius in pixels is `scale·S/2`; shifts are
/// in pixels from the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Transform {
    /// Centered, unrotated, radius `0.35·S`.
    pub fn identity() -> Self {
        Transform {
            rotation: 0.0,
            scale: 0.7,
            shift_x: 0.0,
            shift_y: 0.0,
        }
    }
}

/// Rasterizes a shape as a `[S, S]` 0/1 mask (pixel-center sampling, no
/// anti-aliasing). Fails if any covered pixel would fall outside the frame.
pub fn render_shape(class: ShapeClass, t: &Transform, size: usize) -> Result<Tensor<f32>> {
    if !(t.scale > 0.0) || !t.rotation.is_finite() || !t.shift_x.is_finite() || !t.shift_y.is_finite() {
        return Err(Error::invalid(format!("invalid transform {t:?}")));
    }
    let s = size as f64;
    let radius = t.scale * s / 2.0;
    let (cx, cy) = (s / 2.0 + t.shift_x, s / 2.0 + t.shift_y);
    let (sin, cos) = t.rotation.sin_cos();
    let inside = |x: isize, y: isize| {
        let px = x as f64 + 0.5 - cx;
        let py = y as f64 + 0.5 - cy;
        let u = (px * cos + py * sin) / radius;
        let v = (-px * sin + py * cos) / radius;
        class.contains(u, v)
    };
    // Anything beyond the extent radius plus one pixel cannot be covered.
    let reach = (radius * 1.1 + 2.0).ceil() as isize;
    let n = size as isize;
    let (x0, x1) = ((cx as isize) - reach, (cx as isize) + reach);
    let (y0, y1) = ((cy as isize) - reach, (cy as isize) + reach);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (x < 0 || y < 0 || x >= n || y >= n) && inside(x, y) {
                return Err(Error::invalid(format!(
                    "{} with {t:?} leaves the {size}x{size} frame",
                    class.name()
                )));
            }
        }
    }
    let mut data = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            if inside(x as isize, y as isize) {
                data[y * size + x] = 1.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![size, size], data))
}

/// Parameters of a procedural texture. `frequency` is in cycles per image
/// width; `colors` are the two RGB endpoints the pattern blends between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub frequency: f64,
    pub phase: f64,
    pub orientation: f64,
    pub colors: [[f64; 3]; 2],
    pub seed: u64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            frequency: 8.0,
            phase: 0.0,
            orientation: 0.0,
            colors: [[0.15, 0.2, 0.3], [0.85, 0.75, 0.6]],
            seed: 0,
        }
    }
}

fn triangle_wave(x: f64) -> f64 {
    1.0 - (2.0 * (x - x.floor()) - 1.0).abs()
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise with the given cell size in pixels.
struct ValueNoise {
    cells: usize,
    values: Vec<f64>,
    cell: f64,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, rng: &mut impl Rng) -> Self {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            cells,
            values: (0..cells * cells).map(|_| rng.random::<f64>()).collect(),
            cell,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (smoothstep(gx - gx.floor()), smoothstep(gy - gy.floor()));
        let v = |i: usize, j: usize| self.values[(j.min(self.cells - 1)) * self.cells + i.min(self.cells - 1)];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bottom = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Renders a `[3, S, S]` texture with values in `[0, 1]`.
pub fn render_texture(class: TextureClass, p: &TextureParams, size: usize) -> Tensor<f32> {
    let s = size as f64;
    let f = p.frequency.max(0.5);
    let omega = TAU * f / s;
    let (sin, cos) = p.orientation.sin_cos();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let noise = match class {
        TextureClass::Noise => Some(ValueNoise::new(size, (s / (4.0 * f)).max(1.5), &mut rng)),
        _ => None,
    };
    let waves: Vec<(f64, f64, f64)> = match class {
        TextureClass::Blotch => (0..4)
            .map(|_| {
                let dir = rng.random_range(0.0..TAU);
                (dir.cos(), dir.sin(), rng.random_range(0.0..TAU))
            })
            .collect(),
        _ => Vec::new(),
    };
    let center = match class {
        TextureClass::Rings => (rng.random_range(0.0..s), rng.random_range(0.0..s)),
        _ => (0.0, 0.0),
    };

    let pattern = |x: f64, y: f64| -> f64 {
        let a = x * cos + y * sin;
        let b = -x * sin + y * cos;
        match class {
            TextureClass::Stripes => 0.5 + 0.5 * (omega * a + p.phase).sin(),
            TextureClass::Checker => {
                let cell = s / (2.0 * f);
                let off = p.phase / TAU;
                let i = (a / cell + off).floor() as i64 + (b / cell + off).floor() as i64;
                i.rem_euclid(2) as f64
            }
            TextureClass::Dots => {
                let spacing = s / f;
                let off = p.phase / TAU;
                let du = (a / spacing + off).fract().abs() - 0.5;
                let dv = (b / spacing + off).fract().abs() - 0.5;
                let du = if a / spacing + off < 0.0 { -du } else { du };
                let dv = if b / spacing + off < 0.0 { -dv } else { dv };
                if du * du + dv * dv <= 0.32 * 0.32 {
                    1.0
                } else {
                    0.0
                }
            }
            TextureClass::Noise => noise.as_ref().map_or(0.5, |n| n.at(x, y)),
            TextureClass::Grad => triangle_wave(a * f / (4.0 * s) + p.phase / TAU),
            TextureClass::Zigzag => {
                let period = s / f;
                let shifted = a + 0.5 * period * triangle_wave(b / period);
                if (omega * shifted + p.phase).sin() >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TextureClass::Rings => {
                let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                0.5 + 0.5 * (omega * r + p.phase).sin()
            }
            TextureClass::Blotch => {
                let sum: f64 = waves
                    .iter()
                    .map(|&(dc, ds, ph)| (omega * (x * dc + y * ds) + ph).sin())
                    .sum();
                if sum >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };

    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t = pattern(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let v = p.colors[0][c] * (1.0 - t) + p.colors[1][c] * t;
                data[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// The fixed background: gray value noise of amplitude ±0.08 around 0.5.
pub fn render_background(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ValueNoise::new(size, 3.0, &mut rng);
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let g = 0.5 + 0.16 * (noise.at(x as f64 + 0.5, y as f64 + 0.5) - 0.5);
            for c in 0..3 {
                data[c * plane + y * size + x] = g as f32;
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// `mask⊙fg + (1−mask)⊙bg`, with the `[S, S]` mask broadcast over channels.
pub fn compose(mask: &Tensor<f32>, fg: &Tensor<f32>, bg: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [h, w] = mask.shape()[..] else {
        return Err(Error::invalid(format!("mask must be [h, w], got {:?}", mask.shape())));
    };
    if fg.shape() != bg.shape() || fg.shape() != [3, h, w] {
        return Err(Error::shape("compose", fg.shape(), bg.shape()));
    }
    let plane = h * w;
    let m = mask.data();
    let data = fg
        .data()
        .iter()
        .zip(bg.data())
        .enumerate()
        .map(|(i, (&f, &b))| {
            let mi = m[i % plane];
            mi * f + (1.0 - mi) * b
        })
        .collect();
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Clean,
    CueConflict,
    Stylized,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Clean, Split::CueConflict, Split::Stylized];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Clean => "eval-clean",
            Split::CueConflict => "eval-cueconflict",
            Split::Stylized => "eval-stylized",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval-clean" | "clean" => Ok(Split::Clean),
            "eval-cueconflict" | "cueconflict" | "cue-conflict" => Ok(Split::CueConflict),
            "eval-stylized" | "stylized" => Ok(Split::Stylized),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub train: usize,
    pub clean: usize,
    pub cue_conflict: usize,
    pub stylized: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 4000,
            clean: 800,
            cue_conflict: 800,
            stylized: 800,
            image_size: IMAGE_SIZE,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Clean => self.clean,
            Split::CueConflict => self.cue_conflict,
            Split::Stylized => self.stylized,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.count(s)).sum()
    }
}

/// One manifest row plus the generation record kept alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub shape: usize,
    pub texture: usize,
    pub split: Split,
    pub transform: Transform,
    pub texture_params: TextureParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub config: DatasetConfig,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRANSFORMS_FILE: &str = "transforms.tsv";
pub const DATASET_CONFIG_FILE: &str = "dataset.cfg";

/// Reproducible per-sample seed derived from `(seed, split, index)`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"sslab-sample");
    h.update(seed.to_le_bytes());
    h.update(split.name().as_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Shape and texture labels of sample `index` in `split`. Shapes cycle
/// through all classes; conflicting textures cycle through the seven
/// non-matching classes.
pub fn labels_for(split: Split, index: usize) -> (usize, usize) {
    let shape = index % NUM_CLASSES;
    let texture = match split {
        Split::Train | Split::Clean => shape,
        Split::CueConflict | Split::Stylized => {
            (shape + 1 + (index / NUM_CLASSES) % (NUM_CLASSES - 1)) % NUM_CLASSES
        }
    };
    (shape, texture)
}

fn random_colors(rng: &mut impl Rng) -> [[f64; 3]; 2] {
    loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let contrast = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
        if contrast >= 0.3 {
            return [a, b];
        }
    }
}

/// Training frequency band (cycles per image) and the held-out band used
/// by the stylized split.
pub const TRAIN_FREQUENCY: (f64, f64) = (6.0, 9.0);
pub const HELD_OUT_FREQUENCY: (f64, f64) = (10.5, 14.0);

fn sample_texture_params(split: Split, rng: &mut impl Rng) -> TextureParams {
    let band = match split {
        Split::Stylized => HELD_OUT_FREQUENCY,
        _ => TRAIN_FREQUENCY,
    };
    TextureParams {
        frequency: rng.random_range(band.0..band.1),
        phase: rng.random_range(0.0..TAU),
        orientation: rng.random_range(0.0..PI),
        colors: random_colors(rng),
        seed: rng.random(),
    }
}

fn coverage(mask: &Tensor<f32>) -> f64 {
    mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / mask.numel() as f64
}

/// Renders sample `index` of `split` from its own seed alone.
pub fn generate_sample(
    split: Split,
    index: usize,
    seed: u64,
    size: usize,
) -> Result<(SampleRecord, Tensor<f32>)> {
    let (shape, texture) = labels_for(split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, index));
    let shape_class = ShapeClass::from_id(shape).expect("shape id in range");
    let max_shift = 0.1 * size as f64;
    let mut attempt = 0;
    let (transform, mask) = loop {
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::invalid(format!(
                "no valid pose found for {} at size {size}",
                shape_class.name()
            )));
        }
        let t = Transform {
            rotation: rng.random_range(0.0..TAU),
            scale: rng.random_range(0.5..0.9),
            shift_x: rng.random_range(-max_shift..=max_shift),
            shift_y: rng.random_range(-max_shift..=max_shift),
        };
        if let Ok(mask) = render_shape(shape_class, &t, size) {
            if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage(&mask)) {
                break (t, mask);
            }
        }
    };
    let params = sample_texture_params(split, &mut rng);
    let fg = render_texture(TextureClass::from_id(texture).expect("texture id in range"), &params, size);
    let bg = render_background(size, rng.random());
    let image = compose(&mask, &fg, &bg)?;
    let record = SampleRecord {
        path: format!("{}/{index:05}.png", split.name()),
        shape,
        texture,
        split,
        transform,
        texture_params: params,
    };
    Ok((record, image))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Generates every split under `out`, writing one PNG per sample plus the
/// manifest, the transform record and the resolved dataset config.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if config.image_size < 16 {
        return Err(Error::invalid("image size must be at least 16"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::with_capacity(config.total());
    for split in Split::ALL {
        let n = config.count(split);
        if n == 0 {
            continue;
        }
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let records: Vec<SampleRecord> = crate::parallel::install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let (rec, img) = generate_sample(split, i, seed, config.image_size)?;
                    imageio::save_rgb(out.join(&rec.path), &img)?;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        samples.extend(records);
    }

    let mut manifest = String::new();
    let mut transforms = String::from(
        "path\trotation\tscale\tshift_x\tshift_y\tfrequency\tphase\torientation\n",
    );
    for s in &samples {
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.path, s.shape, s.texture, s.split));
        let (t, p) = (&s.transform, &s.texture_params);
        transforms.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.path, t.rotation, t.scale, t.shift_x, t.shift_y, p.frequency, p.phase, p.orientation
        ));
    }
    write_text(&out.join(MANIFEST_FILE), &manifest)?;
    write_text(&out.join(TRANSFORMS_FILE), &transforms)?;
    write_text(
        &out.join(DATASET_CONFIG_FILE),
        &format!(
            "seed = {seed}\ntrain = {}\neval_clean = {}\neval_cueconflict = {}\neval_stylized = {}\nimage_size = {}\n",
            config.train, config.clean, config.cue_conflict, config.stylized, config.image_size
        ),
    )?;

    Ok(DatasetManifest {
        root: out.to_path_buf(),
        seed,
        config: *config,
        samples,
    })
}

/// One parsed `path<TAB>shape<TAB>texture<TAB>split` manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub shape: usize,
    pub texture: usize,
    pub split: Split,
}

/// Reads `manifest.tsv` from a dataset directory, checking that labels are
/// in range and that every referenced image exists.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format("manifest", format!("line {}: {why}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [p, shape, texture, split] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let shape: usize = shape.parse().map_err(|_| bad("bad shape id"))?;
        let texture: usize = texture.parse().map_err(|_| bad("bad texture id"))?;
        if shape >= NUM_CLASSES || texture >= NUM_CLASSES {
            return Err(bad("label out of range"));
        }
        let split: Split = split.parse().map_err(|_| bad("unknown split"))?;
        let full = root.join(p);
        if !full.is_file() {
            return Err(Error::io(
                &full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "listed image is missing"),
            ));
        }
        entries.push(ManifestEntry {
            path: full,
            shape,
            texture,
            split,
        });
    }
    Ok(entries)
}

/// Decoded images and labels of one split.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Vec<Tensor<f32>>,
    pub shape_labels: Vec<usize>,
    pub texture_labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.shape_labels.truncate(n);
        self.texture_labels.truncate(n);
        self
    }
}

pub fn load_split(root: &Path, split: Split) -> Result<LoadedSplit> {
    let entries: Vec<ManifestEntry> = read_manifest(root)?
        .into_iter()
        .filter(|e| e.split == split)
        .collect();
    let images = crate::parallel::install(|| {
        entries
            .par_iter()
            .map(|e| imageio::load_rgb::<f32>(&e.path))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(LoadedSplit {
        images,
        shape_labels: entries.iter().map(|e| e.shape).collect(),
        texture_labels: entries.iter().map(|e| e.texture).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(mask: &Tensor<f32>) -> f64 {
        mask.data().iter().map(|&v| v as f64).sum()
    }

    #[test]
    fn circle_area_matches_analytic() {
        let m = render_shape(ShapeClass::Circle, &Transform::identity(), 64).unwrap();
        let expect = PI * (0.35f64 * 64.0).powi(2);
        assert!((area(&m) - expect).abs() / expect < 0.02);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn square_quarter_turn_symmetry() {
        let base = render_shape(ShapeClass::Square, &Transform::identity(), 64).unwrap();
        let turned = Transform {
            rotation: PI / 2.0,
            ..Transform::identity()
        };
        assert_eq!(render_shape(ShapeClass::Square, &turned, 64).unwrap(), base);
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = Transform {
            rotation: 1.1,
            scale: 0.6,
            shift_x: 2.0,
            shift_y: -3.5,
        };
        for class in ShapeClass::ALL {
            assert_eq!(render_shape(class, &t, 64).unwrap(), render_shape(class, &t, 64).unwrap());
        }
    }

    #[test]
    fn out_of_frame_rejected() {
        let t = Transform {
            rotation: 0.0,
            scale: 0.9,
            shift_x: 6.4,
            shift_y: 0.0,
        };
        assert!(render_shape(ShapeClass::Circle, &t, 64).is_err());
    }

    #[test]
    fn shapes_are_distinct() {
        let masks: Vec<_> = ShapeClass::ALL
            .iter()
            .map(|&c| render_shape(c, &Transform::identity(), 64).unwrap())
            .collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn checker_has_two_colors() {
        let p = TextureParams {
            frequency: 4.0,
            ..TextureParams::default()
        };
        let t = render_texture(TextureClass::Checker, &p, 64);
        let mut seen: Vec<[u32; 3]> = Vec::new();
        for i in 0..64 * 64 {
            let px = [0, 1, 2].map(|c| t.data()[c * 4096 + i].to_bits());
            if !seen.contains(&px) {
                seen.push(px);
            }
        }
        assert_eq!(seen.len(), 2);
        // 8-pixel cells: the first row flips every 8 pixels.
        assert_eq!(t.data()[7], t.data()[0]);
        assert_ne!(t.data()[8], t.data()[0]);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let p = TextureParams {
            seed: 42,
            ..TextureParams::default()
        };
        let a = render_texture(TextureClass::Noise, &p, 64);
        assert_eq!(a, render_texture(TextureClass::Noise, &p, 64));
        let q = TextureParams { seed: 43, ..p };
        assert_ne!(a, render_texture(TextureClass::Noise, &q, 64));
    }

    #[test]
    fn textures_stay_in_unit_range_and_are_stationary() {
        for class in TextureClass::ALL {
            let t = render_texture(class, &TextureParams::default(), 64);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            if class == TextureClass::Grad {
                continue;
            }
            for c in 0..3 {
                let plane = &t.data()[c * 4096..(c + 1) * 4096];
                let global = plane.iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
                for py in 0..4 {
                    for px in 0..4 {
                        let mut acc = 0.0;
                        for y in 0..16 {
                            for x in 0..16 {
                                acc += plane[(py * 16 + y) * 64 + px * 16 + x] as f64;
                            }
                        }
                        let mean = acc / 256.0;
                        assert!(
                            (mean - global).abs() <= 0.15,
                            "{} patch ({py},{px}) channel {c}: {mean} vs {global}",
                            class.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn compose_extremes() {
        let fg = render_texture(TextureClass::Stripes, &TextureParams::default(), 16);
        let bg = render_background(16, 3);
        let ones = Tensor::ones(&[16, 16]);
        let zeros = Tensor::zeros(&[16, 16]);
        assert_eq!(compose(&ones, &fg, &bg).unwrap(), fg);
        assert_eq!(compose(&zeros, &fg, &bg).unwrap(), bg);
        assert!(compose(&Tensor::ones(&[8, 8]), &fg, &bg).is_err());
    }

    #[test]
    fn cue_conflict_labels_never_agree() {
        for i in 0..800 {
            let (s, t) = labels_for(Split::CueConflict, i);
            assert_ne!(s, t);
            let (s, t) = labels_for(Split::Train, i);
            assert_eq!(s, t);
        }
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn generated_samples_respect_invariants() {
        for split in Split::ALL {
            for i in 0..16 {
                let (rec, img) = generate_sample(split, i, 7, 64).unwrap();
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let mask = render_shape(ShapeClass::from_id(rec.shape).unwrap(), &rec.transform, 64).unwrap();
                let cov = coverage(&mask);
                assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&cov));
                assert!(rec.transform.shift_x.abs() <= 6.4 && rec.transform.shift_y.abs() <= 6.4);
            }
        }
    }
}
