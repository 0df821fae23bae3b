//! PNG images and class-id masks, dataset manifests, batching and the
//! synthetic marine-scene generator.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageError, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::pyramid::{pad_to_multiple, CropRecord};
use crate::tensor::Tensor;

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(e) => Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        ImageError::Unsupported(e) => Error::Format(format!("{}: {e}", path.display())),
        other => Error::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{}: {other}", path.display()))),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| image_error(path, e))
}

/// Read an 8-bit RGB PNG as a `(1,3,H,W)` tensor in `[0,1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = match open(path)? {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec((1, 3, h, w), data).expect("length matches shape")
}

/// Quantize the first sample of a 3-channel tensor to 8-bit RGB, clamping to `[0,1]`.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.c() != 3 || s.n() == 0 {
        return Err(Error::Shape(format!("expected a 3-channel image tensor, got {s}")));
    }
    let (h, w) = (s.h(), s.w());
    let p = t.sample(0);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (p[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?.save(path).map_err(|e| image_error(path, e))
}

/// Read a single-channel PNG of class ids; values must be `< nc` or 255.
pub fn load_mask(path: impl AsRef<Path>, nc: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let img = match open(path)? {
        image::DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit grayscale mask, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let m = LabelMap::new(1, img.height() as usize, img.width() as usize, img.into_raw())?;
    m.validate(nc).map_err(|e| match e {
        Error::Label(msg) => Error::Label(format!("{}: {msg}", path.display())),
        e => e,
    })?;
    Ok(m)
}

pub fn save_mask(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = m.dims();
    let first = m.sample(0);
    let img = GrayImage::from_raw(w as u32, h as u32, first.data().to_vec())
        .ok_or_else(|| Error::Shape("mask buffer does not match its size".into()))?;
    img.save(path).map_err(|e| image_error(path, e))
}

/// Colorize the first sample of a mask; ignored and unknown ids become black.
pub fn save_palette_mask(path: impl AsRef<Path>, m: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = m.dims();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = m.get(0, y as usize, x as usize) as usize;
        image::Rgb(palette.get(v).copied().unwrap_or([0, 0, 0]))
    });
    img.save(path).map_err(|e| image_error(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nc = self.classes.len();
        if !(2..=255).contains(&nc) {
            return Err(Error::Config(format!("manifest needs 2..=255 classes, has {nc}")));
        }
        if self.palette.len() != nc {
            return Err(Error::Config(format!("palette has {} entries for {nc} classes", self.palette.len())));
        }
        for (i, a) in self.palette.iter().enumerate() {
            if self.palette[..i].contains(a) {
                return Err(Error::Config(format!("palette color {a:?} is used twice")));
            }
        }
        Ok(())
    }

    /// Parse and validate; sample paths stay as written.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMap,
    pub split: Split,
}

/// A manifest with every image and mask decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub samples: Vec<Sample>,
}

/// Settings for [`Dataset::batches_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub pad_multiple: usize,
    /// Random horizontal flips, off by default.
    pub hflip: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { pad_multiple: 4, hflip: false }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: LabelMap,
    /// Dataset indices of the samples, in batch order.
    pub ids: Vec<usize>,
    pub crops: Vec<CropRecord>,
}

impl Dataset {
    /// Load a manifest file; relative sample paths resolve against its directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        manifest.validate()?;
        let nc = manifest.num_classes();
        let samples = manifest
            .samples
            .iter()
            .map(|r| {
                let image = load_image(base.join(&r.image))?;
                let mask = load_mask(base.join(&r.mask), nc)?;
                let s = image.shape();
                if (s.h(), s.w()) != (mask.dims().1, mask.dims().2) {
                    return Err(Error::Dimension(format!(
                        "{}: image is {}x{} but mask is {}x{}",
                        r.image.display(),
                        s.h(),
                        s.w(),
                        mask.dims().1,
                        mask.dims().2
                    )));
                }
                Ok(Sample { image, mask, split: r.split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: manifest.name.clone(),
            classes: manifest.classes.clone(),
            palette: manifest.palette.clone(),
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn batches(&self, split: Split, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
        self.batches_with(split, batch_size, seed, BatchOptions::default())
    }

    /// Seeded shuffle of `split`, cut into batches of `batch_size`; the last
    /// batch may be short. Images are reflect-padded and masks padded with
    /// the ignore index up to `pad_multiple`.
    pub fn batches_with(&self, split: Split, batch_size: usize, seed: u64, opts: BatchOptions) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order = self.split_indices(split);
        if order.is_empty() {
            return Err(Error::Config(format!("split {split} of dataset {:?} is empty", self.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(BatchIter { data: self, order, batch_size, opts, pos: 0, rng })
    }

    /// Batches in manifest order without shuffling, for evaluation.
    pub fn ordered_batches(&self, split: Split, batch_size: usize) -> Result<BatchIter<'_>> {
        let mut it = self.batches(split, batch_size, 0)?;
        it.order.sort_unstable();
        Ok(it)
    }
}

pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    opts: BatchOptions,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn make(&mut self, ids: Vec<usize>) -> Result<Batch> {
        let mut images = Vec::with_capacity(ids.len());
        let mut masks = Vec::with_capacity(ids.len());
        let mut crops = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = &self.data.samples[i];
            let (mut img, rec) = pad_to_multiple(&s.image, self.opts.pad_multiple)?;
            let mut mask = pad_mask(&s.mask, &rec);
            if self.opts.hflip && self.rng.gen_bool(0.5) {
                img = flip_image(&img);
                mask = flip_mask(&mask);
            }
            images.push(img);
            masks.push(mask);
            crops.push(rec);
        }
        let first = images[0].shape();
        if let Some(other) = images.iter().map(Tensor::shape).find(|s| (s.h(), s.w()) != (first.h(), first.w())) {
            return Err(Error::Shape(format!(
                "batch mixes image sizes {}x{} and {}x{}; use batch size 1 for mixed-size data",
                first.h(),
                first.w(),
                other.h(),
                other.w()
            )));
        }
        let mut data = Vec::with_capacity(images.len() * first.numel());
        images.iter().for_each(|t| data.extend_from_slice(t.data()));
        let images = Tensor::from_vec((ids.len(), 3, first.h(), first.w()), data)?;
        let masks = LabelMap::stack(&masks.iter().collect::<Vec<_>>())?;
        Ok(Batch { images, masks, ids, crops })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let ids = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.make(ids))
    }
}

/// Extend a mask to match a padded image, filling with the ignore index.
pub fn pad_mask(m: &LabelMap, rec: &CropRecord) -> LabelMap {
    if rec.is_empty() {
        return m.clone();
    }
    let (n, h, w) = m.dims();
    let (ph, pw) = (h + rec.pad_bottom, w + rec.pad_right);
    let mut out = LabelMap::filled(n, ph, pw, IGNORE_INDEX);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                out.set(s, y, x, m.get(s, y, x));
            }
        }
    }
    out
}

/// Drop the padded rows and columns of a mask.
pub fn crop_mask(m: &LabelMap, rec: &CropRecord) -> Result<LabelMap> {
    let (n, h, w) = m.dims();
    if h != rec.height + rec.pad_bottom || w != rec.width + rec.pad_right {
        return Err(Error::Dimension(format!("crop record {rec:?} does not match mask {h}x{w}")));
    }
    let mut out = LabelMap::filled(n, rec.height, rec.width, 0);
    for s in 0..n {
        for y in 0..rec.height {
            for x in 0..rec.width {
                out.set(s, y, x, m.get(s, y, x));
            }
        }
    }
    Ok(out)
}

fn flip_image(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s.w();
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, v)| *d = *v);
    }
    out
}

fn flip_mask(m: &LabelMap) -> LabelMap {
    let (_, _, w) = m.dims();
    let mut out = m.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(m.data().chunks(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, v)| *d = *v);
    }
    out
}

pub const SYNTH_CLASSES: [&str; 4] = ["sky", "water", "obstacle", "spill"];
pub const SYNTH_PALETTE: [[u8; 3]; 4] = [[135, 206, 235], [0, 90, 160], [220, 60, 40], [40, 40, 40]];

/// Rotated ellipse in pixel coordinates (pixel `(x, y)` has centre `(x + 0.5, y + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Generative geometry of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    /// Horizon height at the image's horizontal centre.
    pub horizon: f64,
    /// Horizon rise per pixel to the right.
    pub slope: f64,
    pub obstacles: Vec<Ellipse>,
    pub spills: Vec<Ellipse>,
}

impl SceneGeometry {
    pub fn horizon_at(&self, x: f64, width: usize) -> f64 {
        self.horizon + self.slope * (x - width as f64 / 2.0)
    }

    /// Class of the pixel centred at `(x, y)`; obstacles are drawn over spills.
    pub fn class_at(&self, x: f64, y: f64, width: usize) -> u8 {
        if self.obstacles.iter().any(|e| e.contains(x, y)) {
            return 2;
        }
        if y < self.horizon_at(x, width) {
            return 0;
        }
        if self.spills.iter().any(|e| e.contains(x, y)) {
            return 3;
        }
        1
    }
}

pub fn synth_scene(seed: u64, size: usize, nc: usize) -> Result<(Tensor, LabelMap)> {
    synth_scene_with_geometry(seed, size, nc).map(|(i, m, _)| (i, m))
}

/// Square `size x size` scene: sky (0) over textured water (1) along a
/// tilted horizon, up to 3 obstacles (2) near the horizon and up to 2 dark
/// spills (3) on the water, plus Gaussian noise. Classes at or above `nc`
/// are not drawn.
pub fn synth_scene_with_geometry(seed: u64, size: usize, nc: usize) -> Result<(Tensor, LabelMap, SceneGeometry)> {
    if size == 0 || size % 4 != 0 {
        return Err(Error::Dimension(format!("scene size must be a positive multiple of 4, got {size}")));
    }
    if nc < 2 {
        return Err(Error::Config(format!("synthetic scenes need at least 2 classes, got {nc}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;
    let horizon = rng.gen_range(0.3..0.6) * sz;
    let slope = rng.gen_range(-0.15..0.15);
    let mut geo = SceneGeometry { horizon, slope, obstacles: Vec::new(), spills: Vec::new() };

    let n_obstacles = if nc > 2 { rng.gen_range(0..=3) } else { 0 };
    for _ in 0..n_obstacles {
        let cx = rng.gen_range(0.1..0.9) * sz;
        let cy = geo.horizon_at(cx, size) + rng.gen_range(-0.04..0.08) * sz;
        geo.obstacles.push(Ellipse {
            cx,
            cy,
            a: rng.gen_range(0.05..0.12) * sz,
            b: rng.gen_range(0.03..0.08) * sz,
            theta: rng.gen_range(-0.5..0.5),
        });
    }
    let n_spills = if nc > 3 { rng.gen_range(0..=2) } else { 0 };
    for _ in 0..n_spills {
        let cx = rng.gen_range(0.15..0.85) * sz;
        let bottom = geo.horizon_at(cx, size);
        let cy = rng.gen_range(bottom + 0.15 * sz..sz.max(bottom + 0.16 * sz));
        geo.spills.push(Ellipse {
            cx,
            cy,
            a: rng.gen_range(0.08..0.2) * sz,
            b: rng.gen_range(0.04..0.1) * sz,
            theta: rng.gen_range(-0.6..0.6),
        });
    }

    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64| base.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0));
    let sky_top = jitter(&mut rng, [0.45, 0.65, 0.9], 0.08);
    let sky_bottom = jitter(&mut rng, [0.8, 0.88, 0.95], 0.05);
    let water_far = jitter(&mut rng, [0.15, 0.4, 0.55], 0.06);
    let water_near = jitter(&mut rng, [0.05, 0.2, 0.35], 0.05);
    let obstacle_colors: Vec<[f64; 3]> = (0..geo.obstacles.len())
        .map(|_| {
            if rng.gen_bool(0.5) {
                jitter(&mut rng, [0.85, 0.3, 0.2], 0.1)
            } else {
                jitter(&mut rng, [0.95, 0.95, 0.9], 0.05)
            }
        })
        .collect();
    let ripple_freq = rng.gen_range(0.6..1.2);
    let ripple_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");

    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let class = geo.class_at(px, py, size);
            let hz = geo.horizon_at(px, size);
            let rgb = match class {
                0 => {
                    let t = (py / hz.max(1.0)).clamp(0.0, 1.0);
                    [0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_bottom[c] * t)
                }
                2 => {
                    let k = geo.obstacles.iter().position(|e| e.contains(px, py)).expect("inside an obstacle");
                    obstacle_colors[k]
                }
                _ => {
                    let t = ((py - hz) / (sz - hz).max(1.0)).clamp(0.0, 1.0);
                    let ripple = 0.04 * (ripple_freq * (py - hz) + 0.15 * px + ripple_phase).sin();
                    let base = [0, 1, 2].map(|c| water_far[c] * (1.0 - t) + water_near[c] * t + ripple);
                    if class == 3 {
                        [base[0] * 0.45 + 0.03, base[1] * 0.45 + 0.02, base[2] * 0.4]
                    } else {
                        base
                    }
                }
            };
            mask[y * size + x] = class;
            for c in 0..3 {
                img[c * plane + y * size + x] = (rgb[c] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let image = Tensor::from_vec((1, 3, size, size), img)?;
    Ok((image, LabelMap::new(1, size, size, mask)?, geo))
}

/// Write `count` synthetic scenes plus `manifest.json` into `dir`. The last
/// `val_fraction` of the scenes form the val split.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    size: usize,
    nc: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val fraction must be in [0, 1], got {val_fraction}")));
    }
    if nc > SYNTH_CLASSES.len() {
        return Err(Error::Config(format!("synthetic scenes have at most {} classes", SYNTH_CLASSES.len())));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let n_train = count - (count as f64 * val_fraction).round() as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let (image, mask) = synth_scene(scene_seed, size, nc)?;
        let rec = SampleRecord {
            image: PathBuf::from(format!("images/{i:05}.png")),
            mask: PathBuf::from(format!("masks/{i:05}.png")),
            split: if i < n_train { Split::Train } else { Split::Val },
        };
        save_image(dir.join(&rec.image), &image)?;
        save_mask(dir.join(&rec.mask), &mask)?;
        samples.push(rec);
    }
    let manifest = DatasetManifest {
        name: "synthetic-marine".into(),
        classes: SYNTH_CLASSES[..nc].iter().map(|s| s.to_string()).collect(),
        palette: SYNTH_PALETTE[..nc].to_vec(),
        samples,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_scaling_and_black() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), (1, 3, 2, 2).into());
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 0.0);
        assert_eq!(t.sum() as f32, 1.0);
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_vec((1, 3, 5, 7), (0..105).map(|_| rng.gen::<f32>()).collect()).unwrap();
        save_image(&p, &t).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn image_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("missing.png")), Err(Error::Io(_))));
        let corrupt = dir.path().join("bad.png");
        fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_image(&corrupt), Err(Error::Io(_))));
        let gray = dir.path().join("g.png");
        GrayImage::new(2, 2).save(&gray).unwrap();
        assert!(matches!(load_image(&gray), Err(Error::Format(_))));
        let rgb = dir.path().join("c.png");
        RgbImage::new(2, 2).save(&rgb).unwrap();
        assert!(matches!(load_mask(&rgb, 3), Err(Error::Format(_))));
    }

    #[test]
    fn mask_validation_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        save_mask(&p, &LabelMap::filled(1, 3, 4, 1)).unwrap();
        assert!(load_mask(&p, 3).unwrap().data().iter().all(|&v| v == 1));

        let mut bad = LabelMap::filled(1, 3, 4, 0);
        bad.set(0, 2, 1, 7);
        save_mask(&p, &bad).unwrap();
        let err = load_mask(&p, 5).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Label(_)));
        assert!(msg.contains('7') && msg.contains("row 2") && msg.contains("col 1"), "{msg}");

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let m = LabelMap::new(1, 6, 5, (0..30).map(|_| rng.gen_range(0..4)).collect()).unwrap();
            save_mask(&p, &m).unwrap();
            assert_eq!(load_mask(&p, 4).unwrap(), m);
        }
    }

    #[test]
    fn synth_is_deterministic_with_sky_and_water() {
        for seed in 0..20 {
            let (a, ma) = synth_scene(seed, 32, 4).unwrap();
            let (b, mb) = synth_scene(seed, 32, 4).unwrap();
            assert_eq!(a, b);
            assert_eq!(ma, mb);
            assert!(ma.data().contains(&0) && ma.data().contains(&1));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(synth_scene(0, 30, 4).is_err());
        let (_, m2) = synth_scene(5, 32, 2).unwrap();
        assert!(m2.data().iter().all(|&v| v < 2));
    }

    /// Point-in-ellipse via the quadratic form `d^T R diag(1/a^2, 1/b^2) R^T d`.
    fn oracle_inside(e: &Ellipse, x: f64, y: f64) -> bool {
        let (c, s) = (e.theta.cos(), e.theta.sin());
        let (ia, ib) = (1.0 / (e.a * e.a), 1.0 / (e.b * e.b));
        let qxx = c * c * ia + s * s * ib;
        let qyy = s * s * ia + c * c * ib;
        let qxy = c * s * (ia - ib);
        let (dx, dy) = (x - e.cx, y - e.cy);
        qxx * dx * dx + 2.0 * qxy * dx * dy + qyy * dy * dy <= 1.0 + 1e-12
    }

    #[test]
    fn obstacle_pixels_match_ellipse_scan() {
        let mut seen = 0;
        for seed in 0..40 {
            let (_, mask, geo) = synth_scene_with_geometry(seed, 48, 4).unwrap();
            for y in 0..48 {
                for x in 0..48 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = geo.obstacles.iter().any(|e| oracle_inside(e, px, py));
                    assert_eq!(mask.get(0, y, x) == 2, inside, "seed {seed} at ({x},{y})");
                    seen += inside as usize;
                }
            }
        }
        assert!(seen > 0);
    }

    fn dataset(n: usize, train: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let (image, mask) = synth_scene(i as u64, 8, 4).unwrap();
                Sample { image, mask, split: if i < train { Split::Train } else { Split::Val } }
            })
            .collect();
        Dataset {
            name: "t".into(),
            classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
            palette: SYNTH_PALETTE.to_vec(),
            samples,
        }
    }

    #[test]
    fn batching_partition_and_determinism() {
        let d = dataset(12, 10);
        let sizes: Vec<usize> = d.batches(Split::Train, 8, 1).unwrap().map(|b| b.unwrap().ids.len()).collect();
        assert_eq!(sizes, vec![8, 2]);
        let order = |seed| -> Vec<usize> {
            d.batches(Split::Train, 3, seed).unwrap().flat_map(|b| b.unwrap().ids).collect()
        };
        assert_eq!(order(5), order(5));
        let mut ids = order(5);
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert!(matches!(d.batches(Split::Test, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn padding_keeps_original_pixels() {
        let (image, _) = synth_scene(1, 8, 4).unwrap();
        let cropped = crate::pyramid::crop(&image, &CropRecord { height: 7, width: 6, pad_bottom: 1, pad_right: 2 }).unwrap();
        let mask = LabelMap::new(1, 7, 6, (0..42).map(|i| (i % 4) as u8).collect()).unwrap();
        let d = Dataset {
            name: "p".into(),
            classes: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            palette: SYNTH_PALETTE.to_vec(),
            samples: vec![Sample { image: cropped.clone(), mask: mask.clone(), split: Split::Train }],
        };
        let b = d.batches(Split::Train, 1, 0).unwrap().next().unwrap().unwrap();
        assert_eq!(b.images.shape(), (1, 3, 8, 8).into());
        assert_eq!(crate::pyramid::crop(&b.images, &b.crops[0]).unwrap(), cropped);
        assert_eq!(crop_mask(&b.masks, &b.crops[0]).unwrap(), mask);
        assert_eq!(b.masks.get(0, 7, 0), IGNORE_INDEX);
        assert_eq!(b.masks.get(0, 0, 7), IGNORE_INDEX);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_dataset(dir.path(), 5, 8, 4, 7, 0.4).unwrap();
        assert_eq!(m.samples.iter().filter(|s| s.split == Split::Val).count(), 2);
        let d = Dataset::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(d.samples.len(), 5);
        let (img, mask) = synth_scene(7u64.wrapping_mul(1_000_003), 8, 4).unwrap();
        assert_eq!(d.samples[0].mask, mask);
        assert!(d.samples[0].image.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);

        let mut bad = m.clone();
        bad.palette[1] = bad.palette[0];
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        bad.palette.pop();
        assert!(bad.validate().is_err());
    }
}
