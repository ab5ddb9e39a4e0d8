//! Image loading, geometric normalisation, contrast enhancement,
//! standardisation and training-time augmentation.
//!
//! Images are `[3, H, W]` `f32` tensors with values in `[0, 255]`; masks are
//! `[H, W]` tensors holding 0 or 1.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub od_mask: Option<Tensor<f32>>,
    pub ex_mask: Option<Tensor<f32>>,
    /// `(height, width)` before any geometric transform.
    pub source_size: (usize, usize),
}

fn check_mask(name: &str, mask: &Tensor<f32>, h: usize, w: usize) -> Result<()> {
    if mask.shape() != [h, w] {
        return Err(Error::shape("mask", mask.shape(), &[h, w]));
    }
    if let Some(&v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{name} value {v} is not 0 or 1")));
    }
    Ok(())
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        rgb: Tensor<f32>,
        od_mask: Option<Tensor<f32>>,
        ex_mask: Option<Tensor<f32>>,
    ) -> Result<Self> {
        let r = ImageRecord {
            id: id.into(),
            source_size: (0, 0),
            rgb,
            od_mask,
            ex_mask,
        };
        let (h, w) = r.size()?;
        r.validate()?;
        Ok(ImageRecord {
            source_size: (h, w),
            ..r
        })
    }

    /// `(height, width)`.
    pub fn size(&self) -> Result<(usize, usize)> {
        match *self.rgb.shape() {
            [3, h, w] => Ok((h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "image must be 3 x H x W, got {:?}",
                self.rgb.shape()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size()?;
        if let Some(m) = &self.od_mask {
            check_mask("od_mask", m, h, w)?;
        }
        if let Some(m) = &self.ex_mask {
            check_mask("ex_mask", m, h, w)?;
        }
        Ok(())
    }

    pub fn mask(&self, task: Task) -> Option<&Tensor<f32>> {
        match task {
            Task::Od => self.od_mask.as_ref(),
            Task::Ex => self.ex_mask.as_ref(),
        }
    }

    fn map_masks(&self, mut f: impl FnMut(&Tensor<f32>) -> Tensor<f32>) -> (Option<Tensor<f32>>, Option<Tensor<f32>>) {
        (self.od_mask.as_ref().map(&mut f), self.ex_mask.as_ref().map(&mut f))
    }
}

/// Bilinear sample of one `[H, W]` plane at fractional coordinates, zero
/// outside the plane.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    v as f32
}

/// Bilinear resize of a `[C, H, W]` tensor with edge clamping.
fn resize_bilinear(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for ox in 0..ow {
                let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let y1 = (y.floor() as usize + 1).min(h - 1);
                let x1 = (x.floor() as usize + 1).min(w - 1);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out[ch * oh * ow + oy * ow + ox] = v as f32;
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

/// Nearest-neighbour resize of an `[H, W]` mask.
fn resize_nearest(m: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let data = (0..oh * ow)
        .map(|i| {
            let sy = (((i / ow) as f64 + 0.5) * h as f64 / oh as f64) as usize;
            let sx = (((i % ow) as f64 + 0.5) * w as f64 / ow as f64) as usize;
            m.data()[sy.min(h - 1) * w + sx.min(w - 1)]
        })
        .collect();
    Tensor::from_parts(vec![oh, ow], data)
}

/// Places a `[.., H, W]` tensor at the centre of a zeroed `target x target`
/// canvas.
fn pad_center(t: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let rank = t.rank();
    let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    let planes = t.numel() / (h * w);
    let top = (target - h) / 2;
    let left = (target - w) / 2;
    let mut out = vec![0.0f32; planes * target * target];
    for p in 0..planes {
        for y in 0..h {
            let src = &t.data()[p * h * w + y * w..p * h * w + (y + 1) * w];
            let dst = p * target * target + (top + y) * target + left;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[rank - 2] = target;
    shape[rank - 1] = target;
    Tensor::from_parts(shape, out)
}

/// Fits the record into a `target x target` square: larger images are
/// scaled down preserving aspect ratio (bilinear for the image, nearest for
/// masks), then everything is zero-padded symmetrically.
pub fn resize_or_pad(record: &ImageRecord, target: usize) -> Result<ImageRecord> {
    if target == 0 || target % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "target size {target} must be a positive multiple of 8"
        )));
    }
    let (h, w) = record.size()?;
    let (rh, rw) = if h > target || w > target {
        let scale = target as f64 / h.max(w) as f64;
        (
            ((h as f64 * scale).round() as usize).clamp(1, target),
            ((w as f64 * scale).round() as usize).clamp(1, target),
        )
    } else {
        (h, w)
    };
    let (rgb, (od, ex)) = if (rh, rw) != (h, w) {
        (
            resize_bilinear(&record.rgb, rh, rw),
            record.map_masks(|m| resize_nearest(m, rh, rw)),
        )
    } else {
        (record.rgb.clone(), (record.od_mask.clone(), record.ex_mask.clone()))
    };
    let fit = |t: Tensor<f32>| if (rh, rw) == (target, target) { t } else { pad_center(&t, target) };
    Ok(ImageRecord {
        id: record.id.clone(),
        rgb: fit(rgb),
        od_mask: od.map(fit),
        ex_mask: ex.map(fit),
        source_size: record.source_size,
    })
}

/// Standard deviation rule for a `k x k` Gaussian when none is given.
pub fn default_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Reflect-101 index (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur of every `[H, W]` plane with reflect-101 borders.
pub fn gaussian_blur(img: &Tensor<f32>, size: usize, sigma: f64) -> Result<Tensor<f32>> {
    let rank = img.rank();
    if rank < 2 || size % 2 == 0 {
        return Err(Error::InvalidArgument("blur needs a [.., H, W] tensor and an odd kernel".into()));
    }
    let (h, w) = (img.shape()[rank - 2], img.shape()[rank - 1]);
    if h < size || w < size {
        return Err(Error::InvalidArgument(format!(
            "blur kernel {size} larger than image {h}x{w}"
        )));
    }
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let mut out = vec![0.0f32; img.numel()];
    let mut tmp = vec![0.0f64; h * w];
    for (p, plane) in img.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
                out[p * h * w + y * w + x] = v as f32;
            }
        }
    }
    Ok(Tensor::from_parts(img.shape().to_vec(), out))
}

/// Contrast enhancement `clamp(4 I - 4 G(I) + 128, 0, 255)` per channel.
pub fn enhance(img: &Tensor<f32>, size: usize, sigma: f64) -> Result<Tensor<f32>> {
    let blurred = gaussian_blur(img, size, sigma)?;
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&i, &g)| (4.0 * i as f64 - 4.0 * g as f64 + 128.0).clamp(0.0, 255.0) as f32)
        .collect();
    Ok(Tensor::from_parts(img.shape().to_vec(), data))
}

/// Per-image zero mean and unit population standard deviation. Constant
/// images map to zeros.
pub fn standardize(img: &Tensor<f32>) -> Tensor<f32> {
    let n = img.numel() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Tensor::zeros(img.shape());
    }
    img.map(|v| ((v as f64 - mean) / std) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub rotate: bool,
    /// Degrees, `[low, high)` within `[0, 360)`.
    pub angle_range: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    pub intensity_factor_range: (f64, f64),
    /// Draw an independent factor per pixel instead of one per image.
    pub per_pixel_intensity: bool,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotate: true,
            angle_range: (0.0, 360.0),
            hflip: true,
            vflip: true,
            intensity_factor_range: (0.8, 1.2),
            per_pixel_intensity: false,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// No geometric or photometric change.
    pub fn disabled() -> Self {
        AugmentationPolicy {
            rotate: false,
            hflip: false,
            vflip: false,
            intensity_factor_range: (1.0, 1.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.angle_range;
        if !(0.0..=360.0).contains(&lo) || !(0.0..=360.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("angle range ({lo}, {hi}) outside [0, 360)")));
        }
        let (flo, fhi) = self.intensity_factor_range;
        if !(flo > 0.0 && flo <= fhi) {
            return Err(Error::Config(format!("intensity factor range ({flo}, {fhi}) invalid")));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentationPolicy`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub intensity: Intensity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Intensity {
    Image(f64),
    /// One factor per pixel, shared across channels.
    Pixel(Vec<f64>),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle_deg: 0.0,
            hflip: false,
            vflip: false,
            intensity: Intensity::Image(1.0),
        }
    }

    pub fn draw<R: Rng>(policy: &AugmentationPolicy, pixels: usize, rng: &mut R) -> Self {
        let (lo, hi) = policy.angle_range;
        let angle_deg = if policy.rotate && hi > lo { rng.gen_range(lo..hi) } else { 0.0 };
        let hflip = policy.hflip && rng.gen_bool(0.5);
        let vflip = policy.vflip && rng.gen_bool(0.5);
        let (flo, fhi) = policy.intensity_factor_range;
        let factor = |rng: &mut R| if fhi > flo { rng.gen_range(flo..=fhi) } else { flo };
        let intensity = if policy.per_pixel_intensity {
            Intensity::Pixel((0..pixels).map(|_| factor(rng)).collect())
        } else {
            Intensity::Image(factor(rng))
        };
        AugmentParams {
            angle_deg,
            hflip,
            vflip,
            intensity,
        }
    }
}

/// Rotates every `[H, W]` plane about the image centre. Multiples of 90
/// degrees on square planes are exact permutations; other angles use
/// bilinear sampling with zero fill.
fn rotate(t: &Tensor<f32>, angle_deg: f64) -> Tensor<f32> {
    let rank = t.rank();
    let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    let quarter = angle_deg / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 && h == w {
        let turns = (quarter.round() as i64).rem_euclid(4);
        if turns == 0 {
            return t.clone();
        }
        let n = h;
        let mut out = vec![0.0f32; t.numel()];
        for (p, plane) in t.data().chunks(n * n).enumerate() {
            for y in 0..n {
                for x in 0..n {
                    // Counter-clockwise rotation by `turns` quarter turns.
                    let (sy, sx) = match turns {
                        1 => (x, n - 1 - y),
                        2 => (n - 1 - y, n - 1 - x),
                        _ => (n - 1 - x, y),
                    };
                    out[p * n * n + y * n + x] = plane[sy * n + sx];
                }
            }
        }
        return Tensor::from_parts(t.shape().to_vec(), out);
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; t.numel()];
    for (p, plane) in t.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // Inverse map of a counter-clockwise rotation in image
                // coordinates (y down).
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                out[p * h * w + y * w + x] = bilinear(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn flip(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let rank = t.rank();
    let (h, w) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    let mut out = vec![0.0f32; t.numel()];
    for (p, plane) in t.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[p * h * w + y * w + x] = plane[sy * w + sx];
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn geometric(t: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let mut t = rotate(t, p.angle_deg);
    if p.hflip {
        t = flip(&t, true);
    }
    if p.vflip {
        t = flip(&t, false);
    }
    t
}

/// Applies concrete augmentation parameters. Geometry is shared by image and
/// masks; masks are re-binarised at 0.5. The intensity factor touches the
/// image only and the result is clamped to `[0, 255]`.
pub fn apply_augmentation(record: &ImageRecord, p: &AugmentParams) -> Result<ImageRecord> {
    let (h, w) = record.size()?;
    let mut rgb = geometric(&record.rgb, p);
    let plane = h * w;
    if let Intensity::Pixel(f) = &p.intensity {
        if f.len() != plane {
            return Err(Error::InvalidArgument(format!(
                "per-pixel factors: expected {plane}, got {}",
                f.len()
            )));
        }
    }
    for (i, v) in rgb.data_mut().iter_mut().enumerate() {
        let factor = match &p.intensity {
            Intensity::Image(f) => *f,
            Intensity::Pixel(f) => f[i % plane],
        };
        *v = (*v as f64 * factor).clamp(0.0, 255.0) as f32;
    }
    let binarize = |m: &Tensor<f32>| geometric(m, p).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let (od_mask, ex_mask) = record.map_masks(binarize);
    Ok(ImageRecord {
        id: record.id.clone(),
        rgb,
        od_mask,
        ex_mask,
        source_size: record.source_size,
    })
}

/// Draws parameters from `policy` and applies them.
pub fn augment<R: Rng>(record: &ImageRecord, policy: &AugmentationPolicy, rng: &mut R) -> Result<ImageRecord> {
    let (h, w) = record.size()?;
    let p = AugmentParams::draw(policy, h * w, rng);
    apply_augmentation(record, &p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhanceOrder {
    ResizeFirst,
    EnhanceFirst,
}

/// Settings shared by training and inference preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub input_size: usize,
    pub enhance: bool,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub order: EnhanceOrder,
}

impl PreprocessConfig {
    pub fn new(input_size: usize) -> Self {
        PreprocessConfig {
            input_size,
            enhance: true,
            blur_kernel: 9,
            blur_sigma: default_sigma(9),
            order: EnhanceOrder::ResizeFirst,
        }
    }
}

fn enhance_record(cfg: &PreprocessConfig, r: ImageRecord) -> Result<ImageRecord> {
    if !cfg.enhance {
        return Ok(r);
    }
    Ok(ImageRecord {
        rgb: enhance(&r.rgb, cfg.blur_kernel, cfg.blur_sigma)?,
        ..r
    })
}

/// Geometric normalisation plus optional contrast enhancement; output
/// values stay in `[0, 255]`.
pub fn prepare(record: &ImageRecord, cfg: &PreprocessConfig) -> Result<ImageRecord> {
    match cfg.order {
        EnhanceOrder::ResizeFirst => enhance_record(cfg, resize_or_pad(record, cfg.input_size)?),
        EnhanceOrder::EnhanceFirst => resize_or_pad(&enhance_record(cfg, record.clone())?, cfg.input_size),
    }
}

/// `prepare` followed by standardisation; returns the network input.
pub fn network_input(record: &ImageRecord, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    Ok(standardize(&prepare(record, cfg)?.rgb))
}

/// Loads an 8-bit RGB image (PNG or PPM) as `[3, H, W]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn load_luma(path: &Path, f: impl Fn(u8) -> f32) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| f(p[0])).collect();
    Tensor::new(vec![h, w], data)
}

/// Loads a single-channel mask; values above 127 are foreground.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    load_luma(path, |v| if v > 127 { 1.0 } else { 0.0 })
}

/// Loads an 8-bit grayscale map scaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    load_luma(path, |v| v as f32 / 255.0)
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn save_rgb(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *rgb.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::InvalidArgument(format!("expected 3 x H x W, got {:?}", rgb.shape()))),
    };
    let d = rgb.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a binary mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::InvalidArgument(format!("expected H x W, got {:?}", mask.shape()))),
    };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `[0, 1]` map as 8-bit grayscale.
pub fn save_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::InvalidArgument(format!("expected H x W, got {:?}", map.shape()))),
    };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(map.data()[y as usize * w + x as usize] * 255.0)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
