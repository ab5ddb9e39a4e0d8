//! Synthetic fundus-like scenes with pixel-exact optic disc and exudate
//! masks.
//!
//! Each scene has a dark textured orange background with vignetting, a few
//! dark vessel curves radiating from a bright elliptical disc, and small
//! bright round exudates. Disc and exudate colours share a per-image tint
//! and their brightness ranges overlap, so colour alone cannot tell them
//! apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ImageRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub size: usize,
    /// Disc semi-axis range as a fraction of `size`.
    pub disc_axis: (f64, f64),
    /// Disc brightness multiplier range.
    pub disc_intensity: (f64, f64),
    /// Inclusive range of exudate counts per image.
    pub blob_count: (usize, usize),
    /// Exudate radius range in pixels.
    pub blob_radius: (f64, f64),
    pub blob_intensity: (f64, f64),
    pub vessel_count: usize,
    pub texture_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            size: 64,
            disc_axis: (0.09, 0.13),
            disc_intensity: (0.75, 0.95),
            blob_count: (3, 7),
            blob_radius: (1.0, 3.0),
            blob_intensity: (0.7, 1.0),
            vessel_count: 4,
            texture_amplitude: 10.0,
            noise_std: 3.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn with_size(size: usize) -> Self {
        SyntheticSceneSpec {
            size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b && a >= 0.0;
        if self.size < 16 {
            return Err(Error::Config(format!("synthetic size {} below 16", self.size)));
        }
        if !ordered(self.disc_axis) || self.disc_axis.1 >= 0.4 || self.disc_axis.0 <= 0.0 {
            return Err(Error::Config("disc_axis must satisfy 0 < low <= high < 0.4".into()));
        }
        if !ordered(self.blob_radius) || self.blob_radius.0 < 0.5 {
            return Err(Error::Config("blob_radius must satisfy 0.5 <= low <= high".into()));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::Config("blob_count low exceeds high".into()));
        }
        for r in [self.disc_intensity, self.blob_intensity] {
            if !ordered(r) || r.1 > 1.0 {
                return Err(Error::Config("intensity ranges must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.r * self.r
    }
}

/// Geometry behind one generated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub disc: Ellipse,
    pub blobs: Vec<Blob>,
}

/// Pixel-centre rasterisation of an ellipse.
pub fn rasterize_ellipse(size: usize, e: &Ellipse) -> Tensor<f32> {
    Tensor::from_fn(&[size, size], |i| {
        e.contains((i / size) as f64, (i % size) as f64) as u8 as f32
    })
}

fn record_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn place_blobs(spec: &SyntheticSceneSpec, disc: &Ellipse, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let s = spec.size as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..2000 {
            let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
            let margin = r + 2.0;
            if s - margin <= margin {
                break;
            }
            let cy = rng.gen_range(margin..s - margin);
            let cx = rng.gen_range(margin..s - margin);
            // Clear of the disc by three pixels and of other blobs by two so
            // every blob is its own 8-connected component.
            let grown = Ellipse {
                ry: disc.ry + r + 3.0,
                rx: disc.rx + r + 3.0,
                ..*disc
            };
            if grown.contains(cy, cx) {
                continue;
            }
            if blobs
                .iter()
                .any(|b| ((b.cy - cy).powi(2) + (b.cx - cx).powi(2)).sqrt() < b.r + r + 2.5)
            {
                continue;
            }
            blobs.push(Blob { cy, cx, r });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::BlobsDoNotFit(count));
        }
    }
    Ok(blobs)
}

/// Point on a quadratic Bezier curve.
fn bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
        u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
    )
}

/// Generates record `index` of the stream defined by `seed`.
pub fn generate_scene(spec: &SyntheticSceneSpec, seed: u64, index: usize) -> Result<(ImageRecord, Scene)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, index));
    let n = spec.size;
    let s = n as f64;

    let ry = rng.gen_range(spec.disc_axis.0..=spec.disc_axis.1) * s;
    let rx = ry * rng.gen_range(0.8..=1.0);
    let disc = Ellipse {
        cy: rng.gen_range(0.3..0.7) * s,
        cx: if rng.gen_bool(0.5) { 0.25 } else { 0.75 } * s + rng.gen_range(-0.05..0.05) * s,
        ry,
        rx,
    };
    let count = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let blobs = place_blobs(spec, &disc, count, &mut rng)?;

    // Shared yellow tint of disc and exudates.
    let tint = [255.0, rng.gen_range(205.0..235.0), rng.gen_range(90.0..140.0)];
    let disc_level = rng.gen_range(spec.disc_intensity.0..=spec.disc_intensity.1);
    let blob_levels: Vec<f64> = blobs
        .iter()
        .map(|_| rng.gen_range(spec.blob_intensity.0..=spec.blob_intensity.1))
        .collect();
    let base = [rng.gen_range(130.0..160.0), rng.gen_range(55.0..75.0), rng.gen_range(20.0..35.0)];
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut vessel = vec![0.0f64; n * n];
    for _ in 0..spec.vessel_count {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(0.5..0.9) * s;
        let end = (disc.cy + angle.sin() * len, disc.cx + angle.cos() * len);
        let bend = (
            (disc.cy + end.0) / 2.0 + rng.gen_range(-0.15..0.15) * s,
            (disc.cx + end.1) / 2.0 + rng.gen_range(-0.15..0.15) * s,
        );
        let width = rng.gen_range(0.6..1.3);
        let steps = (len * 3.0) as usize;
        for k in 0..=steps {
            let (py, px) = bezier((disc.cy, disc.cx), bend, end, k as f64 / steps as f64);
            let (y0, y1) = ((py - 2.0).floor().max(0.0) as usize, (py + 2.0).ceil().min(s - 1.0) as usize);
            let (x0, x1) = ((px - 2.0).floor().max(0.0) as usize, (px + 2.0).ceil().min(s - 1.0) as usize);
            if py < -2.0 || px < -2.0 || py > s + 2.0 || px > s + 2.0 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((y as f64 - py).powi(2) + (x as f64 - px).powi(2)).sqrt();
                    let v = (1.0 - d / (width + 0.5)).clamp(0.0, 1.0);
                    vessel[y * n + x] = vessel[y * n + x].max(v);
                }
            }
        }
    }

    let mut rgb = vec![0.0f32; 3 * n * n];
    let mut od = vec![0.0f32; n * n];
    let mut ex = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (fy, fx) = (y as f64, x as f64);
            let r2 = ((fy - s / 2.0).powi(2) + (fx - s / 2.0).powi(2)) / (s * s / 4.0);
            let vignette = (1.0 - 0.35 * r2).max(0.3);
            let texture: f64 = waves
                .iter()
                .map(|(f, py, px)| (fy * f + py).sin() * (fx * f + px).cos())
                .sum::<f64>()
                / waves.len() as f64;
            let in_disc = disc.contains(fy, fx);
            let blob = blobs.iter().position(|b| b.contains(fy, fx));
            od[i] = in_disc as u8 as f32;
            ex[i] = blob.is_some() as u8 as f32;
            for c in 0..3 {
                let mut v = base[c] * vignette + spec.texture_amplitude * texture;
                if in_disc {
                    let radial = ((fy - disc.cy) / disc.ry).powi(2) + ((fx - disc.cx) / disc.rx).powi(2);
                    v = tint[c] * disc_level * (1.0 - 0.15 * radial);
                }
                if let Some(b) = blob {
                    v = tint[c] * blob_levels[b];
                }
                v *= 1.0 - 0.45 * vessel[i];
                v += rng.sample::<f64, _>(rand_distr::StandardNormal) * spec.noise_std;
                rgb[c * n * n + i] = v.round().clamp(0.0, 255.0) as f32;
            }
        }
    }

    let record = ImageRecord::new(
        format!("syn{index:04}"),
        Tensor::new(vec![3, n, n], rgb)?,
        Some(Tensor::new(vec![n, n], od)?),
        Some(Tensor::new(vec![n, n], ex)?),
    )?;
    Ok((record, Scene { disc, blobs }))
}

/// `n` records with exact masks, deterministic in `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic record count must be at least 1".into()));
    }
    (0..n).map(|i| generate_scene(spec, seed, i).map(|(r, _)| r)).collect()
}
