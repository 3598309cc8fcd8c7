//! Synthetic image datasets, PNG export and content digests.
//!
//! Experiments run on generated data so every run is reproducible from a
//! seed. Two families are provided: `shapes` (an antialiased geometric
//! figure per class over a random linear-gradient background) and
//! `textures` (oriented sinusoidal gratings, one orientation/frequency per
//! class). Per-image seeds are derived from the dataset seed, so generation
//! order and thread count cannot change the content.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::Threads;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// [N,C,H,W], values in [0,1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    /// Rows [start, start+len) as a batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<(Tensor, Vec<usize>)> {
        let n = self.images.shape()[0];
        if start + len > n {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for {n} samples",
                start + len
            )));
        }
        let rows: Vec<usize> = (start..start + len).collect();
        Ok((self.images.take_rows(&rows)?, rows.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Hex SHA-256 over shape, pixel payload, labels and class count.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(tensor_digest_bytes(&self.images));
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        h.update((self.classes as u32).to_le_bytes());
        hex(&h.finalize())
    }
}

fn tensor_digest_bytes(t: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 + t.shape().len() * 4 + t.numel() * 8);
    bytes.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        bytes.extend((d as u32).to_le_bytes());
    }
    bytes.extend(t.le_bytes());
    bytes
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a tensor's shape and exact f64 payload.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update(tensor_digest_bytes(t));
    hex(&h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Shapes,
    Textures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("images must be at least 2x2"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("classes must be positive"));
        }
        if self.kind == SyntheticKind::Shapes && self.classes > 4 {
            return Err(Error::invalid(
                "shapes supports at most 4 classes; use textures for more",
            ));
        }
        Ok(())
    }
}

/// Describes a generated dataset, including a digest of its exact contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SyntheticConfig,
    pub digest: String,
}

/// Generates `cfg.count` images with `labels[i] = i % classes`. Image `i`
/// depends only on the dataset seed and `i`.
pub fn generate(cfg: &SyntheticConfig, threads: &Threads) -> Result<Dataset> {
    cfg.validate()?;
    let images = threads.map(cfg.count, |i| {
        let mut rng = Rng::new(rng::derive(cfg.seed, i as u64));
        let label = i % cfg.classes;
        match cfg.kind {
            SyntheticKind::Shapes => shape_image(cfg, label, &mut rng),
            SyntheticKind::Textures => texture_image(cfg, label, &mut rng),
        }
    });
    let labels = (0..cfg.count).map(|i| i % cfg.classes).collect();
    Ok(Dataset {
        images: Tensor::stack(&images)?,
        labels,
        classes: cfg.classes,
    })
}

/// Linear-gradient background with independent uniform endpoint colors per
/// channel. Endpoints span the full [0,1] range, which keeps pixel variance
/// high across the dataset. Also returns each channel's mid color so shapes
/// can pick contrasting paint.
fn gradient_background(cfg: &SyntheticConfig, rng: &mut Rng) -> (Tensor, Vec<f64>) {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let horizontal = rng.next_u64() & 1 == 0;
    let mut data = vec![0.0; c * h * w];
    let mut mids = Vec::with_capacity(c);
    for ch in 0..c {
        let a = rng.next_f64();
        let b = rng.next_f64();
        mids.push(0.5 * (a + b));
        for y in 0..h {
            for x in 0..w {
                let t = if horizontal {
                    x as f64 / (w - 1) as f64
                } else {
                    y as f64 / (h - 1) as f64
                };
                data[(ch * h + y) * w + x] = a + (b - a) * t;
            }
        }
    }
    (Tensor::new_unchecked(vec![c, h, w], data), mids)
}

/// Signed distance to the class shape: circle, square, triangle, cross.
fn shape_distance(label: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match label {
        0 => (dx * dx + dy * dy).sqrt() - r,
        1 => dx.abs().max(dy.abs()) - r,
        2 => {
            // equilateral-ish triangle pointing up
            let qx = dx.abs();
            (qx * 0.866_025 + dy * 0.5).max(-dy) - 0.5 * r
        }
        _ => {
            let bar = 0.35 * r;
            let horiz = (dx.abs() - r).max(dy.abs() - bar);
            let vert = (dx.abs() - bar).max(dy.abs() - r);
            horiz.min(vert)
        }
    }
}

fn shape_image(cfg: &SyntheticConfig, label: usize, rng: &mut Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let (mut img, mids) = gradient_background(cfg, rng);
    let cx = (0.3 + 0.4 * rng.next_f64()) * w as f64;
    let cy = (0.3 + 0.4 * rng.next_f64()) * h as f64;
    let r = (0.2 + 0.15 * rng.next_f64()) * h.min(w) as f64;
    // paint sits at least 0.35 away (mod 1) from the background's mid color,
    // so the shape never vanishes into its background
    let color: Vec<f64> = mids
        .iter()
        .map(|m| (m + 0.35 + 0.3 * rng.next_f64()) % 1.0)
        .collect();

    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let d = shape_distance(label, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            // one-pixel antialiasing band
            let cover = (0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                for (ch, &col) in color.iter().enumerate() {
                    let p = &mut data[(ch * h + y) * w + x];
                    *p += (col - *p) * cover;
                }
            }
        }
    }
    img
}

fn texture_image(cfg: &SyntheticConfig, label: usize, rng: &mut Rng) -> Tensor {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    // class determines orientation and frequency; phase and amplitude vary
    // per image
    let angle = std::f64::consts::PI * label as f64 / cfg.classes as f64;
    let freq = 2.0 + (label % 3) as f64 * 1.5;
    let phase = rng.next_f64() * std::f64::consts::TAU;
    let amp = 0.25 + 0.15 * rng.next_f64();
    let (dirx, diry) = (angle.cos(), angle.sin());
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = 0.2 + 0.6 * rng.next_f64();
        let chphase = phase + ch as f64 * 0.7;
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 / w as f64) * dirx + (y as f64 / h as f64) * diry;
                let v = base + amp * (std::f64::consts::TAU * freq * u + chphase).sin();
                data[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new_unchecked(vec![c, h, w], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a [C,H,W] image (C = 1 or 3) as an 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    if image.shape().len() != 3 {
        return Err(Error::invalid(format!("save_png expects [C,H,W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let data = image.data();
    let io_err = |e: image::ImageError| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("png: {e}"),
    };
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(data[y as usize * w + x as usize])])
            });
            buf.save_with_format(path, image::ImageFormat::Png).map_err(io_err)
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |ch: usize| to_u8(data[(ch * h + y as usize) * w + x as usize]);
                image::Rgb([at(0), at(1), at(2)])
            });
            buf.save_with_format(path, image::ImageFormat::Png).map_err(io_err)
        }
        _ => Err(Error::invalid("save_png supports 1 or 3 channels")),
    }
}

/// Reads an 8-bit PNG back as [C,H,W] with values v/255.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("png: {e}"),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut data = vec![0.0; h * w];
            for (x, y, p) in buf.enumerate_pixels() {
                data[y as usize * w + x as usize] = p.0[0] as f64 / 255.0;
            }
            Tensor::new(vec![1, h, w], data)
        }
        other => {
            let buf = other.to_rgb8();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in buf.enumerate_pixels() {
                for ch in 0..3 {
                    data[(ch * h + y as usize) * w + x as usize] = p.0[ch] as f64 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
    }
}

/// Tiles a batch [N,C,H,W] into one PNG, `cols` images per row, with a
/// 2-pixel mid-gray gutter.
pub fn save_png_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    if images.shape().len() != 4 {
        return Err(Error::invalid("save_png_grid expects [N,C,H,W]"));
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    if n == 0 || cols == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let gut = 2usize;
    let gh = rows * h + (rows - 1) * gut;
    let gw = cols * w + (cols - 1) * gut;
    let mut grid = Tensor::filled(&[c, gh, gw], 0.5);
    let gd = grid.data_mut();
    let src = images.data();
    for i in 0..n {
        let (gy, gx) = ((i / cols) * (h + gut), (i % cols) * (w + gut));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    gd[(ch * gh + gy + y) * gw + gx + x] = src[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    save_png(path, &grid)
}
