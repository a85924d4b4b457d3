//! Image I/O, preprocessing and dataset selection.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::split_counts;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape("rgb image", &[pixels.len()], &[height, width, 3]));
        }
        Ok(Self { width, height, pixels })
    }
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn ppm_token<R: BufRead>(r: &mut R) -> std::io::Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
        } else if c.is_ascii_whitespace() {
            if !token.is_empty() {
                return Ok(token);
            }
        } else {
            token.push(c as char);
        }
    }
}

/// Reads a binary (P6) PPM with maxval at most 255.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: &str| image_err(path, msg);
    if ppm_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut header = [0usize; 3];
    for v in &mut header {
        *v = ppm_token(&mut r)?.parse().map_err(|_| bad("malformed PPM header"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels).map_err(|_| bad("truncated pixel data"))?;
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    RgbImage::new(width, height, pixels)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    w.flush()?;
    Ok(())
}

const PPM_EXTENSIONS: [&str; 2] = ["ppm", "pnm"];
#[cfg(feature = "image-formats")]
const OTHER_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
#[cfg(not(feature = "image-formats"))]
const OTHER_EXTENSIONS: [&str; 0] = [];

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

pub fn is_supported_image(path: &Path) -> bool {
    extension(path).is_some_and(|e| PPM_EXTENSIONS.contains(&e.as_str()) || OTHER_EXTENSIONS.contains(&e.as_str()))
}

/// Decodes any supported image file to RGB.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let ext = extension(path).unwrap_or_default();
    if PPM_EXTENSIONS.contains(&ext.as_str()) {
        return read_ppm(path);
    }
    #[cfg(feature = "image-formats")]
    {
        let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::new(w as usize, h as usize, img.into_raw())
    }
    #[cfg(not(feature = "image-formats"))]
    Err(image_err(path, "unsupported format (built without image-formats)"))
}

/// Supported image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_supported_image(&path) {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// `[3, H, W]` planes with values mapped `v / 127.5 - 1`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::from_parts(vec![3, img.height, img.width], data)
}

/// Inverse of [`to_tensor`], clamping to `[-1, 1]` and rounding.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::shape("to_rgb", t.shape(), &[3, 0, 0])),
    };
    let plane = h * w;
    let mut pixels = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let v = t.data()[c * plane + i].clamp(-1.0, 1.0);
            pixels[i * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    RgbImage::new(w, h, pixels)
}

/// Largest centred square of a `[C, H, W]` tensor.
pub fn center_crop(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("center_crop", t.shape(), &[3, 0, 0])),
    };
    let s = h.min(w);
    let (top, left) = ((h - s) / 2, (w - s) / 2);
    let mut data = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for y in 0..s {
            let row = (ch * h + top + y) * w + left;
            data.extend_from_slice(&t.data()[row..row + s]);
        }
    }
    Tensor::new(vec![c, s, s], data)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("resize", t.shape(), &[3, out_h, out_w])),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = t.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| src[base + y * w + x];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

/// Centre crop to square, then bilinear resize to `size`.
pub fn prepare(img: &RgbImage, size: usize) -> Result<Tensor> {
    resize_bilinear(&center_crop(&to_tensor(img))?, size, size)
}

/// Seeded images of one to three flat-coloured discs on a flat background.
pub fn synthetic_discs(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    (0..count)
        .map(|_| {
            let mut color = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let bg = color();
            let mut data = vec![0.0; 3 * plane];
            for (c, &v) in bg.iter().enumerate() {
                data[c * plane..(c + 1) * plane].fill(v);
            }
            let discs = rng.gen_range(1..=3);
            for _ in 0..discs {
                let fg = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let s = size as f64;
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let r = rng.gen_range(0.12 * s..0.35 * s);
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy * dy + dx * dx <= r * r {
                            for (c, &v) in fg.iter().enumerate() {
                                data[c * plane + y * size + x] = v;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![3, size, size], data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
    pub train_names: Vec<String>,
    pub val_names: Vec<String>,
}

impl Dataset {
    /// Splits `images` in order: the first `floor(n * fraction)` train.
    pub fn split(images: Vec<Tensor>, names: Vec<String>, fraction: f64) -> Self {
        let (n_train, _) = split_counts(images.len(), fraction);
        let mut train = images;
        let val = train.split_off(n_train);
        let mut train_names = names;
        let val_names = train_names.split_off(n_train);
        Self {
            train,
            val,
            train_names,
            val_names,
        }
    }

    pub fn synthetic(count: usize, size: usize, split_fraction: f64, seed: u64) -> Self {
        let names = (0..count).map(|i| format!("synthetic_{i:04}")).collect();
        Self::split(synthetic_discs(count, size, seed), names, split_fraction)
    }
}

/// Sorted file names, shuffled by `seed`; the first `image_count` decodable
/// images are cropped, resized to `image_size` and split.
pub fn load_dataset(
    dir: &Path,
    image_count: usize,
    image_size: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut files = list_images(dir)?;
    if files.len() < image_count {
        return Err(Error::Dataset(format!(
            "{} holds {} images, {image_count} requested",
            dir.display(),
            files.len()
        )));
    }
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut images = Vec::with_capacity(image_count);
    let mut names = Vec::with_capacity(image_count);
    for path in files {
        if images.len() == image_count {
            break;
        }
        match read_image(&path).and_then(|img| prepare(&img, image_size)) {
            Ok(t) => {
                images.push(t);
                names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.len() < image_count {
        return Err(Error::Dataset(format!(
            "only {} decodable images in {}, {image_count} requested",
            images.len(),
            dir.display()
        )));
    }
    Ok(Dataset::split(images, names, split_fraction))
}

/// Tiles `[3, S, S]` images left to right, top to bottom.
pub fn tile(rows: &[Vec<Tensor>]) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::contract("tile needs at least one image"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (width, height) = (cols * w, rows.len() * h);
    let mut pixels = vec![0u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::shape("tile", t.shape(), first.shape()));
            }
            let img = to_rgb(t)?;
            for y in 0..h {
                let dst = ((r * h + y) * width + c * w) * 3;
                pixels[dst..dst + w * 3].copy_from_slice(&img.pixels[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    RgbImage::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(3, 2, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    }

    #[test]
    fn ppm_with_comment_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        std::fs::write(&path, b"P6\n# hi\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(read_ppm(&path).unwrap().pixels, vec![1, 2, 3]);
        std::fs::write(&path, b"P3\n1 1\n255\n1 2 3").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Image { .. })));
        std::fs::write(&path, b"P6\n2 2\n255\n\x01").unwrap();
        assert!(read_ppm(&path).is_err());
    }

    #[test]
    fn tensor_mapping() {
        let img = RgbImage::new(1, 1, vec![0, 255, 51]).unwrap();
        let t = to_tensor(&img);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(to_rgb(&t).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let t = Tensor::full(&[3, 5, 7], 0.25);
        let r = resize_bilinear(&center_crop(&t).unwrap(), 9, 9).unwrap();
        assert_eq!(r.shape(), &[3, 9, 9]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn crop_takes_centre() {
        let t = Tensor::from_fn(&[1, 2, 4], |i| i as f64);
        assert_eq!(center_crop(&t).unwrap().data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = synthetic_discs(4, 16, 9);
        assert_eq!(a, synthetic_discs(4, 16, 9));
        assert_ne!(a, synthetic_discs(4, 16, 10));
        assert!(a.iter().all(|t| t.max_abs() <= 1.0 && t.shape() == [3, 16, 16]));
    }

    #[test]
    fn load_dataset_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..12 {
            let img = RgbImage::new(6, 4, vec![(i * 20) as u8; 72]).unwrap();
            write_ppm(&dir.path().join(format!("img{i:02}.ppm")), &img).unwrap();
        }
        std::fs::write(dir.path().join("broken.ppm"), b"garbage").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"x").unwrap();
        let a = load_dataset(dir.path(), 10, 4, 0.9, 5).unwrap();
        let b = load_dataset(dir.path(), 10, 4, 0.9, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len()), (9, 1));
        assert!(!a.train_names.iter().any(|n| n == "broken.ppm"));
        assert!(load_dataset(dir.path(), 13, 4, 0.9, 5).is_err());
    }
}
