//! Image ingestion and export. Every loader returns `(N, H, W, C)` tensors
//! with pixels in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetFormat {
    /// IDX image container (MNIST family).
    IdxImages,
    /// Directory of PNG files.
    RawDir,
    /// Procedural shapes; `path` is ignored.
    #[default]
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" | "idx-images" => Ok(DatasetFormat::IdxImages),
            "raw-dir" => Ok(DatasetFormat::RawDir),
            "synthetic" => Ok(DatasetFormat::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset format '{other}' (expected idx-images, raw-dir or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Side length after resizing.
    pub image_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Raw-dir only: side of the centered square cut before resizing;
    /// `None` uses the shorter image side.
    pub center_crop: Option<usize>,
    /// Synthetic only: number of images.
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            path: PathBuf::new(),
            format: DatasetFormat::Synthetic,
            image_size: 16,
            channels: 1,
            center_crop: None,
            count: 4096,
            seed: 0,
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Tensor<f32>> {
    match spec.format {
        DatasetFormat::IdxImages => {
            if spec.channels != 1 {
                return Err(Error::Config("IDX images are single-channel".into()));
            }
            let images = load_idx(&spec.path)?;
            if images.shape()[1] == spec.image_size && images.shape()[2] == spec.image_size {
                Ok(images)
            } else {
                resize_images(&images, spec.image_size)
            }
        }
        DatasetFormat::RawDir => load_raw_dir(&spec.path, spec.image_size, spec.channels, spec.center_crop),
        DatasetFormat::Synthetic => {
            if spec.channels != 1 {
                return Err(Error::Config("the synthetic dataset is single-channel".into()));
            }
            Ok(synthetic_shapes(spec.count, spec.image_size, spec.seed))
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Parses an IDX image file: big-endian magic `0x00000803`, three
/// big-endian `u32` sizes `(N, rows, cols)`, then `N * rows * cols` bytes.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    parse_idx(&read(path)?, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 16 {
        return Err(fail(
            bytes.len(),
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4-byte slice"));
    let magic = word(0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(fail(0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")));
    }
    let (n, rows, cols) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| fail(4, "dimension product overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated payload: expected {expected} bytes for {n}x{rows}x{cols}, found {}",
                payload.len()
            ),
        ));
    }
    let data = payload[..expected].iter().map(|&b| byte_to_unit(b)).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

/// Resizes every image and channel to `size x size` with a triangle filter.
pub fn resize_images(images: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize_images", format!("expected (N, H, W, C), got {s:?}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0f32; n * size * size * c];
    for i in 0..n {
        for ch in 0..c {
            let plane = ImageBuffer::<Luma<f32>, Vec<f32>>::from_fn(w as u32, h as u32, |x, y| {
                Luma([images.data()[((i * h + y as usize) * w + x as usize) * c + ch]])
            });
            let r = imageops::resize(&plane, size as u32, size as u32, FilterType::Triangle);
            for (x, y, p) in r.enumerate_pixels() {
                out[((i * size + y as usize) * size + x as usize) * c + ch] = p.0[0];
            }
        }
    }
    Tensor::new(vec![n, size, size, c], out)
}

/// Loads every `.png` in `dir` (sorted by name), center-crops, resizes.
pub fn load_raw_dir(dir: impl AsRef<Path>, size: usize, channels: usize, crop: Option<usize>) -> Result<Tensor<f32>> {
    let dir = dir.as_ref();
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("{}: no PNG files found", dir.display())));
    }
    let mut data = Vec::with_capacity(files.len() * size * size * channels);
    for f in &files {
        let mut img = image::open(f)?;
        let (w, h) = (img.width(), img.height());
        let side = crop.map_or(w.min(h), |c| c as u32);
        if side == 0 || side > w || side > h {
            return Err(Error::Config(format!(
                "{}: crop {side} does not fit a {w}x{h} image",
                f.display()
            )));
        }
        img = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
        let img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
        if channels == 1 {
            data.extend(img.to_luma8().into_raw().into_iter().map(byte_to_unit));
        } else {
            data.extend(img.to_rgb8().into_raw().into_iter().map(byte_to_unit));
        }
    }
    Tensor::new(vec![files.len(), size, size, channels], data)
}

/// Procedural grayscale shapes on a dark background: discs, rings,
/// squares, bars and crosses at random positions, sizes and brightness,
/// anti-aliased by 4x4 supersampling.
pub fn synthetic_shapes(count: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * size * size);
    let sz = size as f32;
    for _ in 0..count {
        let kind = rng.random_range(0..5u8);
        let cx = rng.random_range(0.3..0.7) * sz;
        let cy = rng.random_range(0.3..0.7) * sz;
        let r = rng.random_range(0.18..0.35) * sz;
        let thick = rng.random_range(0.08..0.16) * sz;
        let level = rng.random_range(0.3f32..1.0);
        let inside = |x: f32, y: f32| {
            let (dx, dy) = (x - cx, y - cy);
            match kind {
                0 => dx * dx + dy * dy <= r * r,
                1 => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= r && d >= r - thick
                }
                2 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                3 => dx.abs() <= r && dy.abs() <= thick / 2.0,
                _ => (dx.abs() <= r && dy.abs() <= thick / 2.0) || (dy.abs() <= r && dx.abs() <= thick / 2.0),
            }
        };
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f32 + (sx as f32 + 0.5) / 4.0;
                        let py = y as f32 + (sy as f32 + 0.5) / 4.0;
                        hits += inside(px, py) as u32;
                    }
                }
                let cover = hits as f32 / 16.0;
                data.push(-1.0 + cover * (1.0 + level));
            }
        }
    }
    Tensor::new(vec![count, size, size, 1], data).expect("shape matches data")
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles `(N, H, W, C)` images row-major into a grid PNG, clamping to
/// `[-1, 1]` and mapping to 8 bits. `C` must be 1 or 3.
pub fn save_png_grid<F: Element>(images: &Tensor<F>, columns: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (buf, w, h, c) = grid_bytes(images, columns)?;
    let color = if c == 1 { image::ColorType::L8 } else { image::ColorType::Rgb8 };
    image::save_buffer_with_format(path, &buf, w, h, color, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Raw 8-bit grid `(bytes, width, height, channels)` as written by
/// [`save_png_grid`].
pub fn grid_bytes<F: Element>(images: &Tensor<F>, columns: usize) -> Result<(Vec<u8>, u32, u32, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 || !(s[3] == 1 || s[3] == 3) {
        return Err(Error::shape("save_png_grid", format!("expected (N, H, W, 1|3), got {s:?}")));
    }
    if columns == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut buf = vec![0u8; gw * gh * c];
    for i in 0..n {
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = images.data()[((i * h + y) * w + x) * c + ch].to_f64();
                    buf[((ty * h + y) * gw + tx * w + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    Ok((buf, gw as u32, gh as u32, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IDX_IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_header_and_pixel_range() {
        let payload: Vec<u8> = (0..2 * 3 * 2).map(|i| [0u8, 255, 128][i % 3]).collect();
        let bytes = idx_bytes(2, 3, 2, &payload);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let t = parse_idx(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 1]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 128.0 / 127.5 + 1.0).abs() < 1e-7);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let mut bytes = idx_bytes(2, 2, 2, &[0; 8]);
        bytes[3] = 1;
        let e = parse_idx(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }));
        let bytes = idx_bytes(2, 2, 2, &[0; 5]);
        let msg = parse_idx(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(msg.contains("expected 8 bytes") && msg.contains("found 5"), "{msg}");
        assert!(parse_idx(&[0, 0, 8], Path::new("x")).is_err());
    }

    #[test]
    fn grid_tiling() {
        let images = Tensor::<f64>::from_fn(vec![16, 3, 2, 1], |i| if i / 6 == 5 { -1.0 } else { 0.5 });
        let (buf, w, h, c) = grid_bytes(&images, 4).unwrap();
        assert_eq!((w, h, c), (8, 12, 1));
        // image 5 sits at tile row 1, column 1
        for y in 3..6 {
            for x in 2..4 {
                assert_eq!(buf[y * 8 + x], 0);
            }
        }
        assert_eq!(buf[0], to_byte(0.5));
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(to_byte(-1.0), 0);
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let images = Tensor::<f32>::from_fn(vec![5, 4, 4, 3], |i| ((i * 37) % 200) as f32 / 100.0 - 1.0);
        save_png_grid(&images, 2, &p).unwrap();
        let (buf, w, h, _) = grid_bytes(&images, 2).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!((back.width(), back.height()), (w, h));
        assert_eq!(back.into_raw(), buf);
    }

    #[test]
    fn raw_dir_crop_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(12, 8, |x, _| if !(2..10).contains(&x) { image::Rgb([255, 0, 0]) } else { image::Rgb([0, 0, 0]) });
        img.save(dir.path().join("a.png")).unwrap();
        let t = load_raw_dir(dir.path(), 4, 3, None).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4, 3]);
        // the red border columns are cropped away
        assert!(t.data().iter().all(|&v| v == -1.0));
        assert!(load_raw_dir(dir.path(), 4, 3, Some(9)).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let t = Tensor::full(vec![2, 28, 28, 1], 0.25f32);
        let r = resize_images(&t, 16).unwrap();
        assert_eq!(r.shape(), &[2, 16, 16, 1]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_shapes(64, 16, 1);
        assert!(a.bit_eq(&synthetic_shapes(64, 16, 1)));
        assert!(!a.bit_eq(&synthetic_shapes(64, 16, 2)));
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let lit = a.data().iter().filter(|&&v| v > -1.0).count();
        assert!(lit > a.numel() / 20 && lit < a.numel() / 2);
    }
}
