use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Header of a planar float dump: magic, then `u32` version, channels,
/// height and width, all little-endian, followed by `f32` samples in
/// channel-major order.
pub const PLANAR_MAGIC: &[u8; 4] = b"HGPF";
pub const PLANAR_VERSION: u32 = 1;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn dims(t: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(Error::shape(op, format!("[{channels}, H, W]"), format!("{s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_png_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = dims(t, 3, "save_png_rgb")?;
    let d = t.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes a `[1, H, W]` tensor in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_png_gray(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = dims(t, 1, "save_png_gray")?;
    let d = t.data();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])]));
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_png_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

pub fn load_png_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Ok(Tensor::new(&[1, h, w], data))
}

pub fn save_planar_f32(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("save_planar_f32", "[C, H, W]", format!("{s:?}")));
    }
    let mut buf = Vec::with_capacity(20 + 4 * t.len());
    buf.extend_from_slice(PLANAR_MAGIC);
    for v in [PLANAR_VERSION, s[0] as u32, s[1] as u32, s[2] as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_planar_f32(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 20 || &buf[..4] != PLANAR_MAGIC {
        return Err(image_err(path, "not a planar float dump"));
    }
    let word = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    if word(0) as u32 != PLANAR_VERSION {
        return Err(image_err(path, format!("unsupported planar dump version {}", word(0))));
    }
    let (c, h, w) = (word(1), word(2), word(3));
    let n = c * h * w;
    if buf.len() != 20 + 4 * n {
        return Err(image_err(path, "truncated planar dump"));
    }
    let data = buf[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(&[c, h, w], data))
}
