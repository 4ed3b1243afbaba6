//! Image files and pixel-level transforms.
//!
//! Images are `(1, h, w, 3)` tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{decode_tensor, Real, Shape, Tensor, MAGIC};

pub const INPUT_HEIGHT: usize = 128;
pub const INPUT_WIDTH: usize = 64;

/// Parses a binary PPM (`P6`, maxval 255).
pub fn read_ppm<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (expected P6 magic)".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad PPM {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty PPM image {width}×{height}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * 3;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| format!("truncated PPM raster: need {need} bytes"))?;
    let scale = T::of(1.0 / 255.0);
    Tensor::new(
        Shape::new(1, height, width, 3),
        raster.iter().map(|b| T::of(*b as f64) * scale).collect(),
    )
    .map_err(|e| e.to_string())
}

/// Encodes the first image of `t` as `P6`, rounding values clamped to `[0, 1]`.
pub fn write_ppm<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::shape("write_ppm", format!("{s} is not an RGB image")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(
        t.data()[..s.sample_len()]
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a PPM or tensor-container image, resized to `size = (h, w)`.
pub fn load_image<T: Real>(path: &Path, size: (usize, usize)) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(MAGIC) {
        let (t, used) = decode_tensor::<T>(&bytes).map_err(|d| Error::format(path, d))?;
        if used != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor"));
        }
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::format(path, format!("tensor {s} is not a single RGB image")));
        }
        if t.data().iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
            return Err(Error::format(path, "pixel values outside [0, 1]"));
        }
        t
    } else {
        read_ppm(&bytes).map_err(|d| Error::format(path, d))?
    };
    Ok(resize_bilinear(&img, size))
}

/// Bilinear resampling with pixel-center alignment; a 2× reduction averages
/// each 2×2 block.
pub fn resize_bilinear<T: Real>(img: &Tensor<T>, (oh, ow): (usize, usize)) -> Tensor<T> {
    let s = img.shape();
    if (s.h, s.w) == (oh, ow) {
        return img.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (rows, cols) = (axis(oh, s.h), axis(ow, s.w));
    Tensor::from_fn(Shape::new(s.n, oh, ow, s.c), |n, y, x, c| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let p = |yy, xx| img.get(n, yy, xx, c).as_f64();
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        T::of(top * (1.0 - fy) + bottom * fy)
    })
}

pub fn flip_horizontal<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let w = img.shape().w;
    Tensor::from_fn(img.shape(), |n, y, x, c| img.get(n, y, w - 1 - x, c))
}

/// Shifts content by `(dy, dx)` pixels, filling uncovered pixels with zero.
pub fn translate<T: Real>(img: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = img.shape();
    Tensor::from_fn(s, |n, y, x, c| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
            T::zero()
        } else {
            img.get(n, sy as usize, sx as usize, c)
        }
    })
}
