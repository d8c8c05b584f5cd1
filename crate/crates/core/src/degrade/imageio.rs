//! 8-bit image files: PNG through the `image` crate, binary PPM (P6) and
//! PGM (P5) by hand.
//!
//! Images load as `(1, C, H, W)` tensors with `C` 1 or 3 and values
//! `byte / 255`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::fsio::{read_file, write_atomic};
use crate::tensor::{Scalar, Tensor};

/// `round(255·v)` with halves rounded up, after clamping to `[0, 1]`.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_u8<T: Scalar>(b: u8) -> T {
    T::from_f64(b as f64 / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Png,
    Pnm,
}

fn kind_of(path: &Path) -> Result<Kind> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => Ok(Kind::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(Kind::Pnm),
        _ => Err(Error::Format(format!(
            "{}: expected a .png, .ppm or .pgm file",
            path.display()
        ))),
    }
}

/// Interleaved 8-bit samples from the first image of a tensor.
pub fn to_bytes<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let [n, c, h, w] = img.shape();
    if n == 0 || !matches!(c, 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "cannot encode a tensor of shape {:?} as an image",
            img.shape()
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_u8(img.get(0, ch, y, x)));
            }
        }
    }
    Ok((c, h, w, out))
}

pub fn from_bytes<T: Scalar>(c: usize, h: usize, w: usize, bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() != c * h * w {
        return Err(Error::Format(format!(
            "expected {} samples, found {}",
            c * h * w,
            bytes.len()
        )));
    }
    Ok(Tensor::from_fn([1, c, h, w], |[_, ch, y, x]| {
        from_u8(bytes[(y * w + x) * c + ch])
    }))
}

pub fn encode_pnm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w, px) = to_bytes(img)?;
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn decode_pnm<T: Scalar>(data: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let c = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PNM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PNM maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    let body = data
        .get(pos + 1..)
        .ok_or_else(|| Error::Format("truncated PNM".into()))?;
    let need = c * h * w;
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated PNM: {} of {need} samples",
            body.len()
        )));
    }
    from_bytes(c, h, w, &body[..need])
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w, px) = to_bytes(img)?;
    let dynimg = if c == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, px).expect("sized"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, px).expect("sized"))
    };
    let mut out = Cursor::new(Vec::new());
    dynimg.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png<T: Scalar>(data: &[u8]) -> Result<Tensor<T>> {
    let img = image::load_from_memory_with_format(data, ImageFormat::Png)?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let g = img.to_luma8();
        from_bytes(1, g.height() as usize, g.width() as usize, g.as_raw())
    } else {
        let rgb = img.to_rgb8();
        from_bytes(3, rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }
}

pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let kind = kind_of(path)?;
    let data = read_file(path)?;
    match kind {
        Kind::Png => decode_png(&data),
        Kind::Pnm => decode_pnm(&data),
    }
}

/// Writes atomically; the format follows the file extension.
pub fn write_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let bytes = match kind_of(path)? {
        Kind::Png => encode_png(img)?,
        Kind::Pnm => encode_pnm(img)?,
    };
    write_atomic(path, &bytes)
}
