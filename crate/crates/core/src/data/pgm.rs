//! Binary 8-bit PGM (`P5`) images and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Encodes an `H×W` image with values in `[0, 1]`, quantized to `round(v·255)`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = image.shape() else {
        return Err(format(format!(
            "expected an H×W image, got shape {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(format(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Skips whitespace and `#` comments, then reads one decimal header field.
fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| format("malformed PGM header"))
}

/// Decodes a `P5` file with maxval 255 into `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(m) if m[0] == b'P' => {
            return Err(format(format!(
                "unsupported PGM variant `{}`; only binary P5 is read",
                String::from_utf8_lossy(m)
            )))
        }
        _ => return Err(format("missing P5 magic")),
    }
    let mut pos = 2;
    let w = header_field(bytes, &mut pos)?;
    let h = header_field(bytes, &mut pos)?;
    let maxval = header_field(bytes, &mut pos)?;
    if w == 0 || h == 0 {
        return Err(format("zero image extent"));
    }
    if maxval != 255 {
        return Err(format(format!("maxval {maxval} unsupported; expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format("malformed PGM header"));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != w * h {
        return Err(format(format!(
            "payload has {} bytes, expected {} for {w}x{h}",
            payload.len(),
            w * h
        )));
    }
    Ok((h, w, payload.to_vec()))
}

/// Decodes a `P5` file into an `H×W` tensor of `byte / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, px) = decode_pgm(bytes)?;
    Tensor::new(
        vec![h, w],
        px.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Encodes a 0/1 mask as a PGM holding 0 and 255.
pub fn encode_mask(mask: &Tensor) -> Result<Vec<u8>> {
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(format(format!("mask value {v} is not 0 or 1")));
    }
    encode_pgm(mask)
}

/// Decodes a mask PGM; every pixel must be 0 or 255.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, px) = decode_pgm(bytes)?;
    if let Some(b) = px.iter().find(|&&b| b != 0 && b != 255) {
        return Err(format(format!("mask pixel {b} is not 0 or 255")));
    }
    Tensor::new(
        vec![h, w],
        px.iter()
            .map(|&b| if b == 255 { 1.0 } else { 0.0 })
            .collect(),
    )
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(image)?)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_mask(mask)?)?)
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    decode_mask(&fs::read(path)?)
}

/// Rounds an image to the values a PGM round trip reproduces.
pub fn quantize(image: &Tensor) -> Tensor {
    let data = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}
