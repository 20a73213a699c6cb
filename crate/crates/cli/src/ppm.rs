//! Binary portable pixmap (P6) output.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Result};
use segattack::synthdata::{class_color, LabelMap};
use segattack::tensorcore::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// `[C, H, W]` image in `[0, 1]`; one channel is written as gray, three as RGB.
pub fn image_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    ensure!(c == 1 || c == 3, "can only write 1- or 3-channel images, got {c}");
    let d = img.data();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            rgb.push(to_byte(d[(ch % c) * h * w + i]));
        }
    }
    Ok(encode(w, h, &rgb))
}

pub fn labels_bytes(labels: &LabelMap) -> Vec<u8> {
    let rgb: Vec<u8> = labels
        .classes
        .iter()
        .flat_map(|&c| class_color(c).map(to_byte))
        .collect();
    encode(labels.width, labels.height, &rgb)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, image_bytes(img)?)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, labels_bytes(labels))?;
    Ok(())
}

/// Header fields and pixel bytes of a P6 file.
#[cfg(test)]
pub fn parse(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, "truncated pixmap header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    ensure!(fields[0] == "P6" && fields[3] == "255", "not an 8-bit P6 pixmap");
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let body = &bytes[pos + 1..];
    ensure!(
        body.len() == w * h * 3,
        "pixmap body has {} bytes, expected {}",
        body.len(),
        w * h * 3
    );
    Ok((w, h, body))
}
