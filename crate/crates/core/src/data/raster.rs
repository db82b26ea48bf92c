//! Binary netpbm rasters: P6 images and P5 label maps, 8 bits per sample.

use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 encoding of a 1x3xHxW image with values in [0, 1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::dim(format!("PPM needs a 1x3xHxW image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic '{}'", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(start, "header field out of range"))?;
        if *field == 0 {
            return Err(Error::format(
                start,
                format!("header field {i} must be positive"),
            ));
        }
    }
    if fields[2] != 255 {
        return Err(Error::format(
            pos,
            format!("unsupported maxval {}, expected 255", fields[2]),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::format(
                pos,
                "expected one whitespace byte after maxval",
            ))
        }
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let body = &bytes[header.payload..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster payload: {} of {need} bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format(
            header.payload + need,
            "trailing bytes after raster payload",
        ));
    }
    Ok(body)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let body = payload(bytes, &h, 3)?;
    let mut t = Tensor::zeros(Shape::new(1, 3, h.height, h.width));
    for y in 0..h.height {
        for x in 0..h.width {
            for c in 0..3 {
                t.set(0, c, y, x, body[3 * (y * h.width + x) + c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    let body = payload(bytes, &h, 1)?;
    LabelMap::new(h.height, h.width, body.to_vec())
}

pub fn write_raster(sample: &Sample, image_path: &Path, label_path: &Path) -> Result<()> {
    fs::write(image_path, encode_ppm(&sample.image)?)?;
    fs::write(label_path, encode_pgm(&sample.labels))?;
    Ok(())
}

pub fn read_raster(image_path: &Path, label_path: &Path) -> Result<Sample> {
    let image = decode_ppm(&fs::read(image_path)?)?;
    let labels = decode_pgm(&fs::read(label_path)?)?;
    Sample::new(image, labels)
}
