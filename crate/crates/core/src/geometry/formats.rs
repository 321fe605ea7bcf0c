//! PFM (disparity), PGM/PPM (8-bit images) and a lossless raw image format.

use std::fs;
use std::path::Path;

use numkernel::Tensor;

use super::image::Image;
use super::maps::DenseMap;
use crate::error::{Error, Result};

/// Writes a single-channel little-endian PFM. Invalid pixels are stored as +inf.
pub fn encode_pfm(map: &DenseMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    // PFM rows run bottom to top.
    for v in (0..map.height).rev() {
        for u in 0..map.width {
            let i = v * map.width + u;
            let x = if map.valid[i] { map.values[i] as f32 } else { f32::INFINITY };
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], what: &str) -> Result<DenseMap> {
    let (header, body) = split_header(bytes, 3, what)?;
    if header[0] != "Pf" {
        return Err(Error::corrupt(what, format!("expected Pf, found {}", header[0])));
    }
    let (w, h) = parse_dims(&header[1], what)?;
    let scale: f64 = header[2]
        .trim()
        .parse()
        .map_err(|_| Error::corrupt(what, "bad PFM scale"))?;
    if body.len() != w * h * 4 {
        return Err(Error::corrupt(what, format!("expected {} data bytes, found {}", w * h * 4, body.len())));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, u) = (k / w, k % w);
        values[(h - 1 - row) * w + u] = x as f64;
    }
    DenseMap::from_values(w, h, values)
}

/// 8-bit binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&x| quantize(x)));
    out
}

pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pnm(bytes: &[u8], what: &str) -> Result<Image> {
    let (header, body) = split_header(bytes, 3, what)?;
    let channels = match header[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::corrupt(what, format!("unsupported magic {m}"))),
    };
    let (w, h) = parse_dims(&header[1], what)?;
    if header[2].trim() != "255" {
        return Err(Error::corrupt(what, "only 8-bit images are supported"));
    }
    if body.len() != w * h * channels {
        return Err(Error::corrupt(
            what,
            format!("expected {} data bytes, found {}", w * h * channels, body.len()),
        ));
    }
    Image::new(w, h, channels, body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// 8-bit mask levels as a PGM.
pub fn encode_mask(mask: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(mask);
    out
}

pub fn decode_mask(bytes: &[u8], what: &str) -> Result<(Vec<u8>, usize, usize)> {
    let (header, body) = split_header(bytes, 3, what)?;
    if header[0] != "P5" || header[2].trim() != "255" {
        return Err(Error::corrupt(what, "mask must be an 8-bit P5 PGM"));
    }
    let (w, h) = parse_dims(&header[1], what)?;
    if body.len() != w * h {
        return Err(Error::corrupt(what, format!("expected {} data bytes, found {}", w * h, body.len())));
    }
    Ok((body.to_vec(), w, h))
}

/// Lossless `[H, W, C]` f64 dump in the numkernel tensor format.
pub fn save_raw(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let t = Tensor::new(&[img.height, img.width, img.channels], img.data.clone())?;
    numkernel::io::save_tensor(path, &t)?;
    Ok(())
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Image> {
    let t = numkernel::io::load_tensor(path)?;
    let s = t.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::corrupt("raw image", format!("rank {} tensor", s.len())));
    }
    Image::new(s[1], s[0], s[2], t.into_data())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits off `n` whitespace-separated header lines (comments skipped) and
/// returns them with the remaining payload.
fn split_header<'a>(bytes: &'a [u8], n: usize, what: &str) -> Result<(Vec<String>, &'a [u8])> {
    let mut lines = Vec::with_capacity(n);
    let mut pos = 0;
    while lines.len() < n {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::corrupt(what, "truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::corrupt(what, "non-text header"))?
            .trim()
            .to_string();
        pos += end + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        lines.push(line);
    }
    Ok((lines, &bytes[pos..]))
}

fn parse_dims(line: &str, what: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(Error::corrupt(what, format!("bad dimensions line {line:?}"))),
    }
}
