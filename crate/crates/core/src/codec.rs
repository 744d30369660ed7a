//! Image codec: binary PPM (P6) plus PNG behind the same interface, and the
//! documented tensor <-> pixel mapping.
//!
//! Tensors hold `[3, h, w]` channel-planar reals in [-1, 1]; pixels are 8-bit
//! interleaved RGB. The affine map is `byte = round((v + 1) / 2 * 255)` with
//! round-half-away-from-zero and clamping, so -1.0 -> 0, 0.0 -> 128,
//! +1.0 -> 255; decoding is `v = byte / 255 * 2 - 1`.
//!
//! All writers go through a temp-file-plus-rename so failures never leave a
//! truncated output behind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes one scalar to its pixel byte.
pub fn scalar_to_byte(v: f32) -> u8 {
    let scaled = (v + 1.0) / 2.0 * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

/// Decodes one pixel byte to its scalar.
pub fn byte_to_scalar(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Converts a `[3, h, w]` tensor to interleaved RGB bytes.
pub fn tensor_to_rgb(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let [c, h, w] = crate::tensor::dims3(img, "tensor_to_rgb")?;
    if c != 3 {
        return Err(Error::Codec(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(scalar_to_byte(img.data()[ch * plane + i]));
        }
    }
    Ok((w, h, out))
}

/// Converts interleaved RGB bytes to a `[3, h, w]` tensor.
pub fn rgb_to_tensor(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    let plane = h * w;
    if rgb.len() != 3 * plane {
        return Err(Error::Codec(format!(
            "pixel payload: expected {} bytes, got {}",
            3 * plane,
            rgb.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = byte_to_scalar(rgb[3 * i + ch]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Serializes to P6 bytes.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (w, h, rgb) = tensor_to_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

/// Parses P6 bytes, reporting the byte offset of any header defect.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Codec("not a P6 file (magic mismatch at byte 0)".into()));
    }
    pos += 2;
    let w = read_ppm_int(bytes, &mut pos)?;
    let h = read_ppm_int(bytes, &mut pos)?;
    let maxval = read_ppm_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Codec(format!("unsupported maxval {maxval} at byte {pos}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Codec(format!("missing header terminator at byte {pos}")));
    }
    pos += 1;
    let want = 3 * w * h;
    let got = bytes.len() - pos;
    if got != want {
        return Err(Error::Codec(format!(
            "truncated or oversized P6 payload: expected {want} bytes, got {got}"
        )));
    }
    rgb_to_tensor(w, h, &bytes[pos..])
}

fn read_ppm_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Codec(format!("expected integer at byte {start}")));
    }
    let text = std::str::from_utf8(&bytes[start..*pos]).expect("digits are utf8");
    text.parse().map_err(|_| Error::Codec(format!("bad integer at byte {start}")))
}

/// Writes bytes via a temp file and atomic rename in the target directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes an image; `.ppm` and `.png` are selected by extension.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    match extension(path) {
        Ext::Ppm => atomic_write(path, &encode_ppm(img)?),
        Ext::Png => {
            let (w, h, rgb) = tensor_to_rgb(img)?;
            let mut bytes = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer =
                    enc.write_header().map_err(|e| Error::Codec(format!("png: {e}")))?;
                writer
                    .write_image_data(&rgb)
                    .map_err(|e| Error::Codec(format!("png: {e}")))?;
            }
            atomic_write(path, &bytes)
        }
    }
}

/// Reads an image; `.ppm` and `.png` are selected by extension.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    match extension(path) {
        Ext::Ppm => decode_ppm(&bytes),
        Ext::Png => {
            let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
            let mut reader = decoder.read_info().map_err(|e| Error::Codec(format!("png: {e}")))?;
            let mut buf = vec![0u8; reader.output_buffer_size()];
            let info =
                reader.next_frame(&mut buf).map_err(|e| Error::Codec(format!("png: {e}")))?;
            if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
                return Err(Error::Codec("png: only 8-bit RGB is supported".into()));
            }
            rgb_to_tensor(info.width as usize, info.height as usize, &buf[..info.buffer_size()])
        }
    }
}

/// Reads a grayscale injection mask: 255 = inject, 0 = keep, linear between.
///
/// Accepts any readable image; channels are averaged.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = read_image(path)?;
    let [_, h, w] = crate::tensor::dims3(&img, "mask")?;
    let plane = h * w;
    let mut data = vec![0.0f32; plane];
    for (i, v) in data.iter_mut().enumerate() {
        let mean =
            (img.data()[i] + img.data()[plane + i] + img.data()[2 * plane + i]) / 3.0;
        // [-1,1] scalar back to [0,1] coverage
        *v = ((mean + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w], data)
}

enum Ext {
    Ppm,
    Png,
}

fn extension(path: &Path) -> Ext {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "png" => Ext::Png,
        _ => Ext::Ppm,
    }
}
