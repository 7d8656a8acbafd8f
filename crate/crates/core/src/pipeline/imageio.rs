//! Grayscale image files: PNG (8 or 16 bit) and binary PGM.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

/// Reads a grayscale image and scales it to `[0, 1]` by its bit depth.
pub fn read_gray(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, format!("cannot read: {e}")))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|m| Error::file(path, m))
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes).map_err(|m| Error::file(path, m))
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        Err(Error::file(path, "only binary grayscale PGM (P5) is supported"))
    } else {
        Err(Error::file(path, "unrecognised image format, expected PNG or PGM"))
    }
}

/// Reads a label image and binarizes it at half intensity.
pub fn read_label(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.map(|v| (v >= 0.5) as u8))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format!("invalid PNG: {e}"))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(format!("expected a grayscale image, found {color:?}"));
    }
    let size = reader.output_buffer_size().ok_or("PNG too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format!("invalid PNG: {e}"))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = match depth {
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..];
                (0..w).map(move |x| u16::from_be_bytes([row[2 * x], row[2 * x + 1]]) as f32 / 65535.0)
            })
            .collect(),
        _ => (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..];
                (0..w).map(move |x| row[x] as f32 / 255.0)
            })
            .collect(),
    };
    Grid::new(h, w, data).map_err(|e| e.to_string())
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    // header: magic, width, height, maxval separated by whitespace, comments allowed
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad PGM header field at byte {start}"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("PGM header must end with a single whitespace byte".into());
    }
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * bpp;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(format!("PGM data truncated: need {need} bytes, have {}", body.len()));
    }
    let scale = maxval as f32;
    let data = if bpp == 1 {
        body[..need].iter().map(|&v| (v as f32 / scale).min(1.0)).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    Grid::new(h, w, data).map_err(|e| e.to_string())
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::file(path, format!("cannot create: {e}")))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let io = |e: png::EncodingError| Error::file(path, e.to_string());
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(data).map_err(io)?;
    writer.finish().map_err(io)
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// 16-bit grayscale PNG, enough precision for probability maps.
pub fn write_png16(path: &Path, image: &Image) -> Result<()> {
    let data: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| (quantize(v, 65535.0) as u16).to_be_bytes())
        .collect();
    write_png(path, image.width(), image.height(), png::BitDepth::Sixteen, &data)
}

pub fn write_png8(path: &Path, image: &Image) -> Result<()> {
    let data: Vec<u8> = image.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
    write_png(path, image.width(), image.height(), png::BitDepth::Eight, &data)
}

/// Mask as 0/255 8-bit PNG.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::BitDepth::Eight, &data)
}

/// 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::file(path, format!("cannot write: {e}")))
}
