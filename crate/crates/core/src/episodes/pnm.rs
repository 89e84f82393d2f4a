//! Binary PPM (P6) and PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::EpisodeError;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn malformed(path: &str, detail: impl Into<String>) -> EpisodeError {
    EpisodeError::MalformedHeader {
        path: path.to_string(),
        detail: detail.into(),
    }
}

fn parse_header(bytes: &[u8], expected: &[u8; 2], path: &str) -> Result<Header, EpisodeError> {
    if bytes.len() < 2 {
        return Err(malformed(path, "file too short"));
    }
    let magic = &bytes[..2];
    if magic != expected {
        let known = [b"P1", b"P2", b"P3", b"P4", b"P5", b"P6", b"P7"];
        if known.iter().any(|k| k.as_slice() == magic) {
            return Err(EpisodeError::UnsupportedFormat {
                path: path.to_string(),
                magic: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        return Err(malformed(path, "missing P5/P6 magic number"));
    }

    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (idx, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed(path, "header ends early")),
            }
        }
        if idx == 0 && pos == 2 {
            return Err(malformed(path, "expected whitespace after magic number"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = token
            .parse()
            .map_err(|_| malformed(path, format!("expected a number at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed(path, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(path, format!("maxval {maxval} out of range")));
    }
    if maxval > 255 {
        return Err(EpisodeError::UnsupportedFormat {
            path: path.to_string(),
            magic: "16-bit samples".into(),
        });
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos + 1,
    })
}

fn samples<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &str) -> Result<&'a [u8], EpisodeError> {
    let need = header.width * header.height * channels;
    let data = &bytes[header.data_offset.min(bytes.len())..];
    if data.len() < need {
        return Err(malformed(
            path,
            format!("expected {need} sample bytes, found {}", data.len()),
        ));
    }
    Ok(&data[..need])
}

/// Decodes a P6 image into a `[3,H,W]` tensor with values in `[0,1]`.
pub fn parse_image_ppm(bytes: &[u8], path: &str) -> Result<Tensor, EpisodeError> {
    let header = parse_header(bytes, b"P6", path)?;
    let raw = samples(bytes, &header, 3, path)?;
    let plane = header.width * header.height;
    let scale = header.maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = (px[ch] as f32 / scale).min(1.0);
        }
    }
    Ok(Tensor::new(vec![3, header.height, header.width], data)?)
}

/// Decodes a P5 image into a binary `[1,H,W]` mask (sample ≥ 128 on a 0..255 scale).
pub fn parse_mask_pgm(bytes: &[u8], path: &str) -> Result<Tensor, EpisodeError> {
    let header = parse_header(bytes, b"P5", path)?;
    let raw = samples(bytes, &header, 1, path)?;
    let data = raw
        .iter()
        .map(|&v| (v as u32 * 255 >= 128 * header.maxval) as u8 as f32)
        .collect();
    Ok(Tensor::new(vec![1, header.height, header.width], data)?)
}

fn read(path: &Path) -> Result<Vec<u8>, EpisodeError> {
    fs::read(path).map_err(|source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), EpisodeError> {
    fs::write(path, bytes).map_err(|source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_image_ppm(path: impl AsRef<Path>) -> Result<Tensor, EpisodeError> {
    let path = path.as_ref();
    parse_image_ppm(&read(path)?, &path.display().to_string())
}

pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<Tensor, EpisodeError> {
    let path = path.as_ref();
    parse_mask_pgm(&read(path)?, &path.display().to_string())
}

fn encode_p5(plane: &[f32], h: usize, w: usize, to_byte: impl Fn(f32) -> u8) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_byte(v)));
    out
}

fn single_plane<'a>(t: &'a Tensor, what: &str) -> Result<(&'a [f32], usize, usize), EpisodeError> {
    match t.shape() {
        [1, h, w] | [h, w] => Ok((t.data(), *h, *w)),
        other => Err(EpisodeError::Dataset(format!(
            "{what}: expected a [1,H,W] tensor, got {other:?}"
        ))),
    }
}

/// Writes a mask as P5, mapping values ≥ 0.5 to 255 and the rest to 0.
pub fn write_mask_pgm(mask: &Tensor, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    let (plane, h, w) = single_plane(mask, "write_mask_pgm")?;
    write(
        path.as_ref(),
        &encode_p5(plane, h, w, |v| if v >= 0.5 { 255 } else { 0 }),
    )
}

/// Writes a greyscale map with values in `[0,1]` (clamped) as P5.
pub fn write_gray_pgm(map: &Tensor, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    let (plane, h, w) = single_plane(map, "write_gray_pgm")?;
    write(
        path.as_ref(),
        &encode_p5(plane, h, w, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    )
}

pub fn write_image_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(EpisodeError::Dataset(format!(
            "write_image_ppm: expected 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push((image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let data: Vec<f32> = (0..35).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect();
        let mask = Tensor::new(vec![1, 5, 7], data).unwrap();
        write_mask_pgm(&mask, &path).unwrap();
        assert!(load_mask_pgm(&path).unwrap().bitwise_eq(&mask));
    }

    #[test]
    fn all_white_pgm_is_all_ones() {
        let mut bytes = b"P5\n# comment\n4 2\n255\n".to_vec();
        bytes.extend([255u8; 8]);
        let m = parse_mask_pgm(&bytes, "x").unwrap();
        assert_eq!(m.shape(), &[1, 2, 4]);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn threshold_is_128() {
        let mut bytes = b"P5 2 1 255\n".to_vec();
        bytes.extend([127u8, 128]);
        assert_eq!(parse_mask_pgm(&bytes, "x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn ascii_formats_are_unsupported() {
        let err = parse_image_ppm(b"P3\n1 1\n255\n0 0 0\n", "x").unwrap_err();
        assert!(matches!(err, EpisodeError::UnsupportedFormat { .. }));
        let err = parse_mask_pgm(b"P6\n1 1\n255\n\0\0\0", "x").unwrap_err();
        assert!(matches!(err, EpisodeError::UnsupportedFormat { .. }));
    }

    #[test]
    fn malformed_headers() {
        for bad in [
            &b"JUNK"[..],
            b"P6",
            b"P6\n1\n",
            b"P6\nx 1 255\n",
            b"P6\n0 1 255\n",
            b"P6\n2 2 255\n\0\0",
        ] {
            let err = parse_image_ppm(bad, "x").unwrap_err();
            assert!(matches!(err, EpisodeError::MalformedHeader { .. }), "{bad:?}: {err}");
        }
    }

    #[test]
    fn image_round_trip_is_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let data: Vec<f32> = (0..3 * 6).map(|i| i as f32 / 17.0).collect();
        let img = Tensor::new(vec![3, 2, 3], data).unwrap();
        write_image_ppm(&img, &path).unwrap();
        let back = load_image_ppm(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }
}
