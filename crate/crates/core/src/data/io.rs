//! PFM, PPM and sidecar serialization of samples.
//!
//! A sample `<id>` in a split directory is stored as `<id>.ppm` (8-bit RGB),
//! `<id>.pfm` (depth), `<id>.mask.pfm` (1.0 valid, 0.0 invalid) and
//! `<id>.meta` (`key = value` lines). PFM payloads are little-endian `f32`
//! with rows stored bottom-up.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Sample;

fn parse_err(file: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Encodes a grayscale PFM; `data` is row-major top-down.
pub fn encode_pfm(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "PFM payload size");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in data.chunks_exact(width.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor over a header of whitespace-separated tokens.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self, comments: bool) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str, comments: bool) -> Result<(usize, &'a str)> {
        self.skip_space(comments);
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(self.file, start, format!("missing {what}")));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| parse_err(self.file, start, format!("non-ASCII {what}")))?;
        Ok((start, tok))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str, comments: bool) -> Result<(usize, T)> {
        let (at, tok) = self.token(what, comments)?;
        let v = tok
            .parse()
            .map_err(|_| parse_err(self.file, at, format!("invalid {what} `{tok}`")))?;
        Ok((at, v))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(parse_err(self.file, self.pos, "header not terminated by whitespace")),
        }
    }
}

/// Decodes a grayscale little-endian PFM into `(width, height, top-down data)`.
pub fn decode_pfm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut hdr = Header { bytes, pos: 0, file };
    let (at, magic) = hdr.token("magic", false)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(parse_err(file, at, "color PFM is not supported")),
        other => return Err(parse_err(file, at, format!("bad magic `{other}`"))),
    }
    let (_, width): (_, usize) = hdr.number("width", false)?;
    let (_, height): (_, usize) = hdr.number("height", false)?;
    let (at, scale): (_, f64) = hdr.number("scale", false)?;
    if !(scale < 0.0) {
        return Err(parse_err(file, at, format!("scale {scale} marks a big-endian payload; only little-endian is accepted")));
    }
    let start = hdr.end()?;
    let need = width * height * 4;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(parse_err(file, bytes.len(), format!("payload truncated: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(parse_err(file, start + need, "trailing bytes after payload"));
    }
    let mut data = vec![0.0f32; width * height];
    for (r, row) in payload.chunks_exact((width * 4).max(1)).enumerate().take(height) {
        let y = height - 1 - r;
        for (x, v) in row.chunks_exact(4).enumerate() {
            data[y * width + x] = f32::from_le_bytes(v.try_into().expect("4-byte chunk"));
        }
    }
    Ok((width, height, data))
}

/// Encodes `3 x H x W` values in `[0, 1]` as binary PPM.
pub fn encode_ppm(rgb: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match rgb.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::config(format!("PPM needs a 3 x H x W tensor, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    let d = rgb.data();
    for i in 0..n {
        for ch in 0..3 {
            out.push((d[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes an 8-bit binary PPM into `3 x H x W` values `k / 255`.
pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 0, file };
    let (at, magic) = hdr.token("magic", true)?;
    if magic != "P6" {
        return Err(parse_err(file, at, format!("bad magic `{magic}`")));
    }
    let (_, w): (_, usize) = hdr.number("width", true)?;
    let (_, h): (_, usize) = hdr.number("height", true)?;
    let (at, maxval): (_, u32) = hdr.number("maxval", true)?;
    if maxval != 255 {
        return Err(parse_err(file, at, format!("maxval {maxval} unsupported; expected 255")));
    }
    let start = hdr.end()?;
    let n = w * h;
    let payload = &bytes[start..];
    if payload.len() < 3 * n {
        return Err(parse_err(file, bytes.len(), format!("payload truncated: {} of {} bytes", payload.len(), 3 * n)));
    }
    if payload.len() > 3 * n {
        return Err(parse_err(file, start + 3 * n, "trailing bytes after payload"));
    }
    let mut data = vec![0.0; 3 * n];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{id}.ppm")),
        dir.join(format!("{id}.pfm")),
        dir.join(format!("{id}.mask.pfm")),
        dir.join(format!("{id}.meta")),
    ]
}

pub fn write_sample(dir: &Path, id: &str, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [ppm, pfm, mask, meta] = paths(dir, id);
    let (w, h) = (sample.width, sample.height);
    fs::write(ppm, encode_ppm(&sample.rgb)?)?;
    fs::write(pfm, encode_pfm(w, h, &sample.depth))?;
    let m: Vec<f32> = sample.mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    fs::write(mask, encode_pfm(w, h, &m))?;
    let text: String = sample.meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(meta, text)?;
    Ok(())
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let [ppm, pfm, mask_path, meta_path] = paths(dir, id);
    let name = |p: &Path| p.display().to_string();
    let rgb = decode_ppm(&fs::read(&ppm)?, &name(&ppm))?;
    let (w, h, depth) = decode_pfm(&fs::read(&pfm)?, &name(&pfm))?;
    let (mw, mh, mask) = decode_pfm(&fs::read(&mask_path)?, &name(&mask_path))?;
    if rgb.shape() != [3, h, w] || (mw, mh) != (w, h) {
        return Err(parse_err(&name(&pfm), 0, format!("sample `{id}` has inconsistent extents")));
    }
    let mask: Vec<bool> = mask.iter().map(|&v| v != 0.0).collect();
    if let Some(i) = depth.iter().zip(&mask).position(|(&d, &m)| m && !(d > 0.0 && d.is_finite())) {
        return Err(parse_err(&name(&pfm), 0, format!("pixel {i} is valid but has depth {}", depth[i])));
    }
    let meta = if meta_path.exists() {
        parse_kv(&fs::read_to_string(&meta_path)?, &name(&meta_path))?
    } else {
        Vec::new()
    };
    Ok(Sample {
        height: h,
        width: w,
        rgb,
        depth,
        mask,
        meta,
    })
}

/// Sorted sample ids of a split directory (stems of `*.ppm`).
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    #[test]
    fn pfm_byte_fixture() {
        let bytes = encode_pfm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let payload = &bytes[header.len()..];
        assert_eq!(payload.len(), 16);
        // bottom row [3, 4] first
        let want: Vec<u8> = [3.0f32, 4.0, 1.0, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(payload, &want[..]);
        assert_eq!(decode_pfm(&bytes, "t").unwrap(), (2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn pfm_rejects_bad_inputs_with_offsets() {
        let big = b"Pf\n1 1\n1.0\n\0\0\x80\x3f";
        match decode_pfm(big, "t").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 7),
            e => panic!("{e:?}"),
        }
        let truncated = &encode_pfm(2, 2, &[1.0; 4])[..20];
        match decode_pfm(truncated, "t").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 20),
            e => panic!("{e:?}"),
        }
        assert_eq!(decode_pfm(b"P5\n1 1\n-1.0\n", "t").unwrap_err().kind(), "parse");
        assert_eq!(decode_pfm(b"Pf\nx 1\n-1.0\n", "t").unwrap_err().kind(), "parse");
        assert_eq!(decode_pfm(b"Pf\n1 1\n", "t").unwrap_err().kind(), "parse");
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let rgb = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
        let back = decode_ppm(&encode_ppm(&rgb).unwrap(), "t").unwrap();
        assert_eq!(back, rgb);
        let commented = b"P6 # a comment\n1 1\n255\n\x01\x02\x03";
        let t = decode_ppm(commented, "t").unwrap();
        assert_eq!(t.data(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert_eq!(decode_ppm(b"P6\n1 1\n65535\n", "t").unwrap_err().kind(), "parse");
        assert_eq!(decode_ppm(b"P6\n1 1\n255\n\x01", "t").unwrap_err().kind(), "parse");
    }

    #[test]
    fn sample_round_trip_is_lossless() {
        let cfg = SceneConfig {
            kappa: 0.05,
            seed: 12,
            ..SceneConfig::default()
        };
        let mut sample = generate_scene(&cfg).unwrap().sample;
        sample.mask[5] = false;
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "s0", &sample).unwrap();
        let back = read_sample(dir.path(), "s0").unwrap();
        assert_eq!(back.rgb, sample.rgb);
        assert!(back.depth.iter().zip(&sample.depth).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.mask, sample.mask);
        assert_eq!(back.meta, sample.meta);
        assert_eq!(list_ids(dir.path()).unwrap(), vec!["s0".to_string()]);
    }
}
