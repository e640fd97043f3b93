//! Image files.
//!
//! The native format stores raw intensities losslessly:
//!
//! ```text
//! GIMG1\n
//! <height> <width>\n
//! height*width little-endian f64, row-major
//! ```
//!
//! Binary PGM (`P5`) is read and written with 8-bit or 16-bit big-endian
//! samples, quantized as `round(v * maxval)` clamped to `[0, maxval]` and
//! decoded as `sample / maxval`. Binary PPM (`P6`), PNG and JPEG are
//! accepted on input; colour pixels are reduced with the ITU-R BT.601 luma
//! weights.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

pub const NATIVE_MAGIC: &[u8] = b"GIMG1\n";

/// Output encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Lossless little-endian f64.
    Native,
    Pgm8,
    Pgm16,
}

impl ImageFormat {
    /// Chooses a format from the file extension: `.pgm` gives 8-bit PGM,
    /// anything else the native format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm8,
            _ => ImageFormat::Native,
        }
    }
}

const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

pub fn save_image(path: impl AsRef<Path>, image: &GrayImage, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image, format)).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn encode_image(image: &GrayImage, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Native => {
            let mut out = Vec::with_capacity(32 + image.len() * 8);
            out.extend_from_slice(NATIVE_MAGIC);
            out.extend_from_slice(format!("{} {}\n", image.height(), image.width()).as_bytes());
            for v in image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        ImageFormat::Pgm8 | ImageFormat::Pgm16 => {
            let maxval: u16 = if format == ImageFormat::Pgm8 { 255 } else { 65535 };
            let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
            for &v in image.data() {
                let q = quantize(v, maxval);
                if maxval < 256 {
                    out.push(q as u8);
                } else {
                    out.extend_from_slice(&q.to_be_bytes());
                }
            }
            out
        }
    }
}

fn quantize(v: f64, maxval: u16) -> u16 {
    (v * f64::from(maxval)).round().clamp(0.0, f64::from(maxval)) as u16
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(NATIVE_MAGIC) {
        decode_native(&bytes[NATIVE_MAGIC.len()..])
    } else if bytes.starts_with(b"P5") {
        decode_netpbm(bytes, 1)
    } else if bytes.starts_with(b"P6") {
        decode_netpbm(bytes, 3)
    } else if bytes.starts_with(b"\x89PNG") || bytes.starts_with(&[0xFF, 0xD8]) {
        decode_compressed(bytes)
    } else {
        Err(Error::UnsupportedFormat(
            "expected GIMG1, PGM (P5), PPM (P6), PNG or JPEG data".into(),
        ))
    }
}

fn decode_native(rest: &[u8]) -> Result<GrayImage> {
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse("header", "missing dimension line"))?;
    let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::parse("header", "dimension line is not ASCII"))?;
    let mut fields = line.split(' ');
    let mut next_dim = |name: &str| -> Result<usize> {
        fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse("header", format!("bad {name} in `{line}`")))
    };
    let height = next_dim("height")?;
    let width = next_dim("width")?;
    if fields.next().is_some() {
        return Err(Error::parse("header", format!("unexpected fields in `{line}`")));
    }
    let payload = &rest[nl + 1..];
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::parse("header", "dimensions overflow"))?;
    if payload.len() != expected {
        return Err(Error::parse(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    GrayImage::new(height, width, data).map_err(|e| Error::parse("payload", e.to_string()))
}

/// Reads whitespace-separated ASCII header tokens, skipping `#` comments.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse("header", "unexpected end of header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse("header", "non-ASCII token"))
    }

    fn number(&mut self, name: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse::<usize>()
            .map_err(|_| Error::parse("header", format!("bad {name} `{tok}`")))
    }
}

fn decode_netpbm(bytes: &[u8], channels: usize) -> Result<GrayImage> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse("header", "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse("header", format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(cur.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::parse("header", "missing separator before raster"));
    }
    let payload = &bytes[cur.pos + 1..];
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * sample_bytes))
        .ok_or_else(|| Error::parse("header", "dimensions overflow"))?;
    if payload.len() < expected {
        return Err(Error::parse(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let maxval = maxval as f64;
    let samples: Vec<f64> = if sample_bytes == 1 {
        payload[..expected].iter().map(|&b| f64::from(b) / maxval).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / maxval)
            .collect()
    };
    let data = if channels == 1 {
        samples
    } else {
        samples
            .chunks_exact(3)
            .map(|px| LUMA_601[0] * px[0] + LUMA_601[1] * px[1] + LUMA_601[2] * px[2])
            .collect()
    };
    GrayImage::new(height, width, data).map_err(|e| Error::parse("payload", e.to_string()))
}

fn decode_compressed(bytes: &[u8]) -> Result<GrayImage> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::parse("payload", e.to_string()))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data = if decoded.color().has_color() {
        decoded
            .to_rgb32f()
            .pixels()
            .map(|p| {
                LUMA_601[0] * f64::from(p[0]) + LUMA_601[1] * f64::from(p[1]) + LUMA_601[2] * f64::from(p[2])
            })
            .collect()
    } else {
        // to_luma16 widens 8-bit samples by 257, so 65535 is full scale either way
        decoded
            .to_luma16()
            .pixels()
            .map(|p| f64::from(p[0]) / 65535.0)
            .collect()
    };
    GrayImage::from_clamped(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = rng_from_seed(seed);
        GrayImage::from_fn(h, w, |_, _| rng.random::<f64>() * 3.0).unwrap()
    }

    #[test]
    fn native_roundtrip_is_bit_exact() {
        let img = random_image(32, 32, 1);
        let back = decode_image(&encode_image(&img, ImageFormat::Native)).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.dims(), (32, 32));
    }

    #[test]
    fn every_8bit_level_decodes_to_exact_quotient() {
        let img = GrayImage::new(16, 16, (0..256).map(|k| k as f64 / 255.0).collect()).unwrap();
        let bytes = encode_image(&img, ImageFormat::Pgm8);
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm8_quantizes_by_rounding() {
        let img = GrayImage::filled(4, 6, 0.5).unwrap();
        let bytes = encode_image(&img, ImageFormat::Pgm8);
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        let back = decode_image(&bytes).unwrap();
        // round(0.5 * 255) = round(127.5) = 128 (half away from zero)
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
        assert_eq!(back.dims(), (4, 6));
    }

    #[test]
    fn pgm16_is_big_endian_and_clamped() {
        let img = GrayImage::new(1, 3, vec![0.0, 1.0, 2.5]).unwrap();
        let bytes = encode_image(&img, ImageFormat::Pgm16);
        let raster = &bytes[bytes.len() - 6..];
        assert_eq!(raster, &[0, 0, 0xFF, 0xFF, 0xFF, 0xFF]);
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn ppm_uses_bt601_luma() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        let img = decode_image(&bytes).unwrap();
        assert!((img.data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs_give_distinct_errors() {
        let native = encode_image(&random_image(5, 4, 2), ImageFormat::Native);
        assert!(matches!(
            decode_image(&native[..native.len() - 1]),
            Err(Error::Parse { ref section, .. }) if section == "payload"
        ));
        assert!(matches!(
            decode_image(b"GIMG1\n5 x\n"),
            Err(Error::Parse { ref section, .. }) if section == "header"
        ));
        assert!(matches!(decode_image(b"BM...."), Err(Error::UnsupportedFormat(_))));
        let pgm = encode_image(&random_image(5, 4, 3), ImageFormat::Pgm8);
        assert!(matches!(
            decode_image(&pgm[..pgm.len() - 2]),
            Err(Error::Parse { ref section, .. }) if section == "payload"
        ));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let img = random_image(3, 3, 4);
        for format in [ImageFormat::Native, ImageFormat::Pgm8, ImageFormat::Pgm16] {
            let bytes = encode_image(&img, format);
            for cut in 0..bytes.len() {
                assert!(decode_image(&bytes[..cut]).is_err(), "{format:?} cut at {cut}");
            }
        }
    }

    #[test]
    fn png_grayscale_decodes() {
        let mut buf = std::io::Cursor::new(Vec::new());
        let gray = image::GrayImage::from_raw(2, 1, vec![0u8, 255]).unwrap();
        gray.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let img = decode_image(buf.get_ref()).unwrap();
        assert_eq!(img.dims(), (1, 2));
        assert!((img.data()[1] - 1.0).abs() < 1e-12);
    }
}
