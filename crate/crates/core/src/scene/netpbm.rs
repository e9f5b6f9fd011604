//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{Error, Result};
use crate::labels::LabelMask;
use crate::numeric::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

/// The values an image takes after a write/read round trip.
pub fn quantize(image: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_parts(
        image.shape().to_vec(),
        image.data().iter().map(|&v| from_byte(to_byte(v))).collect(),
    )
}

fn header(magic: &str, height: usize, width: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encodes a `[3×H×W]` image in `[0, 1]` as P6, rounding `v·255`.
pub fn write_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    image.expect_rank("write_ppm", 3)?;
    if image.shape()[0] != 3 {
        return Err(Error::dim("write_ppm", "3 channels", image.shape()[0]));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let d = image.data();
    let mut out = header("P6", h, w);
    out.reserve(3 * n);
    for j in 0..n {
        for c in 0..3 {
            out.push(to_byte(d[c * n + j]));
        }
    }
    Ok(out)
}

pub fn write_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = header("P5", mask.height(), mask.width());
    out.extend_from_slice(mask.data());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err(format!("{what} out of range"))
            }
        }
    }
}

/// Parses a header and returns `(height, width, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return cur.err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        cur.skip_space_and_comments();
        return cur.err(format!("maxval {maxval} unsupported (must be 255)"));
    }
    if width == 0 || height == 0 {
        return cur.err("zero image extent");
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((height, width, cur.pos + 1)),
        Some(_) => cur.err("expected single whitespace before payload"),
        None => cur.err("missing payload"),
    }
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start.checked_add(len).ok_or(Error::Parse {
        offset: start,
        msg: "payload size overflows".into(),
    })?;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("payload truncated: need {len} bytes from offset {start}, file ends early"),
        });
    }
    Ok(&bytes[start..end])
}

pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (h, w, start) = parse_header(bytes, b"P6")?;
    let n = h * w;
    let raw = payload(bytes, start, 3 * n)?;
    let mut data = vec![0f32; 3 * n];
    for j in 0..n {
        for c in 0..3 {
            data[c * n + j] = from_byte(raw[3 * j + c]);
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

pub fn read_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let (h, w, start) = parse_header(bytes, b"P5")?;
    LabelMask::new(h, w, payload(bytes, start, h * w)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn white_pixel_encoding() {
        let img = Tensor::full(&[3, 1, 1], 1.0f32);
        let bytes = write_ppm(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn round_trips() {
        let img = Tensor::<f32>::uniform(&[3, 5, 7], 0.0, 1.0, &mut Rng::new(1));
        let back = read_ppm(&write_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, quantize(&img));
        assert_eq!(read_ppm(&write_ppm(&back).unwrap()).unwrap(), back);

        let mask = LabelMask::new(2, 3, vec![0, 1, 2, 255, 3, 0]).unwrap();
        assert_eq!(read_pgm(&write_pgm(&mask)).unwrap(), mask);
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let mut bytes = write_ppm(&Tensor::full(&[3, 2, 2], 0.5f32)).unwrap();
        bytes.truncate(bytes.len() - 1);
        match read_ppm(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors_point_at_the_bad_token() {
        match read_pgm(b"P5\n4 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match read_pgm(b"P5\n1 1\n65535\n\x00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn comments_are_skipped() {
        let m = read_pgm(b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(m.data(), &[1, 2]);
    }
}
