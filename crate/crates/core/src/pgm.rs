//! 8-bit binary PGM (P5) grayscale images with intensities kept in `[0, 1]`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PgmError {
    #[error("not a binary PGM: {0}")]
    Format(String),
    #[error("pixel buffer holds {got} values, expected {expected}")]
    Size { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self, PgmError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(PgmError::Size {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PgmError::Format("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(PgmError::Format(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<u32>()
                .map_err(|e| PgmError::Format(format!("bad header field {s:?}: {e}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(PgmError::Format(format!("maxval {maxval} is not 8-bit")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let expected = width as usize * height as usize;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() < expected {
            return Err(PgmError::Size {
                got: raster.len(),
                expected,
            });
        }
        let scale = maxval as f32;
        let pixels = raster[..expected].iter().map(|&b| b as f32 / scale).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_on_8bit_levels() {
        let px: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = GrayImage::new(4, 3, px).unwrap();
        let back = GrayImage::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = GrayImage::from_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_ascii_pgm_and_short_raster() {
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(matches!(
            GrayImage::from_pgm(b"P5\n2 2\n255\n\x00"),
            Err(PgmError::Size { .. })
        ));
    }
}
