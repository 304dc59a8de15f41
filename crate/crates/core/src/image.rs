//! RGB images in [0, 1] and binary PPM/PGM I/O.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image file: {0}")]
    Format(String),
    #[error("image size {height}x{width} is invalid: {detail}")]
    Size {
        height: usize,
        width: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::Size {
                height,
                width,
                detail: format!("{} values for 3 channels", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Binary P6 with 8-bit channels.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (magic, width, height, maxval, body) = parse_header(bytes)?;
        if magic != "P6" {
            return Err(ImageError::Format(format!("expected P6, found {magic}")));
        }
        if maxval != 255 {
            return Err(ImageError::Format(format!("unsupported maxval {maxval}")));
        }
        let n = width * height * 3;
        if body.len() < n {
            return Err(ImageError::Format(format!("{} pixel bytes, expected {n}", body.len())));
        }
        let data = body[..n].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { height, width, data })
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        Self::from_ppm(&fs::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// The image as it will read back from an 8-bit file.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P5 grayscale; `values` are scaled so their maximum maps to 255.
pub fn gray_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            quantize(v / max)
        } else {
            0
        }
    }));
    out
}

fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8]), ImageError> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(ImageError::Format("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Format(format!("bad header field `{s}`")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if width == 0 || height == 0 {
        return Err(ImageError::Format("zero image dimension".into()));
    }
    Ok((fields[0].clone(), width, height, maxval, bytes.get(i..).unwrap_or(&[])))
}
