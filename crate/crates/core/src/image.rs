//! Intensity images plus the raw float32 and PGM/PPM encodings used on disk.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMask};

/// `height x width x channels` intensities in `[0, 1]`, row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyMask { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ValueOutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Writes `value` clamped to `[0, 1]`.
    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        for (dst, &v) in self.data[i..i + self.channels].iter_mut().zip(value) {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    /// Copies the `rows x cols` window at `(top, left)`, zeroing pixels outside `keep`.
    pub fn crop_masked(&self, top: usize, left: usize, rows: usize, cols: usize, keep: &BinaryMask) -> Result<Image> {
        let mut out = Image::filled(rows, cols, self.channels, 0.0)?;
        for y in 0..rows {
            for x in 0..cols {
                if keep.get(top + y, left + x) {
                    out.set_pixel(y, x, self.pixel(top + y, left + x));
                }
            }
        }
        Ok(out)
    }
}

/// Reads `len` little-endian float32 values.
pub fn read_f32_le(mut reader: impl Read, len: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    reader.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("raw payload longer than {len} float32 values"),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_le(mut writer: impl Write, values: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&bytes)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) with maxval 255.
pub fn encode_pgm(height: usize, width: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Binary PPM (P6) with maxval 255.
pub fn encode_ppm(height: usize, width: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), height * width * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// PGM of a binary mask: set pixels 255, others 0.
pub fn binary_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let gray: Vec<u8> = mask.values().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.height(), mask.width(), &gray)
}

pub fn prob_mask_pgm(mask: &ProbMask) -> Vec<u8> {
    let gray: Vec<u8> = mask.values().iter().map(|&v| to_byte(v)).collect();
    encode_pgm(mask.height(), mask.width(), &gray)
}

/// 8-bit RGB view of an image; grayscale images are replicated into three channels.
pub fn image_rgb8(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.height() * image.width() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.pixel(y, x);
            if px.len() == 1 {
                let g = to_byte(px[0]);
                out.extend_from_slice(&[g, g, g]);
            } else {
                out.extend(px.iter().map(|&v| to_byte(v)));
            }
        }
    }
    out
}

/// PGM for single-channel images, PPM otherwise.
pub fn encode_image(image: &Image) -> Vec<u8> {
    if image.channels() == 1 {
        let gray: Vec<u8> = image.values().iter().map(|&v| to_byte(v)).collect();
        encode_pgm(image.height(), image.width(), &gray)
    } else {
        encode_ppm(image.height(), image.width(), &image_rgb8(image))
    }
}

/// Paints `color` over the set pixels of `mask` on an RGB copy of `image`.
/// Returns the PPM bytes and the number of painted pixels.
pub fn overlay_ppm(image: &Image, mask: &BinaryMask, color: [u8; 3]) -> Result<(Vec<u8>, usize)> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            left: image.dims(),
            right: mask.dims(),
        });
    }
    let mut rgb = image_rgb8(image);
    let mut painted = 0;
    for (i, _) in mask.values().iter().enumerate().filter(|(_, &b)| b) {
        rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
        painted += 1;
    }
    Ok((encode_ppm(image.height(), image.width(), &rgb), painted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let values = vec![0.0f32, 1.0, 0.1, 0.333_333_34, f32::MIN_POSITIVE];
        let mut buf = Vec::new();
        write_f32_le(&mut buf, &values).unwrap();
        assert_eq!(buf.len(), 20);
        assert_eq!(&buf[4..8], &1.0f32.to_le_bytes());
        let back = read_f32_le(buf.as_slice(), values.len()).unwrap();
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn raw_rejects_wrong_length() {
        let buf = vec![0u8; 12];
        assert!(read_f32_le(buf.as_slice(), 4).is_err());
        assert!(read_f32_le(buf.as_slice(), 2).is_err());
    }

    #[test]
    fn pgm_header_and_payload() {
        let mut m = BinaryMask::zeros(2, 3).unwrap();
        m.set(1, 2, true);
        let bytes = binary_mask_pgm(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn overlay_counts_painted_pixels() {
        let img = Image::filled(4, 4, 3, 0.5).unwrap();
        let mut m = BinaryMask::zeros(4, 4).unwrap();
        m.set(0, 0, true);
        m.set(3, 2, true);
        let (bytes, painted) = overlay_ppm(&img, &m, [255, 0, 0]).unwrap();
        assert_eq!(painted, 2);
        let empty = BinaryMask::zeros(4, 4).unwrap();
        let (plain, n) = overlay_ppm(&img, &empty, [255, 0, 0]).unwrap();
        assert_eq!(n, 0);
        assert_eq!(plain, encode_ppm(4, 4, &image_rgb8(&img)));
        assert_ne!(bytes, plain);
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![2.0]).is_err());
    }
}
