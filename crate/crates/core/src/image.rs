//! 8-bit interleaved raster images and their raw on-disk encoding.
//!
//! Raw format: three little-endian `u32` values (width, height, channels)
//! followed by `width * height * channels` bytes in row-major, channel
//! interleaved order. No compression, no padding.

use std::io::{self, Read, Write};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> io::Result<Self> {
        if data.len() != width * height * channels {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}x{}x{} image needs {} bytes, got {}", width, height, channels, width * height * channels, data.len()),
            ));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, channels: 3, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    /// Copies the `size x size` block whose top-left corner is `(x0, y0)`,
    /// row-major with interleaved channels.
    pub fn patch(&self, x0: usize, y0: usize, size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size * self.channels);
        for y in y0..y0 + size {
            let start = (y * self.width + x0) * self.channels;
            out.extend_from_slice(&self.data[start..start + size * self.channels]);
        }
        out
    }

    pub fn set_patch(&mut self, x0: usize, y0: usize, size: usize, values: &[u8]) {
        let row = size * self.channels;
        for (dy, chunk) in values.chunks(row).enumerate() {
            let start = ((y0 + dy) * self.width + x0) * self.channels;
            self.data[start..start + row].copy_from_slice(chunk);
        }
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in [self.width, self.height, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.data)
    }

    pub fn read_raw<R: Read>(mut r: R) -> io::Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        let field = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
        let (width, height, channels) = (field(0), field(1), field(2));
        let mut data = vec![0u8; width * height * channels];
        r.read_exact(&mut data)?;
        Self::new(width, height, channels, data)
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        self.write_raw(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let mut img = Image::filled(4, 2, [1, 2, 3]);
        img.set_pixel(3, 1, &[9, 8, 7]);
        let bytes = img.to_raw_bytes();
        assert_eq!(&bytes[..12], &[4, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(Image::read_raw(&bytes[..]).unwrap(), img);
    }

    #[test]
    fn patch_copy_and_paste() {
        let mut img = Image::filled(4, 4, [0, 0, 0]);
        let p: Vec<u8> = (0..12).collect();
        img.set_patch(2, 2, 2, &p);
        assert_eq!(img.patch(2, 2, 2), p);
        assert_eq!(img.pixel(3, 3), &[9, 10, 11]);
    }
}
