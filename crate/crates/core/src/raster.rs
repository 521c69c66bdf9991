//! Core image containers and PNG/TIFF I/O.
//!
//! Three concrete raster types move through the pipeline:
//! `RgbImage` (8-bit H&E patches), `InstanceMap` (integer nucleus labels,
//! 0 = background) and `BinaryMask`. Instance maps persist as 16-bit
//! single-channel PNG, images as 8-bit RGB PNG/TIFF.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// 8-bit RGB image, indexed `[y, x, channel]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub pixels: Array3<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage { pixels: Array3::zeros((height, width, 3)) }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = RgbImage::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    img.pixels[[y, x, c]] = px[c];
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        for c in 0..3 {
            self.pixels[[y, x, c]] = px[c];
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::image(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[y as usize, x as usize, c]] = px.0[c];
            }
        }
        Ok(RgbImage { pixels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            *px = Rgb(self.get(y as usize, x as usize));
        }
        save_atomic(path, |tmp| buf.save(tmp).map_err(|e| Error::image(path, e)))
    }
}

/// Integer-labeled instance map: 0 = background, k = nucleus k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub labels: Array2<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize) -> Self {
        InstanceMap { labels: Array2::zeros((height, width)) }
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Largest label present (0 for an empty map).
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct positive labels.
    pub fn instance_count(&self) -> usize {
        let mut seen = vec![false; self.max_label() as usize + 1];
        let mut n = 0;
        for &l in self.labels.iter() {
            if l > 0 && !seen[l as usize] {
                seen[l as usize] = true;
                n += 1;
            }
        }
        n
    }

    /// Remap labels to consecutive 1..=K, ordered by raster position of each
    /// instance's first pixel.
    pub fn canonicalize(&self) -> InstanceMap {
        let mut next = 0u32;
        let mut remap = vec![0u32; self.max_label() as usize + 1];
        let mut labels = self.labels.clone();
        for l in labels.iter_mut() {
            if *l > 0 {
                if remap[*l as usize] == 0 {
                    next += 1;
                    remap[*l as usize] = next;
                }
                *l = remap[*l as usize];
            }
        }
        InstanceMap { labels }
    }

    pub fn to_binary(&self) -> BinaryMask {
        BinaryMask { mask: self.labels.mapv(|l| l > 0) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::image(path, e))?
            .to_luma16();
        let (w, h) = img.dimensions();
        let mut labels = Array2::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            labels[[y as usize, x as usize]] = px.0[0] as u32;
        }
        Ok(InstanceMap { labels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let l = self.labels[[y as usize, x as usize]];
            debug_assert!(l <= u16::MAX as u32, "instance label {l} exceeds 16-bit range");
            *px = Luma([l as u16]);
        }
        save_atomic(path, |tmp| buf.save(tmp).map_err(|e| Error::image(path, e)))
    }
}

/// Foreground/background mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask { mask: Array2::from_elem((height, width), false) }
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Write through a temp file in the target directory, then rename.
/// Keeps partially written outputs from ever being visible at `path`.
pub fn save_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    // Keep the original extension so format-by-extension writers still work.
    let mut tmp_name = std::ffi::OsString::from(".tmp.");
    tmp_name.push(file_name);
    let tmp = path.with_file_name(tmp_name);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write bytes atomically.
pub fn write_bytes_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    save_atomic(path, |tmp| std::fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_map_roundtrips_16bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = InstanceMap::new(8, 6);
        map.labels[[0, 0]] = 1;
        map.labels[[7, 5]] = 999;
        map.labels[[3, 3]] = 260; // above u8 range
        let path = dir.path().join("m.png");
        map.save(&path).unwrap();
        let back = InstanceMap::load(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn rgb_roundtrips_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 4, |y, x| [y as u8, x as u8, (y * x) as u8]);
        let path = dir.path().join("i.png");
        img.save(&path).unwrap();
        assert_eq!(RgbImage::load(&path).unwrap(), img);
    }

    #[test]
    fn canonicalize_orders_by_first_pixel() {
        let mut map = InstanceMap::new(3, 3);
        map.labels[[0, 2]] = 7;
        map.labels[[1, 0]] = 3;
        map.labels[[2, 2]] = 3;
        let canon = map.canonicalize();
        assert_eq!(canon.labels[[0, 2]], 1);
        assert_eq!(canon.labels[[1, 0]], 2);
        assert_eq!(canon.labels[[2, 2]], 2);
        assert_eq!(canon.instance_count(), 2);
    }
}
