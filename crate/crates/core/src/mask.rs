//! Binary occupancy masks on a fixed raster grid.
//!
//! Coordinates are `(x, y)` with `x` growing to the right and `y` growing
//! downward (raster order). Bits are stored row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask grid must be non-empty");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::format(
                "mask",
                format!("{} bits for a {width}x{height} grid", bits.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Builds a mask from explicit pixel coordinates. Out-of-grid points are an error.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::empty(width, height);
        for &(x, y) in pixels {
            if x >= width || y >= height {
                return Err(Error::format(
                    "mask",
                    format!("pixel ({x},{y}) outside {width}x{height} grid"),
                ));
            }
            m.set(x, y, true);
        }
        Ok(m)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn grid(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.pixels();
        let (x0, y0) = it.next()?;
        let (mut x_min, mut y_min, mut x_max, mut y_max) = (x0, y0, x0, y0);
        for (x, y) in it {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        Some((x_min, y_min, x_max, y_max))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Shifts every set pixel by `(dx, dy)`. Fails if a pixel would leave the grid.
    pub fn translated(&self, dx: isize, dy: isize) -> Option<BinaryMask> {
        let mut out = Self::empty(self.width, self.height);
        for (x, y) in self.pixels() {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                return None;
            }
            out.set(nx as usize, ny as usize, true);
        }
        Some(out)
    }

    /// Left-right reflection `x -> width - 1 - x`.
    pub fn mirrored_x(&self) -> BinaryMask {
        let mut out = Self::empty(self.width, self.height);
        for (x, y) in self.pixels() {
            out.set(self.width - 1 - x, y, true);
        }
        out
    }

    /// Nearest-neighbour upscaling of the whole grid by an integer factor.
    pub fn dilated(&self, factor: usize) -> BinaryMask {
        let mut out = Self::empty(self.width * factor, self.height * factor);
        for (x, y) in self.pixels() {
            for oy in 0..factor {
                for ox in 0..factor {
                    out.set(x * factor + ox, y * factor + oy, true);
                }
            }
        }
        out
    }

    /// Run lengths over the row-major grid, starting with a (possibly empty)
    /// run of unset pixels and alternating thereafter.
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::format(
                "mask runs",
                format!("runs cover {total} pixels, grid has {}", width * height),
            ));
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat(value).take(r as usize));
            value = !value;
        }
        Self::from_bits(width, height, bits)
    }
}

/// Arithmetic mean of set-pixel coordinates.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    let mut n = 0u64;
    let mut sx = 0u64;
    let mut sy = 0u64;
    for (x, y) in mask.pixels() {
        n += 1;
        sx += x as u64;
        sy += y as u64;
    }
    if n == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok((sx as f64 / n as f64, sy as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_single_pixel() {
        let m = BinaryMask::from_pixels(8, 8, &[(3, 5)]).unwrap();
        assert_eq!(centroid(&m).unwrap(), (3.0, 5.0));
    }

    #[test]
    fn centroid_block() {
        let m = BinaryMask::from_pixels(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]).unwrap();
        assert_eq!(centroid(&m).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn centroid_l_shape() {
        let m = BinaryMask::from_pixels(4, 4, &[(0, 0), (1, 0), (0, 1)]).unwrap();
        let (x, y) = centroid(&m).unwrap();
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
        assert!((y - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn centroid_empty_is_degenerate() {
        let m = BinaryMask::empty(4, 4);
        assert!(matches!(centroid(&m), Err(Error::DegenerateMask)));
    }

    #[test]
    fn runs_round_trip() {
        let m = BinaryMask::from_pixels(5, 3, &[(0, 0), (1, 0), (4, 1), (0, 2)]).unwrap();
        let runs = m.to_runs();
        assert_eq!(runs, vec![0, 2, 7, 2, 4]);
        assert_eq!(BinaryMask::from_runs(5, 3, &runs).unwrap(), m);
        assert!(BinaryMask::from_runs(5, 3, &[3]).is_err());
    }

    #[test]
    fn translate_and_mirror() {
        let m = BinaryMask::from_pixels(6, 6, &[(1, 2)]).unwrap();
        assert_eq!(m.translated(2, -1).unwrap().pixels().next(), Some((3, 1)));
        assert!(m.translated(-2, 0).is_none());
        assert_eq!(m.mirrored_x().pixels().next(), Some((4, 2)));
        assert_eq!(m.dilated(2).count(), 4);
    }
}
