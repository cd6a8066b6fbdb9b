//! PNG snapshots of scalar and color slices.

use std::path::Path;

use image::{Rgb, RgbImage};
use odfield::metrics::{RgbVolume, ScalarVolume};
use odfield::{Error, Result};

/// Width of the grayscale bar appended to scalar images.
const BAR_WIDTH: u32 = 12;
const BAR_GAP: u32 = 4;

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale slice over `[0, range]` with a vertical bar on the right (black at
/// the bottom, white at the top). The slice's first row is drawn at the bottom.
pub fn scalar_slice(vol: &ScalarVolume, axis: usize, index: usize, range: f64) -> RgbImage {
    let (img, mask) = vol.slice(axis, index);
    let (rows, cols) = (img.rows() as u32, img.cols() as u32);
    let mut out = RgbImage::new(cols + BAR_GAP + BAR_WIDTH, rows);
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as usize;
            let v = img.get(r as usize, c as usize);
            let g = if mask[i] && v.is_finite() { to_u8(v / range) } else { 0 };
            out.put_pixel(c, rows - 1 - r, Rgb([g; 3]));
        }
        let g = to_u8(r as f64 / (rows.max(2) - 1) as f64);
        for c in cols + BAR_GAP..cols + BAR_GAP + BAR_WIDTH {
            out.put_pixel(c, rows - 1 - r, Rgb([g; 3]));
        }
    }
    out
}

/// Direction-colored slice: red x, green y, blue z, brightness by anisotropy.
pub fn rgb_slice(vol: &RgbVolume, axis: usize, index: usize) -> RgbImage {
    let (img, mask) = vol.slice(axis, index);
    let (rows, cols) = (img.rows as u32, img.cols as u32);
    let mut out = RgbImage::new(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as usize;
            let px = if mask[i] { img.data[i].map(to_u8) } else { [0; 3] };
            out.put_pixel(c, rows - 1 - r, Rgb(px));
        }
    }
    out
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format("png", other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_runs_dark_to_light_upwards() {
        let v = ScalarVolume::new([4, 5, 1], (0..20).map(|i| i as f64 / 19.0).collect(), vec![true; 20]).unwrap();
        let img = scalar_slice(&v, 2, 0, 1.0);
        assert_eq!(img.dimensions(), (4 + BAR_GAP + BAR_WIDTH, 5));
        let bar_x = 4 + BAR_GAP;
        assert_eq!(img.get_pixel(bar_x, 4).0, [0; 3]);
        assert_eq!(img.get_pixel(bar_x, 0).0, [255; 3]);
        // first row of the slice is at the bottom
        assert_eq!(img.get_pixel(0, 4).0, [0; 3]);
    }

    #[test]
    fn masked_pixels_are_black() {
        let mut mask = vec![true; 4];
        mask[1] = false;
        let v = RgbVolume {
            dims: [2, 2, 1],
            values: vec![[1.0, 0.5, 0.0]; 4],
            mask,
            voxel_size: [1.0; 3],
            affine: odfield::data::nifti::identity(),
        };
        let img = rgb_slice(&v, 2, 0);
        assert_eq!(img.get_pixel(1, 1).0, [0; 3]);
        assert_eq!(img.get_pixel(0, 1).0, [255, 128, 0]);
    }
}
