//! Binary PPM (P6) image dumps for qualitative inspection.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Write an `[H,W,3]` tensor with values in [0,1] as a binary PPM.
/// Dumps are rotated 180 degrees: the projection convention grows v with
/// world-down, so raw row order would display rooms upside down.
pub fn write_rgb<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    assert!(
        image.rank() == 3 && image.dims()[2] == 3,
        "ppm wants [H,W,3], got {:?}",
        image.dims()
    );
    let (h, w) = (image.dims()[0], image.dims()[1]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            for c in 0..3 {
                let v = image.at(&[y, x, c]).into_f64();
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Write an `[H,W]` (or `[H,W,1]`) map as grayscale, normalized to its
/// finite min/max.
pub fn write_gray<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let dims = image.dims();
    assert!(
        dims.len() == 2 || (dims.len() == 3 && dims[2] == 1),
        "grayscale ppm wants [H,W] or [H,W,1], got {:?}",
        dims
    );
    let (h, w) = (dims[0], dims[1]);
    let vals: Vec<f64> = image.data().iter().map(|v| v.into_f64()).collect();
    let lo = vals.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in (0..vals.len()).rev() {
        let b = (((vals[i] - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.extend_from_slice(&[b, b, b]);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Write an id map with a fixed small palette (id 0 black).
pub fn write_ids(path: impl AsRef<Path>, h: usize, w: usize, ids: &[u32]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(ids.len(), h * w);
    const PALETTE: [[u8; 3]; 7] = [
        [0, 0, 0],
        [230, 80, 80],
        [80, 200, 90],
        [90, 120, 235],
        [230, 210, 80],
        [200, 90, 210],
        [90, 210, 210],
    ];
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &id in ids.iter().rev() {
        let c = PALETTE[(id as usize) % PALETTE.len()];
        buf.extend_from_slice(&c);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
