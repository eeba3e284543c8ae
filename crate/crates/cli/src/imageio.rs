//! Reading and writing RGB images and masks in the formats the CLI accepts.

use std::path::Path;

use ndarray::{Array2, Array3, Ix2, Ix3};
use scd_core::tensor::{read_tensor, write_tensor, Tensor};

use crate::CliError;

fn is_npy(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"))
}

/// Loads an H×W×3 u8 image from `.npy`, PNG or JPEG.
pub fn load_rgb(path: &Path) -> Result<Array3<u8>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Invalid(format!("{}: {e}", path.display()));
    if is_npy(path) {
        let t = read_tensor(path).map_err(|e| bad(&e))?;
        let img = t.to_array::<u8, Ix3>().map_err(|e| bad(&e))?;
        if img.dim().2 != 3 {
            return Err(bad(&format!("expected H×W×3, found {:?}", img.dim())));
        }
        return Ok(img);
    }
    let rgb = image::open(path).map_err(|e| bad(&e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw()).map_err(|e| bad(&e))
}

/// Writes `img` as `.npy` or PNG depending on the extension of `path`.
pub fn save_rgb(img: &Array3<u8>, path: &Path) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::Failed(format!("{}: {e}", path.display()));
    if is_npy(path) {
        let t = Tensor::from_array(img).map_err(|e| fail(&e))?;
        return write_tensor(&t, path).map_err(|e| fail(&e));
    }
    let (h, w, _) = img.dim();
    let raw: Vec<u8> = img.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| fail(&"buffer does not match image size"))?;
    buf.save(path).map_err(|e| fail(&e))
}

/// Loads a 2-D mask stored as bool or u8 (non-zero is set).
pub fn load_mask(path: &Path) -> Result<Array2<bool>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Invalid(format!("{}: {e}", path.display()));
    let t = read_tensor(path).map_err(|e| bad(&e))?;
    t.to_array::<bool, Ix2>()
        .or_else(|_| t.to_array::<u8, Ix2>().map(|a| a.mapv(|v| v != 0)))
        .map_err(|e| bad(&e))
}

pub fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::Failed(format!("{}: {e}", path.display()));
    let t = Tensor::from_array(mask).map_err(|e| fail(&e))?;
    write_tensor(&t, path).map_err(|e| fail(&e))
}

/// Blends a red tint over the changed pixels of `img`.
pub fn overlay(img: &Array3<u8>, mask: &Array2<bool>) -> Array3<u8> {
    const TINT: [u8; 3] = [255, 0, 0];
    Array3::from_shape_fn(img.dim(), |(r, c, ch)| {
        let v = img[(r, c, ch)];
        if mask[(r, c)] {
            ((v as u16 + TINT[ch] as u16) / 2) as u8
        } else {
            v
        }
    })
}
