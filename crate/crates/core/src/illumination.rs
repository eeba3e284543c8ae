//! Illumination-gap detection and the two preprocessing transforms applied to
//! the reconstruction input when the gap is large: single-scale Retinex and
//! Reinhard color transfer in lαβ space.
//!
//! Images are H×W×3 `u8` arrays in sRGB channel order.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::stats::percentile_sorted;

pub const GRAY_GAP_THRESHOLD: f32 = 0.12;
pub const HIST_GAP_THRESHOLD: f32 = 0.08;
pub const DEFAULT_SIGMA_FRAC: f32 = 0.1;
const RETINEX_EPS: f64 = 1e-3;
const LMS_EPS: f64 = 1e-3;
const STRETCH_LOW_PCT: f64 = 1.0;
const STRETCH_HIGH_PCT: f64 = 99.0;

#[derive(Debug, thiserror::Error)]
pub enum IlluminationError {
    #[error("images differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("expected an H×W×3 image, found {0:?}")]
    NotRgb((usize, usize, usize)),
    #[error("sigma_frac must lie in (0, 1), got {0}")]
    InvalidSigma(f32),
    #[error("unknown preprocessing method {0:?}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Retinex,
    ColorTransfer,
}

/// Requested preprocessing: `Auto` picks Retinex when the gap trigger fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[default]
    Auto,
    None,
    Retinex,
    ColorTransfer,
}

impl FromStr for MethodChoice {
    type Err = IlluminationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "none" => Ok(Self::None),
            "retinex" => Ok(Self::Retinex),
            "color-transfer" | "color_transfer" => Ok(Self::ColorTransfer),
            other => Err(IlluminationError::UnknownMethod(other.to_string())),
        }
    }
}

impl fmt::Display for MethodChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::None => "none",
            Self::Retinex => "retinex",
            Self::ColorTransfer => "color-transfer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationReport {
    /// |mean luminance difference|, luminance normalized to [0, 1].
    pub gray_gap: f32,
    /// Mean per-channel 1-D earth mover's distance between 256-bin histograms.
    pub hist_gap: f32,
    pub triggered: bool,
    pub method: Method,
}

fn check_rgb(img: &Array3<u8>) -> Result<(), IlluminationError> {
    if img.dim().2 != 3 {
        return Err(IlluminationError::NotRgb(img.dim()));
    }
    Ok(())
}

fn mean_luminance(img: &Array3<u8>) -> f64 {
    let n = (img.dim().0 * img.dim().1).max(1) as f64;
    let sum: f64 = img
        .lanes(Axis(2))
        .into_iter()
        .map(|px| (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0)
        .sum();
    sum / n
}

fn channel_cdf(img: &Array3<u8>, channel: usize) -> [f64; 256] {
    let mut hist = [0u64; 256];
    for &v in img.index_axis(Axis(2), channel).iter() {
        hist[v as usize] += 1;
    }
    let total = hist.iter().sum::<u64>().max(1) as f64;
    let mut cdf = [0.0; 256];
    let mut acc = 0u64;
    for (bin, count) in hist.iter().enumerate() {
        acc += count;
        cdf[bin] = acc as f64 / total;
    }
    cdf
}

pub fn illumination_gap(
    img1: &Array3<u8>,
    img2: &Array3<u8>,
) -> Result<IlluminationReport, IlluminationError> {
    check_rgb(img1)?;
    check_rgb(img2)?;
    if img1.dim() != img2.dim() {
        return Err(IlluminationError::DimensionMismatch(img1.dim(), img2.dim()));
    }
    let gray_gap = (mean_luminance(img1) - mean_luminance(img2)).abs();
    let hist_gap = (0..3)
        .map(|c| {
            let (a, b) = (channel_cdf(img1, c), channel_cdf(img2, c));
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 256.0
        })
        .sum::<f64>()
        / 3.0;
    let (gray_gap, hist_gap) = (gray_gap as f32, hist_gap as f32);
    Ok(IlluminationReport {
        gray_gap,
        hist_gap,
        triggered: gray_gap > GRAY_GAP_THRESHOLD || hist_gap > HIST_GAP_THRESHOLD,
        method: Method::None,
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    kernel
}

/// Reflect-101 index into `[0, len)`.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with mirrored borders.
pub(crate) fn gaussian_blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (rows, cols) = plane.dim();
    let mut tmp = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * plane[(r, reflect(c as isize + k as isize - radius, cols))];
            }
            tmp[(r, c)] = acc;
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[(reflect(r as isize + k as isize - radius, rows), c)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Single-scale Retinex per channel, followed by a 1st–99th percentile stretch.
pub fn retinex(img: &Array3<u8>, sigma_frac: f32) -> Result<Array3<u8>, IlluminationError> {
    check_rgb(img)?;
    if !(sigma_frac > 0.0 && sigma_frac < 1.0) {
        return Err(IlluminationError::InvalidSigma(sigma_frac));
    }
    let (rows, cols, _) = img.dim();
    let sigma = sigma_frac as f64 * rows.min(cols) as f64;
    let mut out = Array3::zeros(img.dim());
    for c in 0..3 {
        let plane = img.index_axis(Axis(2), c).mapv(|v| v as f64 / 255.0);
        let blurred = gaussian_blur(&plane, sigma);
        let reflectance: Array2<f64> = ndarray::Zip::from(&plane)
            .and(&blurred)
            .map_collect(|&x, &g| (x + RETINEX_EPS).ln() - (g + RETINEX_EPS).ln());

        let mut sorted: Vec<f64> = reflectance.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile_sorted(&sorted, STRETCH_LOW_PCT);
        let hi = percentile_sorted(&sorted, STRETCH_HIGH_PCT);
        let span = hi - lo;
        let mut channel = out.index_axis_mut(Axis(2), c);
        if span <= 1e-9 {
            // No reflectance variation: map to the middle of the range.
            channel.fill(128);
            continue;
        }
        ndarray::Zip::from(&mut channel)
            .and(&reflectance)
            .for_each(|o, &r| *o = ((r - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

fn rgb_to_lms() -> Matrix3<f64> {
    Matrix3::new(
        0.3811, 0.5783, 0.0402, //
        0.1967, 0.7244, 0.0782, //
        0.0241, 0.1288, 0.8444,
    )
}

fn log_lms_to_lab() -> Matrix3<f64> {
    let (a, b, c) = (1.0 / 3f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 2f64.sqrt());
    Matrix3::new(
        a, a, a, //
        b, b, -2.0 * b, //
        c, -c, 0.0,
    )
}

/// Converts to Reinhard's decorrelated lαβ space, one row per pixel.
pub fn to_lab(img: &Array3<u8>) -> Vec<Vector3<f64>> {
    let to_lms = rgb_to_lms();
    let to_lab = log_lms_to_lab();
    img.lanes(Axis(2))
        .into_iter()
        .map(|px| {
            let rgb = Vector3::new(px[0] as f64, px[1] as f64, px[2] as f64) / 255.0;
            let lms = (to_lms * rgb).map(|v| (v.max(0.0) + LMS_EPS).log10());
            to_lab * lms
        })
        .collect()
}

fn from_lab(lab: &Vector3<f64>, from_lab: &Matrix3<f64>, from_lms: &Matrix3<f64>) -> [u8; 3] {
    let lms = (from_lab * lab).map(|v| 10f64.powf(v) - LMS_EPS);
    let rgb = from_lms * lms * 255.0;
    [0, 1, 2].map(|i| rgb[i].round().clamp(0.0, 255.0) as u8)
}

/// Per-channel mean and population standard deviation in lαβ.
pub fn lab_statistics(img: &Array3<u8>) -> ([f64; 3], [f64; 3]) {
    let lab = to_lab(img);
    let n = lab.len().max(1) as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = lab.iter().map(|v| v[c]).sum::<f64>() / n;
        std[c] = (lab.iter().map(|v| (v[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

/// Reinhard statistics transfer of `reference`'s lαβ moments onto `src`.
pub fn color_transfer(src: &Array3<u8>, reference: &Array3<u8>) -> Result<Array3<u8>, IlluminationError> {
    check_rgb(src)?;
    check_rgb(reference)?;
    let (src_mean, src_std) = lab_statistics(src);
    let (ref_mean, ref_std) = lab_statistics(reference);
    let inv_lab = log_lms_to_lab().try_inverse().expect("lαβ basis is invertible");
    let inv_lms = rgb_to_lms().try_inverse().expect("LMS matrix is invertible");

    let lab = to_lab(src);
    let mut out = Array3::zeros(src.dim());
    for (mut dst, value) in out.lanes_mut(Axis(2)).into_iter().zip(&lab) {
        let mut mapped = Vector3::zeros();
        for c in 0..3 {
            mapped[c] = if src_std[c] > 0.0 {
                (value[c] - src_mean[c]) * (ref_std[c] / src_std[c]) + ref_mean[c]
            } else {
                ref_mean[c]
            };
        }
        let rgb = from_lab(&mapped, &inv_lab, &inv_lms);
        for c in 0..3 {
            dst[c] = rgb[c];
        }
    }
    Ok(out)
}

/// Applies the requested preprocessing to a pair destined for reconstruction.
pub fn preprocess_pair(
    img1: &Array3<u8>,
    img2: &Array3<u8>,
    choice: MethodChoice,
    sigma_frac: f32,
) -> Result<(Array3<u8>, Array3<u8>, IlluminationReport), IlluminationError> {
    let mut report = illumination_gap(img1, img2)?;
    let method = match choice {
        MethodChoice::Auto if report.triggered => Method::Retinex,
        MethodChoice::Auto | MethodChoice::None => Method::None,
        MethodChoice::Retinex => Method::Retinex,
        MethodChoice::ColorTransfer => Method::ColorTransfer,
    };
    report.method = method;
    let (out1, out2) = match method {
        Method::None => (img1.clone(), img2.clone()),
        Method::Retinex => (retinex(img1, sigma_frac)?, retinex(img2, sigma_frac)?),
        Method::ColorTransfer => (img1.clone(), color_transfer(img2, img1)?),
    };
    Ok((out1, out2, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_color(a: [u8; 3], b: [u8; 3]) -> Array3<u8> {
        Array3::from_shape_fn((16, 16, 3), |(r, _, c)| if r < 8 { a[c] } else { b[c] })
    }

    #[test]
    fn identical_images_have_no_gap() {
        let img = two_color([120, 100, 60], [10, 200, 30]);
        let report = illumination_gap(&img, &img).unwrap();
        assert_eq!(report.gray_gap, 0.0);
        assert_eq!(report.hist_gap, 0.0);
        assert!(!report.triggered);
    }

    #[test]
    fn global_brightening_triggers_on_luminance() {
        let img = Array3::from_elem((8, 8, 3), 100u8);
        let bright = img.mapv(|v| v.saturating_add(80));
        let report = illumination_gap(&img, &bright).unwrap();
        assert!((report.gray_gap - 80.0 / 255.0).abs() < 1e-6);
        assert!(report.triggered);
    }

    #[test]
    fn channel_swap_triggers_on_histograms() {
        // Oracle: rows split evenly between two colors, so each channel CDF is a
        // two-step function and EMD is |Δvalue| / 256 averaged over the two halves.
        let img = two_color([120, 100, 60], [200, 80, 40]);
        let swapped = two_color([60, 100, 120], [40, 80, 200]);
        let report = illumination_gap(&img, &swapped).unwrap();
        let y = |p: [f64; 3]| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
        let expected_gray = ((y([120., 100., 60.]) + y([200., 80., 40.]))
            - (y([60., 100., 120.]) + y([40., 80., 200.])))
            .abs()
            / 2.0;
        // R: {120, 200} vs {40, 60}; matching sorted halves gives
        // (|120 − 40| + |200 − 60|) / 2 = 110 bins. B mirrors R, G is unchanged.
        let emd_r = 110.0 / 256.0;
        let expected_hist = 2.0 * emd_r / 3.0;
        assert!((report.gray_gap as f64 - expected_gray).abs() < 1e-6);
        assert!((report.hist_gap as f64 - expected_hist).abs() < 1e-6, "{report:?}");
        assert!(report.gray_gap < GRAY_GAP_THRESHOLD);
        assert!(report.triggered);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Array3::zeros((4, 4, 3));
        let b = Array3::zeros((4, 5, 3));
        assert!(matches!(
            illumination_gap(&a, &b),
            Err(IlluminationError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn retinex_of_constant_is_mid_gray() {
        let img = Array3::from_elem((20, 30, 3), 77u8);
        let out = retinex(&img, 0.1).unwrap();
        assert!(out.iter().all(|&v| v == 128));
    }

    #[test]
    fn retinex_rejects_bad_sigma() {
        let img = Array3::from_elem((4, 4, 3), 1u8);
        assert!(retinex(&img, 0.0).is_err());
        assert!(retinex(&img, 1.0).is_err());
    }

    #[test]
    fn retinex_preserves_step_edge_ordering() {
        // Oracle: for a 1-D step x = a (left) / b (right) the blurred signal at
        // the far ends tends to the local level, so reflectance is ≈ 0 there and
        // the edge produces a dark→bright transition with flat plateaus.
        let img = Array3::from_shape_fn((40, 80, 3), |(_, c, _)| if c < 40 { 60 } else { 180 });
        let out = retinex(&img, 0.1).unwrap();
        let row: Vec<u8> = (0..80).map(|c| out[(20, c, 0)]).collect();
        assert!(row[38] < row[41], "edge lost: {row:?}");
        assert!(row[39] <= row[5] && row[40] >= row[75], "{row:?}");
        // Plateaus far from the edge are equalized.
        assert!((row[2] as i32 - row[77] as i32).abs() <= 2, "{row:?}");
    }

    #[test]
    fn color_transfer_with_self_reference_is_near_identity() {
        let img = Array3::from_shape_fn((12, 12, 3), |(r, c, k)| (40 + r * 9 + c * 5 + k * 13) as u8);
        let out = color_transfer(&img, &img).unwrap();
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn constant_gray_to_constant_blue() {
        let gray = Array3::from_elem((6, 6, 3), 128u8);
        let blue = Array3::from_shape_fn((6, 6, 3), |(_, _, c)| if c == 2 { 255 } else { 0 });
        let out = color_transfer(&gray, &blue).unwrap();
        for px in out.lanes(Axis(2)) {
            assert!(px[0] <= 1 && px[1] <= 1 && px[2] >= 254, "{px:?}");
        }
    }

    #[test]
    fn method_none_is_identity() {
        let a = two_color([1, 2, 3], [200, 100, 50]);
        let b = a.mapv(|v| v / 3);
        let (oa, ob, report) = preprocess_pair(&a, &b, MethodChoice::None, 0.1).unwrap();
        assert_eq!(oa, a);
        assert_eq!(ob, b);
        assert_eq!(report.method, Method::None);
    }

    #[test]
    fn auto_applies_retinex_only_when_triggered() {
        let a = Array3::from_shape_fn((16, 16, 3), |(r, c, _)| (60 + r * 3 + c * 2) as u8);
        let (oa, ob, report) = preprocess_pair(&a, &a, MethodChoice::Auto, 0.1).unwrap();
        assert!(!report.triggered);
        assert_eq!((oa, ob), (a.clone(), a.clone()));

        let dark = a.mapv(|v| v / 4);
        let (oa, ob, report) = preprocess_pair(&a, &dark, MethodChoice::Auto, 0.1).unwrap();
        assert!(report.triggered);
        assert_eq!(report.method, Method::Retinex);
        assert_eq!(oa, retinex(&a, 0.1).unwrap());
        assert_eq!(ob, retinex(&dark, 0.1).unwrap());
    }

    #[test]
    fn color_transfer_maps_second_image_only() {
        let a = Array3::from_shape_fn((16, 16, 3), |(r, c, k)| (50 + r * 4 + c * 3 + k * 10) as u8);
        let b = a.mapv(|v| v / 2 + 10);
        let (oa, ob, report) = preprocess_pair(&a, &b, MethodChoice::ColorTransfer, 0.1).unwrap();
        assert_eq!(oa, a);
        assert_eq!(ob, color_transfer(&b, &a).unwrap());
        assert_eq!(report.method, Method::ColorTransfer);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("color-transfer".parse::<MethodChoice>().unwrap(), MethodChoice::ColorTransfer);
        assert!("sepia".parse::<MethodChoice>().is_err());
    }
}
