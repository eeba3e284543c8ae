//! Order statistics and moments shared by the thresholding stages.
//!
//! All reductions run sequentially in input order so results are bit-reproducible.

/// Median with the mean-of-middle-pair rule for even lengths. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut buf = values.to_vec();
    let n = buf.len();
    let mid = n / 2;
    let (_, &mut upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        return Some(upper);
    }
    let lower = buf[..mid]
        .iter()
        .copied()
        .max_by(f64::total_cmp)
        .expect("even length >= 2");
    Some(0.5 * (lower + upper))
}

/// Median absolute deviation `med(|x − med(x)|)` together with the median.
pub fn median_and_mad(values: &[f64]) -> Option<(f64, f64)> {
    let med = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    Some((med, median(&deviations)?))
}

/// Population mean, standard deviation and Fisher skewness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
}

pub fn moments(values: &[f64]) -> Option<Moments> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    let std = m2.sqrt();
    // A zero-variance sample has no defined skew; treat it as symmetric.
    let skewness = if std > 1e-12 * mean.abs().max(1.0) {
        m3 / (m2 * std)
    } else {
        0.0
    };
    Some(Moments {
        mean,
        std,
        skewness,
    })
}

/// Linear-interpolated percentile over a sorted slice, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
