//! Geometry-guided feature correlation: per-pixel cosine similarity between
//! matched multi-head key features, the adaptive threshold that turns it into
//! an initial change proposal, and occlusion filtering of that proposal.

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};

use crate::geometry::CorrespondenceField;
use crate::occlusion::OcclusionMask;
use crate::stats::moments;

pub const DEFAULT_LAYER: usize = 17;
/// Fewest defined similarity values the threshold statistics accept.
pub const MIN_DEFINED_PIXELS: usize = 64;
const HEAVY_TAIL_LAMBDA: f64 = 1.5;
const SYMMETRIC_LAMBDA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum CorrelationError {
    #[error("feature maps must be at least 2×2 to resize, got {0}×{1}")]
    TooSmall(usize, usize),
    #[error("feature dimensions disagree: {0:?} vs {1:?}")]
    FeatureMismatch(Vec<usize>, Vec<usize>),
    #[error("feature map is {found:?} but the field expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("overlap too small for thresholding ({0} defined pixels)")]
    OverlapTooSmall(usize),
    #[error("refinement expects an initial-stage proposal")]
    WrongStage,
    #[error("features contain non-finite values")]
    NonFinite,
}

/// Bilinear resize with the align-corners convention, per head and channel.
pub fn resize_features(
    raw: &Array4<f32>,
    rows: usize,
    cols: usize,
) -> Result<Array4<f32>, CorrelationError> {
    let (heads, src_rows, src_cols, dim) = raw.dim();
    if src_rows < 2 || src_cols < 2 {
        return Err(CorrelationError::TooSmall(src_rows, src_cols));
    }
    if (src_rows, src_cols) == (rows, cols) {
        return Ok(raw.clone());
    }
    let scale = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        (0..dst)
            .map(|i| {
                let x = if dst > 1 {
                    i as f64 * (src - 1) as f64 / (dst - 1) as f64
                } else {
                    0.0
                };
                let lo = (x.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let row_taps = scale(rows, src_rows);
    let col_taps = scale(cols, src_cols);
    let mut out = Array4::zeros((heads, rows, cols, dim));
    for h in 0..heads {
        for (r, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            for (c, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                for k in 0..dim {
                    let top = raw[(h, r0, c0, k)] * (1.0 - fc) + raw[(h, r0, c1, k)] * fc;
                    let bottom = raw[(h, r1, c0, k)] * (1.0 - fc) + raw[(h, r1, c1, k)] * fc;
                    out[(h, r, c, k)] = top * (1.0 - fr) + bottom * fr;
                }
            }
        }
    }
    Ok(out)
}

/// Key features and final embedding of one view, at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    /// heads×H×W×d
    pub keys: Array4<f32>,
    /// H×W×d_e
    pub embed: Array3<f32>,
    pub layer: usize,
}

impl FeatureMapSet {
    /// Resizes raw encoder outputs to `rows × cols`.
    pub fn from_raw(
        keys: &Array4<f32>,
        embed: &Array3<f32>,
        rows: usize,
        cols: usize,
        layer: usize,
    ) -> Result<Self, CorrelationError> {
        if keys.iter().chain(embed.iter()).any(|v| !v.is_finite()) {
            return Err(CorrelationError::NonFinite);
        }
        let keys = resize_features(keys, rows, cols)?;
        let embed = resize_features(&embed.clone().insert_axis(Axis(0)), rows, cols)?
            .index_axis_move(Axis(0), 0);
        Ok(Self { keys, embed, layer })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, r, c, _) = self.keys.dim();
        (r, c)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    /// Head-averaged cosine similarity; NaN where undefined.
    pub values: Array2<f32>,
    pub defined: Array2<bool>,
}

impl SimilarityMap {
    pub fn defined_values(&self) -> Vec<f32> {
        self.values
            .iter()
            .zip(self.defined.iter())
            .filter_map(|(&v, &d)| d.then_some(v))
            .collect()
    }
}

/// Similarity between each source pixel's keys and the keys at its
/// geometric correspondence, averaged over heads.
pub fn similarity_map(
    src: &FeatureMapSet,
    dst: &FeatureMapSet,
    field: &CorrespondenceField,
) -> Result<SimilarityMap, CorrelationError> {
    let (heads, _, _, dim) = src.keys.dim();
    let (dst_heads, _, _, dst_dim) = dst.keys.dim();
    if (heads, dim) != (dst_heads, dst_dim) {
        return Err(CorrelationError::FeatureMismatch(
            src.keys.shape().to_vec(),
            dst.keys.shape().to_vec(),
        ));
    }
    if src.dims() != field.dims() {
        return Err(CorrelationError::ShapeMismatch {
            expected: field.dims(),
            found: src.dims(),
        });
    }
    if dst.dims() != field.target_dims {
        return Err(CorrelationError::ShapeMismatch {
            expected: field.target_dims,
            found: dst.dims(),
        });
    }

    let dims = field.dims();
    let mut values = Array2::from_elem(dims, f32::NAN);
    let mut defined = Array2::from_elem(dims, false);
    for ((row, col), _) in field.valid.indexed_iter().filter(|(_, &v)| v) {
        let (tr, tc) = field
            .nearest_target(row, col)
            .expect("valid target lies inside the target image");
        let total: f64 = (0..heads)
            .map(|h| {
                let a = src.keys.slice(ndarray::s![h, row, col, ..]);
                let b = dst.keys.slice(ndarray::s![h, tr, tc, ..]);
                cosine(a, b) as f64
            })
            .sum();
        values[(row, col)] = ((total / heads as f64) as f32).clamp(-1.0, 1.0);
        defined[(row, col)] = true;
    }
    Ok(SimilarityMap { values, defined })
}

/// Threshold `μ − λσ` over defined similarities, with `λ = 1.5` when the
/// distribution is skewed toward dissimilar values and `1.0` otherwise.
pub fn adaptive_threshold(sim: &SimilarityMap) -> Result<f32, CorrelationError> {
    let values: Vec<f64> = sim.defined_values().into_iter().map(f64::from).collect();
    if values.len() < MIN_DEFINED_PIXELS {
        return Err(CorrelationError::OverlapTooSmall(values.len()));
    }
    let m = moments(&values).expect("non-empty");
    let lambda = if m.skewness < 0.0 {
        HEAVY_TAIL_LAMBDA
    } else {
        SYMMETRIC_LAMBDA
    };
    Ok((m.mean - lambda * m.std).clamp(-1.0, 1.0) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStage {
    Initial,
    Refined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProposal {
    pub mask: Array2<bool>,
    pub threshold_used: f32,
    pub stage: ProposalStage,
}

impl ChangeProposal {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Defined pixels strictly below `threshold`.
pub fn proposal_at(sim: &SimilarityMap, threshold: f32) -> ChangeProposal {
    let mask = ndarray::Zip::from(&sim.values)
        .and(&sim.defined)
        .map_collect(|&v, &d| d && v < threshold);
    ChangeProposal {
        mask,
        threshold_used: threshold,
        stage: ProposalStage::Initial,
    }
}

pub fn initial_proposal(sim: &SimilarityMap) -> Result<ChangeProposal, CorrelationError> {
    Ok(proposal_at(sim, adaptive_threshold(sim)?))
}

/// Removes occluded pixels from an initial proposal.
pub fn refine_with_occlusion(
    proposal: &ChangeProposal,
    occ: &OcclusionMask,
) -> Result<ChangeProposal, CorrelationError> {
    if proposal.stage != ProposalStage::Initial {
        return Err(CorrelationError::WrongStage);
    }
    if proposal.mask.dim() != occ.mask.dim() {
        return Err(CorrelationError::ShapeMismatch {
            expected: proposal.mask.dim(),
            found: occ.mask.dim(),
        });
    }
    let mask = ndarray::Zip::from(&proposal.mask)
        .and(&occ.mask)
        .map_collect(|&p, &o| p && !o);
    Ok(ChangeProposal {
        mask,
        threshold_used: proposal.threshold_used,
        stage: ProposalStage::Refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occlusion::DeltaStats;
    use ndarray::{array, Array1};

    fn identity_field(rows: usize, cols: usize) -> CorrespondenceField {
        let mut target = Array3::zeros((rows, cols, 2));
        for r in 0..rows {
            for c in 0..cols {
                target[(r, c, 0)] = c as f32;
                target[(r, c, 1)] = r as f32;
            }
        }
        CorrespondenceField {
            target,
            depth_in_target: Array2::from_elem((rows, cols), 1.0),
            valid: Array2::from_elem((rows, cols), true),
            target_dims: (rows, cols),
        }
    }

    fn occ(mask: Array2<bool>) -> OcclusionMask {
        OcclusionMask {
            mask,
            tau: 0.1,
            delta_stats: DeltaStats {
                median: 0.0,
                mad: 0.0,
            },
            depth_median: 1.0,
        }
    }

    fn sim_from(values: Vec<f32>, rows: usize, cols: usize) -> SimilarityMap {
        SimilarityMap {
            values: Array2::from_shape_vec((rows, cols), values).unwrap(),
            defined: Array2::from_elem((rows, cols), true),
        }
    }

    #[test]
    fn resize_identity_and_hand_bilinear() {
        let raw = array![[[[0.0f32], [1.0]], [[2.0], [3.0]]]];
        assert_eq!(resize_features(&raw, 2, 2).unwrap(), raw);
        let up = resize_features(&raw, 3, 3).unwrap();
        assert_eq!(up[(0, 1, 1, 0)], 1.5);
        assert_eq!(up[(0, 0, 1, 0)], 0.5);
        assert_eq!(up[(0, 2, 2, 0)], 3.0);
    }

    #[test]
    fn resize_preserves_constants() {
        let raw = Array4::from_elem((2, 3, 4, 5), 0.25f32);
        let up = resize_features(&raw, 17, 9).unwrap();
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_rejects_degenerate_source() {
        let raw = Array4::<f32>::zeros((1, 1, 4, 2));
        assert!(matches!(
            resize_features(&raw, 4, 4),
            Err(CorrelationError::TooSmall(1, 4))
        ));
    }

    #[test]
    fn self_similarity_is_one() {
        let keys = Array4::from_shape_fn((2, 6, 7, 3), |(h, r, c, k)| (h + r * 2 + c + k) as f32 + 0.5);
        let set = FeatureMapSet::from_raw(&keys, &Array3::ones((6, 7, 2)), 6, 7, 17).unwrap();
        let sim = similarity_map(&set, &set, &identity_field(6, 7)).unwrap();
        assert!(sim.defined.iter().all(|&d| d));
        assert!(sim.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn heads_are_averaged() {
        // head 0 identical, head 1 orthogonal → 0.5
        let mut a = Array4::zeros((2, 2, 2, 2));
        let mut b = Array4::zeros((2, 2, 2, 2));
        a.slice_mut(ndarray::s![.., .., .., 0]).fill(1.0);
        b.slice_mut(ndarray::s![0, .., .., 0]).fill(1.0);
        b.slice_mut(ndarray::s![1, .., .., 1]).fill(1.0);
        let embed = Array3::ones((2, 2, 1));
        let sa = FeatureMapSet::from_raw(&a, &embed, 2, 2, 17).unwrap();
        let sb = FeatureMapSet::from_raw(&b, &embed, 2, 2, 17).unwrap();
        let sim = similarity_map(&sa, &sb, &identity_field(2, 2)).unwrap();
        assert!(sim.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_norm_head_contributes_zero() {
        let a = Array1::from_vec(vec![0.0f32, 0.0]);
        let b = Array1::from_vec(vec![1.0f32, 0.0]);
        assert_eq!(cosine(a.view(), b.view()), 0.0);
    }

    #[test]
    fn undefined_where_field_invalid() {
        let keys = Array4::ones((1, 4, 4, 2));
        let set = FeatureMapSet::from_raw(&keys, &Array3::ones((4, 4, 1)), 4, 4, 17).unwrap();
        let mut field = identity_field(4, 4);
        field.valid[(1, 2)] = false;
        let sim = similarity_map(&set, &set, &field).unwrap();
        assert!(!sim.defined[(1, 2)]);
        assert!(sim.values[(1, 2)].is_nan());
    }

    #[test]
    fn mismatched_feature_dims_rejected() {
        let a = FeatureMapSet::from_raw(&Array4::ones((1, 4, 4, 2)), &Array3::ones((4, 4, 1)), 4, 4, 17).unwrap();
        let b = FeatureMapSet::from_raw(&Array4::ones((1, 4, 4, 3)), &Array3::ones((4, 4, 1)), 4, 4, 17).unwrap();
        assert!(matches!(
            similarity_map(&a, &b, &identity_field(4, 4)),
            Err(CorrelationError::FeatureMismatch(..))
        ));
    }

    #[test]
    fn degenerate_distribution_gives_empty_proposal() {
        let sim = sim_from(vec![1.0; 100], 10, 10);
        assert_eq!(adaptive_threshold(&sim).unwrap(), 1.0);
        assert_eq!(initial_proposal(&sim).unwrap().count(), 0);
    }

    #[test]
    fn bimodal_threshold_flags_dissimilar_pixels() {
        let mut values = vec![1.0f32; 900];
        values.extend(std::iter::repeat_n(0.0, 100));
        let sim = sim_from(values, 25, 40);
        let theta = adaptive_threshold(&sim).unwrap();
        assert!((theta - 0.45).abs() < 1e-6, "{theta}");
        let p = initial_proposal(&sim).unwrap();
        assert_eq!(p.count(), 100);
        assert!(p.mask.iter().skip(900).all(|&m| m));
    }

    #[test]
    fn symmetric_distribution_uses_unit_lambda() {
        // −1, 0, 1 repeated: mean 0, σ = sqrt(2/3), skew 0 → θ = −σ
        let values: Vec<f32> = (0..99).map(|i| (i % 3) as f32 - 1.0).collect();
        let sim = sim_from(values, 9, 11);
        let theta = adaptive_threshold(&sim).unwrap();
        assert!((theta as f64 + (2.0f64 / 3.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn too_few_pixels_rejected() {
        let sim = sim_from(vec![1.0; 63], 7, 9);
        let err = adaptive_threshold(&sim).unwrap_err();
        assert!(err.to_string().starts_with("overlap too small for thresholding"));
    }

    #[test]
    fn refinement_semantics() {
        let p = ChangeProposal {
            mask: array![[true, true], [false, true]],
            threshold_used: 0.5,
            stage: ProposalStage::Initial,
        };
        let empty = refine_with_occlusion(&p, &occ(Array2::from_elem((2, 2), false))).unwrap();
        assert_eq!(empty.mask, p.mask);
        assert_eq!(empty.stage, ProposalStage::Refined);
        let all = refine_with_occlusion(&p, &occ(Array2::from_elem((2, 2), true))).unwrap();
        assert_eq!(all.count(), 0);
        let disjoint = refine_with_occlusion(&p, &occ(array![[false, false], [true, false]])).unwrap();
        assert_eq!(disjoint.mask, p.mask);
        assert!(matches!(
            refine_with_occlusion(&all, &occ(Array2::from_elem((2, 2), true))),
            Err(CorrelationError::WrongStage)
        ));
    }
}
