//! Geometric–semantic mask matching and cross-view fusion.
//!
//! A segmentation mask is promoted to a change when it is not a giant
//! background region, the refined proposal covers enough of it, and its
//! embeddings disagree with those at the corresponding pixels of the other
//! view. The second view's change mask is pulled back into the query view
//! through the query→reference correspondence and united with the first.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::correlation::{cosine, ChangeProposal, ProposalStage};
use crate::geometry::CorrespondenceField;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("segmentation mask {0} is empty")]
    EmptyMask(usize),
    #[error("segmentation mask {index} is {found:?}, expected {expected:?}")]
    MaskShape {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("mask matching expects a refined proposal")]
    WrongStage,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("embedding widths differ: {0} vs {1}")]
    EmbedMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsmParams {
    /// Minimum fraction of a mask covered by the proposal.
    pub rho_overlap: f32,
    /// Mean cross-view embedding cosine must fall below this.
    pub theta_sem: f32,
    /// Masks larger than this fraction of the image are ignored.
    pub rho_max: f32,
}

impl Default for GsmParams {
    fn default() -> Self {
        Self {
            rho_overlap: 0.5,
            theta_sem: 0.6,
            rho_max: 0.8,
        }
    }
}

/// Class-agnostic segmentation masks of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMaskSet {
    masks: Vec<Array2<bool>>,
    areas: Vec<usize>,
}

impl SegMaskSet {
    pub fn new(masks: Vec<Array2<bool>>) -> Result<Self, MatchError> {
        let mut areas = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            if m.dim() != masks[0].dim() {
                return Err(MatchError::MaskShape {
                    index: i,
                    expected: masks[0].dim(),
                    found: m.dim(),
                });
            }
            let area = m.iter().filter(|&&v| v).count();
            if area == 0 {
                return Err(MatchError::EmptyMask(i));
            }
            areas.push(area);
        }
        Ok(Self { masks, areas })
    }

    pub fn empty() -> Self {
        Self {
            masks: Vec::new(),
            areas: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Array2<bool>] {
        &self.masks
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }
}

/// Per-mask decision record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskVerdict {
    pub index: usize,
    pub area_fraction: f32,
    pub proposal_overlap: f32,
    /// `None` when the mask has no pixel inside the overlap.
    pub semantic_similarity: Option<f32>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsmOutcome {
    pub mask: Array2<bool>,
    pub verdicts: Vec<MaskVerdict>,
    /// True when no segmentation masks were available and the refined
    /// proposal was passed through.
    pub fallback: bool,
}

impl GsmOutcome {
    pub fn selected(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|v| v.selected)
            .map(|v| v.index)
            .collect()
    }
}

fn mean_cross_view_similarity(
    mask: &Array2<bool>,
    embed_src: &Array3<f32>,
    embed_dst: &Array3<f32>,
    field: &CorrespondenceField,
) -> Option<f32> {
    let (mut total, mut n) = (0.0f64, 0usize);
    for ((row, col), _) in mask.indexed_iter().filter(|(_, &m)| m) {
        let Some((tr, tc)) = field.nearest_target(row, col) else {
            continue;
        };
        let a = embed_src.slice(ndarray::s![row, col, ..]);
        let b = embed_dst.slice(ndarray::s![tr, tc, ..]);
        total += cosine(a, b) as f64;
        n += 1;
    }
    (n > 0).then(|| (total / n as f64) as f32)
}

/// Selects whole segmentation masks that the refined proposal substantially
/// covers and whose embeddings are inconsistent across views.
pub fn gsm_match(
    proposal: &ChangeProposal,
    segs: &SegMaskSet,
    embed_src: &Array3<f32>,
    embed_dst: &Array3<f32>,
    field: &CorrespondenceField,
    params: GsmParams,
) -> Result<GsmOutcome, MatchError> {
    if proposal.stage != ProposalStage::Refined {
        return Err(MatchError::WrongStage);
    }
    let dims = proposal.mask.dim();
    if segs.is_empty() {
        return Ok(GsmOutcome {
            mask: proposal.mask.clone(),
            verdicts: Vec::new(),
            fallback: true,
        });
    }
    for (i, m) in segs.masks().iter().enumerate() {
        if m.dim() != dims {
            return Err(MatchError::MaskShape {
                index: i,
                expected: dims,
                found: m.dim(),
            });
        }
    }
    let (er, ec, ed) = embed_src.dim();
    if (er, ec) != dims || field.dims() != dims {
        return Err(MatchError::ShapeMismatch(dims, (er, ec)));
    }
    let (dr, dc, dd) = embed_dst.dim();
    if (dr, dc) != field.target_dims {
        return Err(MatchError::ShapeMismatch(field.target_dims, (dr, dc)));
    }
    if ed != dd {
        return Err(MatchError::EmbedMismatch(ed, dd));
    }

    let total = (dims.0 * dims.1) as f32;
    let mut out = Array2::from_elem(dims, false);
    let mut verdicts = Vec::with_capacity(segs.len());
    for (index, (mask, &area)) in segs.masks().iter().zip(segs.areas()).enumerate() {
        let area_fraction = area as f32 / total;
        let covered = ndarray::Zip::from(mask)
            .and(&proposal.mask)
            .fold(0usize, |acc, &m, &p| acc + (m && p) as usize);
        let proposal_overlap = covered as f32 / area as f32;
        let size_ok = area_fraction <= params.rho_max;
        let overlap_ok = proposal_overlap >= params.rho_overlap;
        // Only evaluate semantics for masks that pass the cheap geometric tests.
        let semantic_similarity = if size_ok && overlap_ok {
            mean_cross_view_similarity(mask, embed_src, embed_dst, field)
        } else {
            None
        };
        let semantic_ok = semantic_similarity.is_some_and(|s| s < params.theta_sem);
        let selected = size_ok && overlap_ok && semantic_ok;
        if selected {
            ndarray::Zip::from(&mut out)
                .and(mask)
                .for_each(|o, &m| *o |= m);
        }
        verdicts.push(MaskVerdict {
            index,
            area_fraction,
            proposal_overlap,
            semantic_similarity,
            selected,
        });
    }
    Ok(GsmOutcome {
        mask: out,
        verdicts,
        fallback: false,
    })
}

/// Pulls a reference-view mask back into the query view through the
/// query→reference correspondence.
pub fn warp_mask(
    mask_other: &Array2<bool>,
    field: &CorrespondenceField,
) -> Result<Array2<bool>, MatchError> {
    if mask_other.dim() != field.target_dims {
        return Err(MatchError::ShapeMismatch(field.target_dims, mask_other.dim()));
    }
    Ok(Array2::from_shape_fn(field.dims(), |(row, col)| {
        field
            .nearest_target(row, col)
            .is_some_and(|idx| mask_other[idx])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contribution {
    None,
    View1,
    View2,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalChangeMask {
    pub mask: Array2<bool>,
    pub contributions: Array2<Contribution>,
}

impl FinalChangeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Union of the query-view mask with the warped reference-view mask.
pub fn fuse(m1: &Array2<bool>, m2_warped: &Array2<bool>) -> Result<FinalChangeMask, MatchError> {
    if m1.dim() != m2_warped.dim() {
        return Err(MatchError::ShapeMismatch(m1.dim(), m2_warped.dim()));
    }
    let contributions = ndarray::Zip::from(m1)
        .and(m2_warped)
        .map_collect(|&a, &b| match (a, b) {
            (true, true) => Contribution::Both,
            (true, false) => Contribution::View1,
            (false, true) => Contribution::View2,
            (false, false) => Contribution::None,
        });
    let mask = contributions.mapv(|c| c != Contribution::None);
    Ok(FinalChangeMask {
        mask,
        contributions,
    })
}
