//! End-to-end detection over a prepared bundle.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleError, PairBundle, ViewData};
use crate::correlation::{
    initial_proposal, refine_with_occlusion, similarity_map, ChangeProposal, FeatureMapSet,
    ProposalStage, SimilarityMap, DEFAULT_LAYER,
};
use crate::geometry::{correspondence_field, CorrespondenceField};
use crate::illumination::{illumination_gap, IlluminationReport, MethodChoice, DEFAULT_SIGMA_FRAC};
use crate::matching::{fuse, gsm_match, warp_mask, FinalChangeMask, GsmOutcome, GsmParams, SegMaskSet};
use crate::occlusion::{occlusion_mask, OcclusionMask, OcclusionParams, DEFAULT_ALPHA, DEFAULT_KAPPA};
use crate::tensor::{write_tensor, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub alpha: f32,
    pub kappa: f32,
    /// Encoder layer whose keys the bundle carries.
    pub layer: usize,
    pub rho_overlap: f32,
    pub theta_sem: f32,
    pub rho_max: f32,
    pub illumination: MethodChoice,
    pub sigma_frac: f32,
    pub dump_intermediates: bool,
    /// Remove occluded pixels from the proposals. Disabling it gives the
    /// geometry + correlation configuration without occlusion reasoning.
    pub occlusion_filtering: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let gsm = GsmParams::default();
        Self {
            alpha: DEFAULT_ALPHA,
            kappa: DEFAULT_KAPPA,
            layer: DEFAULT_LAYER,
            rho_overlap: gsm.rho_overlap,
            theta_sem: gsm.theta_sem,
            rho_max: gsm.rho_max,
            illumination: MethodChoice::Auto,
            sigma_frac: DEFAULT_SIGMA_FRAC,
            dump_intermediates: false,
            occlusion_filtering: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |what: &str| Err(PipelineError::Config(what.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa <= 10.0) {
            return bad("kappa must lie in (0, 10]");
        }
        if !(self.rho_overlap > 0.0 && self.rho_overlap <= 1.0) {
            return bad("rho_overlap must lie in (0, 1]");
        }
        if !(-1.0..=1.0).contains(&self.theta_sem) {
            return bad("theta_sem must lie in [-1, 1]");
        }
        if !(self.rho_max > 0.0 && self.rho_max <= 1.0) {
            return bad("rho_max must lie in (0, 1]");
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac < 1.0) {
            return bad("sigma_frac must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn occlusion_params(&self) -> OcclusionParams {
        OcclusionParams {
            alpha: self.alpha,
            kappa: self.kappa,
        }
    }

    pub fn gsm_params(&self) -> GsmParams {
        GsmParams {
            rho_overlap: self.rho_overlap,
            theta_sem: self.theta_sem,
            rho_max: self.rho_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Illumination,
    Correspondence,
    Occlusion,
    Features,
    Similarity,
    Threshold,
    Refine,
    Matching,
    Warp,
    Fuse,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Illumination => "illumination",
            Stage::Correspondence => "correspondence",
            Stage::Occlusion => "occlusion",
            Stage::Features => "features",
            Stage::Similarity => "similarity",
            Stage::Threshold => "threshold",
            Stage::Refine => "refine",
            Stage::Matching => "matching",
            Stage::Warp => "warp",
            Stage::Fuse => "fuse",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("bundle lacks {0}")]
    MissingInput(String),
    #[error("{stage} stage (view {view}): {source}")]
    Stage {
        stage: Stage,
        view: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("refined proposal of view {0} overlaps its occlusion mask")]
    OccludedProposal(usize),
    #[error("cannot write intermediates: {0}")]
    Dump(#[from] TensorError),
}

impl PipelineError {
    /// Errors caused by bad input rather than a failing stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_) | PipelineError::Bundle(_) | PipelineError::MissingInput(_)
        )
    }
}

fn at<E>(stage: Stage, view: usize) -> impl FnOnce(E) -> PipelineError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| PipelineError::Stage {
        stage,
        view,
        source: Box::new(e),
    }
}

/// Intermediate products of one directional pass.
#[derive(Debug, Clone)]
pub struct ViewPass {
    /// Correspondence from this view into the other one.
    pub field: CorrespondenceField,
    pub occlusion: OcclusionMask,
    pub similarity: SimilarityMap,
    pub initial: ChangeProposal,
    pub refined: ChangeProposal,
    pub matching: GsmOutcome,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub final_mask: FinalChangeMask,
    pub view_1: ViewPass,
    pub view_2: ViewPass,
    /// View-2 change mask pulled back into view 1.
    pub warped_2: Array2<bool>,
    pub illumination: IlluminationReport,
}

fn features(view: &ViewData, index: usize, layer: usize) -> Result<FeatureMapSet, PipelineError> {
    let keys = view
        .features
        .as_ref()
        .ok_or_else(|| PipelineError::MissingInput(format!("features_{index}")))?;
    let embed = view
        .embed
        .as_ref()
        .ok_or_else(|| PipelineError::MissingInput(format!("embed_{index}")))?;
    FeatureMapSet::from_raw(keys, embed, view.height(), view.width(), layer)
        .map_err(at(Stage::Features, index))
}

fn check_layer(bundle: &PairBundle, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let Some(layer) = bundle.meta.get("layer") else {
        return Ok(());
    };
    match layer.parse::<usize>() {
        Ok(l) if l == cfg.layer => Ok(()),
        _ => Err(PipelineError::Config(format!(
            "bundle features come from layer {layer}, configuration expects {}",
            cfg.layer
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn view_pass(
    view: usize,
    field: CorrespondenceField,
    occlusion: OcclusionMask,
    src: &FeatureMapSet,
    dst: &FeatureMapSet,
    segs: &SegMaskSet,
    cfg: &PipelineConfig,
) -> Result<ViewPass, PipelineError> {
    let similarity = similarity_map(src, dst, &field).map_err(at(Stage::Similarity, view))?;
    let initial = initial_proposal(&similarity).map_err(at(Stage::Threshold, view))?;
    let refined = if cfg.occlusion_filtering {
        let refined = refine_with_occlusion(&initial, &occlusion).map_err(at(Stage::Refine, view))?;
        let leaked = ndarray::Zip::from(&refined.mask)
            .and(&occlusion.mask)
            .any(|&p, &o| p && o);
        if leaked {
            return Err(PipelineError::OccludedProposal(view));
        }
        refined
    } else {
        ChangeProposal {
            mask: initial.mask.clone(),
            threshold_used: initial.threshold_used,
            stage: ProposalStage::Refined,
        }
    };
    let matching = gsm_match(&refined, segs, &src.embed, &dst.embed, &field, cfg.gsm_params())
        .map_err(at(Stage::Matching, view))?;
    Ok(ViewPass {
        field,
        occlusion,
        similarity,
        initial,
        refined,
        matching,
    })
}

fn seg_set(view: &ViewData, index: usize) -> Result<SegMaskSet, PipelineError> {
    match &view.seg_masks {
        Some(masks) => SegMaskSet::new(masks.clone()).map_err(at(Stage::Matching, index)),
        None => Ok(SegMaskSet::empty()),
    }
}

/// Runs both directional passes and fuses them into the view-1 change mask.
pub fn run_detect(bundle: &PairBundle, cfg: &PipelineConfig) -> Result<Detection, PipelineError> {
    cfg.validate()?;
    bundle.validate()?;
    check_layer(bundle, cfg)?;
    let (v1, v2) = (&bundle.view_1, &bundle.view_2);
    let f1 = features(v1, 1, cfg.layer)?;
    let f2 = features(v2, 2, cfg.layer)?;
    let (segs1, segs2) = (seg_set(v1, 1)?, seg_set(v2, 2)?);
    let illumination = illumination_gap(&v1.image, &v2.image).map_err(at(Stage::Illumination, 1))?;

    let cam1 = v1.camera().map_err(at(Stage::Correspondence, 1))?;
    let cam2 = v2.camera().map_err(at(Stage::Correspondence, 2))?;
    let field_12 = correspondence_field(&v1.depth, &cam1, &cam2).map_err(at(Stage::Correspondence, 1))?;
    let field_21 = correspondence_field(&v2.depth, &cam2, &cam1).map_err(at(Stage::Correspondence, 2))?;
    let occ_1 = occlusion_mask(&field_12, &v2.depth, cfg.occlusion_params()).map_err(at(Stage::Occlusion, 1))?;
    let occ_2 = occlusion_mask(&field_21, &v1.depth, cfg.occlusion_params()).map_err(at(Stage::Occlusion, 2))?;

    let view_1 = view_pass(1, field_12, occ_1, &f1, &f2, &segs1, cfg)?;
    let view_2 = view_pass(2, field_21, occ_2, &f2, &f1, &segs2, cfg)?;

    let warped_2 = warp_mask(&view_2.matching.mask, &view_1.field).map_err(at(Stage::Warp, 2))?;
    let final_mask = fuse(&view_1.matching.mask, &warped_2).map_err(at(Stage::Fuse, 1))?;
    Ok(Detection {
        final_mask,
        view_1,
        view_2,
        warped_2,
        illumination,
    })
}

impl Detection {
    /// Writes every intermediate as `.npy`, numbered in execution order.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(TensorError::Io)?;
        let put = |name: &str, t: Tensor| write_tensor(&t, dir.join(format!("{name}.npy")));
        for (i, pass) in [(1, &self.view_1), (2, &self.view_2)] {
            put(&format!("01_field_{i}_target"), Tensor::from_array(&pass.field.target)?)?;
            put(&format!("01_field_{i}_valid"), Tensor::from_array(&pass.field.valid)?)?;
            put(&format!("02_occlusion_{i}"), Tensor::from_array(&pass.occlusion.mask)?)?;
            put(&format!("03_similarity_{i}"), Tensor::from_array(&pass.similarity.values)?)?;
            put(&format!("04_initial_{i}"), Tensor::from_array(&pass.initial.mask)?)?;
            put(&format!("05_refined_{i}"), Tensor::from_array(&pass.refined.mask)?)?;
            put(&format!("06_change_{i}"), Tensor::from_array(&pass.matching.mask)?)?;
        }
        put("07_warped_2", Tensor::from_array(&self.warped_2)?)?;
        put("08_final", Tensor::from_array(&self.final_mask.mask)?)?;
        Ok(())
    }

    /// Compact JSON-friendly summary of the run.
    pub fn summary(&self) -> DetectionSummary {
        let pass = |p: &ViewPass| PassSummary {
            overlap: p.field.overlap_count(),
            occluded: p.occlusion.count(),
            tau: p.occlusion.tau,
            threshold: p.initial.threshold_used,
            initial: p.initial.count(),
            refined: p.refined.count(),
            selected_masks: p.matching.selected(),
            fallback: p.matching.fallback,
            changed: p.matching.mask.iter().filter(|&&m| m).count(),
        };
        DetectionSummary {
            changed_pixels: self.final_mask.count(),
            view_1: pass(&self.view_1),
            view_2: pass(&self.view_2),
            illumination: self.illumination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub overlap: usize,
    pub occluded: usize,
    pub tau: f32,
    pub threshold: f32,
    pub initial: usize,
    pub refined: usize,
    pub selected_masks: Vec<usize>,
    pub fallback: bool,
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub changed_pixels: usize,
    pub view_1: PassSummary,
    pub view_2: PassSummary,
    pub illumination: IlluminationReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, EditKind, SceneSpec};

    #[test]
    fn defaults_are_as_documented() {
        let c = PipelineConfig::default();
        assert_eq!((c.alpha, c.kappa, c.layer), (0.03, 2.5, 17));
        assert_eq!((c.rho_overlap, c.theta_sem, c.rho_max), (0.5, 0.6, 0.8));
        assert_eq!(c.illumination, MethodChoice::Auto);
        assert_eq!(c.sigma_frac, 0.1);
        assert!(!c.dump_intermediates);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_json_overrides_and_rejects_unknown_keys() {
        let c: PipelineConfig = serde_json::from_str(r#"{"alpha": 0.05}"#).unwrap();
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.kappa, 2.5);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"alhpa": 0.05}"#).is_err());
        let bad = PipelineConfig {
            rho_max: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_validation());
    }

    #[test]
    fn layer_mismatch_is_a_validation_error() {
        let scene = generate_scene(&SceneSpec::detection(0, EditKind::None)).unwrap();
        let cfg = PipelineConfig {
            layer: 12,
            ..Default::default()
        };
        let err = run_detect(&scene.bundle, &cfg).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }

    #[test]
    fn missing_features_are_reported() {
        let mut scene = generate_scene(&SceneSpec::detection(0, EditKind::None)).unwrap();
        scene.bundle.view_2.embed = None;
        let err = run_detect(&scene.bundle, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "bundle lacks embed_2");
    }

    #[test]
    fn fallback_without_segmentation() {
        let mut scene = generate_scene(&SceneSpec::detection(1, EditKind::Recolor)).unwrap();
        scene.bundle.view_1.seg_masks = None;
        scene.bundle.view_2.seg_masks = None;
        let det = run_detect(&scene.bundle, &PipelineConfig::default()).unwrap();
        assert!(det.view_1.matching.fallback && det.view_2.matching.fallback);
        assert_eq!(det.view_1.matching.mask, det.view_1.refined.mask);
        let expected = fuse(&det.view_1.refined.mask, &warp_mask(&det.view_2.refined.mask, &det.view_1.field).unwrap()).unwrap();
        assert_eq!(det.final_mask, expected);
    }

    #[test]
    fn refined_proposals_avoid_occlusions() {
        let scene = generate_scene(&SceneSpec::occlusion_probe(0)).unwrap();
        let det = run_detect(&scene.bundle, &PipelineConfig::default()).unwrap();
        for pass in [&det.view_1, &det.view_2] {
            assert!(pass.occlusion.count() > 0);
            assert!(ndarray::Zip::from(&pass.refined.mask).and(&pass.occlusion.mask).all(|&p, &o| !(p && o)));
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let scene = generate_scene(&SceneSpec::detection(2, EditKind::Insert)).unwrap();
        let cfg = PipelineConfig::default();
        let (a, b) = (run_detect(&scene.bundle, &cfg).unwrap(), run_detect(&scene.bundle, &cfg).unwrap());
        assert_eq!(a.final_mask, b.final_mask);
        assert_eq!(a.summary(), b.summary());
    }
}
