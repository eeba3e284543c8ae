//! Pair bundles: every input for one query/reference pair, plus the JSON
//! manifest that ties the individual tensor files together.
//!
//! Manifest keys map to paths relative to the manifest's directory:
//!
//! ```json
//! {
//!   "image_1": "image_1.npy", "image_2": "image_2.npy",
//!   "depth_1": "depth_1.npy", "depth_2": "depth_2.npy",
//!   "intrinsics_1": "intrinsics_1.npy", "intrinsics_2": "intrinsics_2.npy",
//!   "extrinsics_1": "extrinsics_1.npy", "extrinsics_2": "extrinsics_2.npy",
//!   "features_1": "features_1.npy", "seg_masks_1": ["seg_1_000.npy"],
//!   "meta": { "source": "synthetic", "stride": "5" }
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use ndarray::{Array2, Array3, Array4, Ix2, Ix3, Ix4};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::{Camera, CorrespondenceField, GeometryError};
use crate::occlusion::{DeltaStats, OcclusionMask};
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

const INVARIANT_TOL: f64 = 1e-6;

pub const REQUIRED_KEYS: [&str; 8] = [
    "image_1",
    "image_2",
    "depth_1",
    "depth_2",
    "intrinsics_1",
    "intrinsics_2",
    "extrinsics_1",
    "extrinsics_2",
];

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest must be a JSON object")]
    NotAnObject,
    #[error("missing mandatory field {0}")]
    MissingField(&'static str),
    #[error("field {field} has an invalid manifest entry: {reason}")]
    BadEntry { field: String, reason: String },
    #[error("field {field}: {source}")]
    Tensor {
        field: String,
        source: TensorError,
    },
    #[error("shape mismatch for {field}: expected {expected}, found {found:?}")]
    Shape {
        field: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
}

/// Everything the engine knows about one of the two views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    /// H×W×3 sRGB.
    pub image: Array3<u8>,
    /// H×W depth in scene units.
    pub depth: Array2<f32>,
    pub intrinsics: Matrix3<f64>,
    /// World to camera.
    pub extrinsics: Matrix4<f64>,
    /// heads×h'×w'×d layer keys.
    pub features: Option<Array4<f32>>,
    /// h'×w'×d_e final encoder embedding.
    pub embed: Option<Array3<f32>>,
    pub seg_masks: Option<Vec<Array2<bool>>>,
}

impl ViewData {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn camera(&self) -> Result<Camera, GeometryError> {
        Camera::new(self.intrinsics, self.extrinsics, self.width(), self.height())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBundle {
    /// Query view.
    pub view_1: ViewData,
    /// Reference view.
    pub view_2: ViewData,
    /// Query-view ground truth change mask.
    pub gt_mask: Option<Array2<bool>>,
    pub meta: BTreeMap<String, String>,
}

impl PairBundle {
    pub fn height(&self) -> usize {
        self.view_1.height()
    }

    pub fn width(&self) -> usize {
        self.view_1.width()
    }

    /// Swaps query and reference roles. The ground truth mask belongs to the
    /// query view and is therefore dropped.
    pub fn swapped(&self) -> PairBundle {
        PairBundle {
            view_1: self.view_2.clone(),
            view_2: self.view_1.clone(),
            gt_mask: None,
            meta: self.meta.clone(),
        }
    }

    /// Checks every bundle invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        let (h, w) = (self.height(), self.width());
        for (suffix, view) in [("1", &self.view_1), ("2", &self.view_2)] {
            validate_view(view, suffix, h, w)?;
        }
        if let Some(gt) = &self.gt_mask {
            expect_shape("gt_mask", gt.shape(), &[h, w])?;
        }
        Ok(())
    }
}

fn expect_shape(field: &str, found: &[usize], expected: &[usize]) -> Result<(), BundleError> {
    if found != expected {
        return Err(BundleError::Shape {
            field: field.to_string(),
            expected: format!("{expected:?}"),
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn validate_view(view: &ViewData, suffix: &str, h: usize, w: usize) -> Result<(), BundleError> {
    expect_shape(&format!("image_{suffix}"), view.image.shape(), &[h, w, 3])?;
    expect_shape(&format!("depth_{suffix}"), view.depth.shape(), &[h, w])?;
    if h == 0 || w == 0 {
        return Err(BundleError::Invariant("images must be non-empty".into()));
    }
    if view.depth.iter().any(|d| !d.is_finite()) {
        return Err(BundleError::Invariant(format!(
            "depth_{suffix} contains non-finite values"
        )));
    }

    let k = &view.intrinsics;
    if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
        return Err(BundleError::Invariant(format!(
            "intrinsics_{suffix} must have positive focal lengths"
        )));
    }
    if k[(0, 1)].abs() > INVARIANT_TOL || k[(1, 0)].abs() > INVARIANT_TOL {
        return Err(BundleError::Invariant(format!(
            "intrinsics_{suffix} must have zero skew"
        )));
    }
    let last = [k[(2, 0)], k[(2, 1)], k[(2, 2)]];
    if (last[0].abs() + last[1].abs() + (last[2] - 1.0).abs()) > INVARIANT_TOL {
        return Err(BundleError::Invariant(format!(
            "intrinsics_{suffix} bottom row must be (0, 0, 1), found {last:?}"
        )));
    }

    let t = &view.extrinsics;
    let bottom = [t[(3, 0)], t[(3, 1)], t[(3, 2)], t[(3, 3)]];
    let off = bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs();
    if off > INVARIANT_TOL || t.iter().any(|v| !v.is_finite()) {
        return Err(BundleError::Invariant(format!(
            "extrinsics_{suffix} bottom row must be (0, 0, 0, 1), found {bottom:?}"
        )));
    }

    if let Some(features) = &view.features {
        let s = features.shape();
        if s.contains(&0) {
            return Err(BundleError::Shape {
                field: format!("features_{suffix}"),
                expected: "non-empty heads×h×w×d".into(),
                found: s.to_vec(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::Invariant(format!(
                "features_{suffix} contains non-finite values"
            )));
        }
    }
    if let Some(embed) = &view.embed {
        let s = embed.shape();
        if s.contains(&0) {
            return Err(BundleError::Shape {
                field: format!("embed_{suffix}"),
                expected: "non-empty h×w×d".into(),
                found: s.to_vec(),
            });
        }
        if embed.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::Invariant(format!(
                "embed_{suffix} contains non-finite values"
            )));
        }
    }
    if let Some(masks) = &view.seg_masks {
        for (i, m) in masks.iter().enumerate() {
            expect_shape(&format!("seg_masks_{suffix}[{i}]"), m.shape(), &[h, w])?;
        }
    }
    Ok(())
}

/// Loads and validates a bundle from its manifest.
pub fn load_bundle(manifest: impl AsRef<Path>) -> Result<PairBundle, BundleError> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|source| BundleError::Io {
        path: manifest.to_path_buf(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text)?;
    let entries = root.as_object().ok_or(BundleError::NotAnObject)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let loader = Loader { base, entries };

    for key in REQUIRED_KEYS {
        if !entries.contains_key(key) {
            return Err(BundleError::MissingField(key));
        }
    }

    let view_1 = loader.view("1")?;
    let view_2 = loader.view("2")?;
    let gt_mask = match entries.get("gt_mask") {
        Some(_) => Some(loader.array::<bool, Ix2>("gt_mask")?),
        None => None,
    };
    let meta = match entries.get("meta") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(map)) => map
            .iter()
            .map(|(k, v)| {
                let value = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), value)
            })
            .collect(),
        Some(_) => {
            return Err(BundleError::BadEntry {
                field: "meta".into(),
                reason: "expected an object".into(),
            })
        }
    };

    let bundle = PairBundle {
        view_1,
        view_2,
        gt_mask,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

struct Loader<'a> {
    base: &'a Path,
    entries: &'a Map<String, Value>,
}

impl Loader<'_> {
    fn path_of(&self, field: &str, value: &Value) -> Result<PathBuf, BundleError> {
        let rel = value.as_str().ok_or_else(|| BundleError::BadEntry {
            field: field.to_string(),
            reason: "expected a path string".into(),
        })?;
        Ok(self.base.join(rel))
    }

    fn tensor_at(&self, field: &str, path: &Path) -> Result<Tensor, BundleError> {
        read_tensor(path).map_err(|source| BundleError::Tensor {
            field: field.to_string(),
            source,
        })
    }

    fn array<A, D>(&self, field: &str) -> Result<ndarray::Array<A, D>, BundleError>
    where
        A: crate::tensor::Element,
        D: ndarray::Dimension,
    {
        let value = self.entries.get(field).ok_or_else(|| BundleError::BadEntry {
            field: field.to_string(),
            reason: "absent".into(),
        })?;
        let path = self.path_of(field, value)?;
        self.tensor_at(field, &path)?
            .to_array::<A, D>()
            .map_err(|source| BundleError::Tensor {
                field: field.to_string(),
                source,
            })
    }

    fn matrix<const N: usize>(&self, field: &str) -> Result<[[f64; N]; N], BundleError> {
        let arr = self.array::<f32, Ix2>(field)?;
        expect_shape(field, arr.shape(), &[N, N])?;
        let mut out = [[0.0; N]; N];
        for ((r, c), v) in arr.indexed_iter() {
            out[r][c] = *v as f64;
        }
        Ok(out)
    }

    fn view(&self, suffix: &str) -> Result<ViewData, BundleError> {
        let image = self.array::<u8, Ix3>(&format!("image_{suffix}"))?;
        let depth = self.array::<f32, Ix2>(&format!("depth_{suffix}"))?;
        let k = self.matrix::<3>(&format!("intrinsics_{suffix}"))?;
        let t = self.matrix::<4>(&format!("extrinsics_{suffix}"))?;

        let features_key = format!("features_{suffix}");
        let features = match self.entries.contains_key(&features_key) {
            true => Some(self.array::<f32, Ix4>(&features_key)?),
            false => None,
        };
        let embed_key = format!("embed_{suffix}");
        let embed = match self.entries.contains_key(&embed_key) {
            true => Some(self.array::<f32, Ix3>(&embed_key)?),
            false => None,
        };
        let seg_key = format!("seg_masks_{suffix}");
        let seg_masks = match self.entries.get(&seg_key) {
            None => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, item)| {
                        let field = format!("{seg_key}[{i}]");
                        let path = self.path_of(&field, item)?;
                        self.tensor_at(&field, &path)?
                            .to_array::<bool, Ix2>()
                            .map_err(|source| BundleError::Tensor { field, source })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            Some(_) => {
                return Err(BundleError::BadEntry {
                    field: seg_key,
                    reason: "expected an array of paths".into(),
                })
            }
        };

        Ok(ViewData {
            image,
            depth,
            intrinsics: Matrix3::from_fn(|r, c| k[r][c]),
            extrinsics: Matrix4::from_fn(|r, c| t[r][c]),
            features,
            embed,
            seg_masks,
        })
    }
}

/// Writes every tensor of the bundle into `dir` and returns the manifest path.
pub fn write_bundle(bundle: &PairBundle, dir: impl AsRef<Path>) -> Result<PathBuf, BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = Map::new();
    let put = |field: String, tensor: Result<Tensor, TensorError>| -> Result<Value, BundleError> {
        let tensor = tensor.map_err(|source| BundleError::Tensor {
            field: field.clone(),
            source,
        })?;
        let name = format!("{field}.npy");
        write_tensor(&tensor, dir.join(&name)).map_err(|source| BundleError::Tensor {
            field: field.clone(),
            source,
        })?;
        Ok(Value::String(name))
    };

    for (suffix, view) in [("1", &bundle.view_1), ("2", &bundle.view_2)] {
        let k = Array2::from_shape_fn((3, 3), |(r, c)| view.intrinsics[(r, c)] as f32);
        let t = Array2::from_shape_fn((4, 4), |(r, c)| view.extrinsics[(r, c)] as f32);
        let entries = [
            ("image", Tensor::from_array(&view.image)),
            ("depth", Tensor::from_array(&view.depth)),
            ("intrinsics", Tensor::from_array(&k)),
            ("extrinsics", Tensor::from_array(&t)),
        ];
        for (name, tensor) in entries {
            let key = format!("{name}_{suffix}");
            let value = put(key.clone(), tensor)?;
            manifest.insert(key, value);
        }
        if let Some(features) = &view.features {
            let key = format!("features_{suffix}");
            let value = put(key.clone(), Tensor::from_array(features))?;
            manifest.insert(key, value);
        }
        if let Some(embed) = &view.embed {
            let key = format!("embed_{suffix}");
            let value = put(key.clone(), Tensor::from_array(embed))?;
            manifest.insert(key, value);
        }
        if let Some(masks) = &view.seg_masks {
            let mut paths = Vec::with_capacity(masks.len());
            for (i, m) in masks.iter().enumerate() {
                paths.push(put(format!("seg_{suffix}_{i:03}"), Tensor::from_array(m))?);
            }
            manifest.insert(format!("seg_masks_{suffix}"), Value::Array(paths));
        }
    }
    if let Some(gt) = &bundle.gt_mask {
        let value = put("gt_mask".into(), Tensor::from_array(gt))?;
        manifest.insert("gt_mask".into(), value);
    }
    let meta: Map<String, Value> = bundle
        .meta
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    manifest.insert("meta".into(), Value::Object(meta));

    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Value::Object(manifest))?;
    fs::write(&path, text).map_err(|source| BundleError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn tensor_err(field: &str) -> impl FnOnce(TensorError) -> BundleError + '_ {
    move |source| BundleError::Tensor {
        field: field.to_string(),
        source,
    }
}

/// Writes a correspondence field as `{stem}_target.npy` (H×W×2 f32),
/// `{stem}_depth_in_target.npy` (H×W f32) and `{stem}_valid.npy` (H×W bool).
pub fn write_field(
    field: &CorrespondenceField,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    let parts = [
        ("target", Tensor::from_array(&field.target)),
        ("depth_in_target", Tensor::from_array(&field.depth_in_target)),
        ("valid", Tensor::from_array(&field.valid)),
    ];
    for (part, tensor) in parts {
        let name = format!("{stem}_{part}");
        let tensor = tensor.map_err(tensor_err(&name))?;
        write_tensor(&tensor, dir.join(format!("{name}.npy"))).map_err(tensor_err(&name))?;
    }
    Ok(())
}

/// Reads a field written by [`write_field`]; `target_dims` is the shape of the
/// target view, which the tensors do not record.
pub fn read_field(
    dir: impl AsRef<Path>,
    stem: &str,
    target_dims: (usize, usize),
) -> Result<CorrespondenceField, BundleError> {
    let dir = dir.as_ref();
    let load = |part: &str| {
        let name = format!("{stem}_{part}");
        read_tensor(dir.join(format!("{name}.npy"))).map_err(tensor_err(&name)).map(|t| (name, t))
    };
    let (name, t) = load("target")?;
    let target: Array3<f32> = t.to_array::<f32, Ix3>().map_err(tensor_err(&name))?;
    let (name, t) = load("depth_in_target")?;
    let depth_in_target: Array2<f32> = t.to_array::<f32, Ix2>().map_err(tensor_err(&name))?;
    let (name, t) = load("valid")?;
    let valid: Array2<bool> = t.to_array::<bool, Ix2>().map_err(tensor_err(&name))?;
    let (rows, cols, two) = target.dim();
    if two != 2 || depth_in_target.dim() != (rows, cols) || valid.dim() != (rows, cols) {
        return Err(BundleError::Shape {
            field: stem.to_string(),
            expected: format!("[{rows}, {cols}, 2] target with matching planes"),
            found: vec![rows, cols, two],
        });
    }
    for ((r, c), &v) in valid.indexed_iter() {
        let t = [target[(r, c, 0)], target[(r, c, 1)]];
        let ok = t[0] >= 0.0
            && t[1] >= 0.0
            && t[0] <= (target_dims.1 as f32 - 1.0)
            && t[1] <= (target_dims.0 as f32 - 1.0)
            && depth_in_target[(r, c)] > 0.0;
        if v && !ok {
            return Err(BundleError::Invariant(format!(
                "{stem}: valid pixel ({r}, {c}) has target {t:?} outside the target view"
            )));
        }
    }
    Ok(CorrespondenceField {
        target,
        depth_in_target,
        valid,
        target_dims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSidecar {
    pub tau: f32,
    pub median: f32,
    pub mad: f32,
    pub depth_median: f32,
}

/// Writes an occlusion mask as `{stem}.npy` plus a `{stem}.json` sidecar.
pub fn write_occlusion(
    occ: &OcclusionMask,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    let tensor = Tensor::from_array(&occ.mask).map_err(tensor_err(stem))?;
    write_tensor(&tensor, dir.join(format!("{stem}.npy"))).map_err(tensor_err(stem))?;
    let sidecar = OcclusionSidecar {
        tau: occ.tau,
        median: occ.delta_stats.median,
        mad: occ.delta_stats.mad,
        depth_median: occ.depth_median,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|source| BundleError::Io { path, source })
}

pub fn read_occlusion(dir: impl AsRef<Path>, stem: &str) -> Result<OcclusionMask, BundleError> {
    let dir = dir.as_ref();
    let mask = read_tensor(dir.join(format!("{stem}.npy")))
        .and_then(|t| t.to_array::<bool, Ix2>())
        .map_err(tensor_err(stem))?;
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|source| BundleError::Io { path, source })?;
    let s: OcclusionSidecar = serde_json::from_str(&text)?;
    Ok(OcclusionMask {
        mask,
        tau: s.tau,
        delta_stats: DeltaStats {
            median: s.median,
            mad: s.mad,
        },
        depth_median: s.depth_median,
    })
}
