//! Ray-cast two-view scenes with exact geometry, injected changes and
//! synthetic features, plus brute-force oracles for overlap and occlusion.
//!
//! World frame: x right, y down, z forward. A camera with zero yaw, pitch and
//! roll looks down +z.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{PairBundle, ViewData};
use crate::correlation::DEFAULT_LAYER;
use crate::geometry::{
    rotation_x, rotation_y, rotation_z, world_to_camera, GeometryError, BEHIND_CAMERA_EPS,
    DOMAIN_TOLERANCE,
};
use crate::tensor::{write_tensor, Tensor, TensorError};

/// Depth slack used by the occlusion oracle.
pub const ORACLE_SLACK: f64 = 1e-6;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("camera {view} sees no surface")]
    NothingVisible { view: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot write ground truth: {0}")]
    Write(#[from] TensorError),
    #[error("cannot create output directory: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned rectangle. `half_extents` run along the two remaining
    /// axes in x, y, z order.
    Rect {
        center: [f64; 3],
        normal: Axis,
        half_extents: [f64; 2],
        albedo: [u8; 3],
        /// Checkerboard cell size in world units; plain when absent.
        #[serde(default)]
        checker: Option<f64>,
    },
    #[serde(rename = "box")]
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [u8; 3],
        #[serde(default)]
        checker: Option<f64>,
    },
}

fn in_plane_axes(normal: usize) -> [usize; 2] {
    match normal {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

impl Primitive {
    pub fn albedo(&self) -> [u8; 3] {
        match self {
            Primitive::Rect { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    fn set_albedo(&mut self, value: [u8; 3]) {
        match self {
            Primitive::Rect { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo = value,
        }
    }

    fn checker(&self) -> Option<f64> {
        match self {
            Primitive::Rect { checker, .. } | Primitive::Cuboid { checker, .. } => *checker,
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        let ok = match self {
            Primitive::Rect { half_extents, .. } => half_extents.iter().all(|&e| e > 0.0),
            Primitive::Cuboid { min, max, .. } => (0..3).all(|i| max[i] > min[i]),
        };
        if !ok {
            return Err(SynthError::InvalidSpec(format!("degenerate primitive {self:?}")));
        }
        if self.checker().is_some_and(|c| !(c > 0.0)) {
            return Err(SynthError::InvalidSpec("checker size must be positive".into()));
        }
        Ok(())
    }

    /// First intersection along `origin + t·dir`, t > 0, with the face axis.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        match self {
            Primitive::Rect {
                center,
                normal,
                half_extents,
                ..
            } => {
                let a = normal.index();
                if dir[a].abs() < 1e-15 {
                    return None;
                }
                let t = (center[a] - origin[a]) / dir[a];
                if !(t > HIT_EPS) {
                    return None;
                }
                let p = origin + dir * t;
                let inside = in_plane_axes(a)
                    .iter()
                    .zip(half_extents)
                    .all(|(&b, &h)| (p[b] - center[b]).abs() <= h);
                inside.then_some((t, a))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut near, mut far, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for i in 0..3 {
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = {
                        let a = (min[i] - origin[i]) / dir[i];
                        let b = (max[i] - origin[i]) / dir[i];
                        (a.min(b), a.max(b))
                    };
                    if t0 > near {
                        near = t0;
                        axis = i;
                    }
                    far = far.min(t1);
                }
                (near <= far && near > HIT_EPS).then_some((near, axis))
            }
        }
    }

    fn shade(&self, point: &Vector3<f64>, axis: usize) -> [u8; 3] {
        let albedo = self.albedo();
        let Some(cell) = self.checker() else {
            return albedo;
        };
        let [a, b] = in_plane_axes(axis);
        let parity = ((point[a] / cell).floor() + (point[b] / cell).floor()) as i64;
        if parity.rem_euclid(2) == 0 {
            albedo
        } else {
            albedo.map(|c| (c as f64 * 0.7).round() as u8)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Change {
    Insert { primitive: Primitive },
    /// Index into the layout.
    Remove { index: usize },
    Recolor { index: usize, albedo: [u8; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub focal: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
}

impl CameraSpec {
    fn orientation(&self) -> Matrix3<f64> {
        rotation_y(self.yaw_deg.to_radians())
            * rotation_x(self.pitch_deg.to_radians())
            * rotation_z(self.roll_deg.to_radians())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub heads: usize,
    pub key_dim: usize,
    pub embed_dim: usize,
    /// Maximum per-pixel angular perturbation in degrees.
    pub noise_deg: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            heads: 4,
            key_dim: 32,
            embed_dim: 32,
            noise_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: Option<String>,
    /// (H, W)
    pub resolution: [usize; 2],
    pub seed: u64,
    pub layout: Vec<Primitive>,
    pub cam1: CameraSpec,
    pub cam2: CameraSpec,
    /// Edits applied to the world seen by camera 2.
    #[serde(default)]
    pub changes: Vec<Change>,
    #[serde(default)]
    pub features: FeatureSpec,
}

/// Which view plays the source role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    OneToTwo,
    TwoToOne,
}

impl Direction {
    fn indices(self) -> (usize, usize) {
        match self {
            Direction::OneToTwo => (0, 1),
            Direction::TwoToOne => (1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Object {
    id: u32,
    primitive: Primitive,
}

#[derive(Debug, Clone, PartialEq)]
struct World(Vec<Object>);

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    object: usize,
    axis: usize,
}

impl World {
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (object, o) in self.0.iter().enumerate() {
            if let Some((t, axis)) = o.primitive.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, object, axis });
                }
            }
        }
        best
    }

    /// Surface identity used for features and change labels.
    fn surface(&self, hit: Option<Hit>) -> Option<(u32, [u8; 3])> {
        hit.map(|h| (self.0[h.object].id, self.0[h.object].primitive.albedo()))
    }
}

#[derive(Debug, Clone)]
struct Rig {
    k: Matrix3<f64>,
    orientation: Matrix3<f64>,
    center: Vector3<f64>,
}

impl Rig {
    fn new(spec: &CameraSpec, rows: usize, cols: usize) -> Result<Self, SynthError> {
        if !(spec.focal > 0.0) {
            return Err(SynthError::InvalidSpec("focal length must be positive".into()));
        }
        let k = Matrix3::new(
            spec.focal,
            0.0,
            (cols as f64 - 1.0) / 2.0,
            0.0,
            spec.focal,
            (rows as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Ok(Self {
            k,
            orientation: spec.orientation(),
            center: Vector3::from(spec.position),
        })
    }

    /// World ray direction through pixel `(u, v)` with unit camera-z component,
    /// so the ray parameter equals camera depth.
    fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new(
            (u - self.k[(0, 2)]) / self.k[(0, 0)],
            (v - self.k[(1, 2)]) / self.k[(1, 1)],
            1.0,
        );
        self.orientation * d
    }

    fn depth_of(&self, x: &Vector3<f64>) -> f64 {
        (self.orientation.transpose() * (x - self.center)).z
    }

    fn extrinsics(&self) -> Matrix4<f64> {
        world_to_camera(&self.orientation, &self.center)
    }
}

/// Per-view ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTruth {
    /// Pixels whose visible surface or albedo differs between the two world
    /// states, restricted to the overlap.
    pub change: Array2<bool>,
    /// Overlap pixels hidden from the other camera.
    pub occlusion: Array2<bool>,
    pub overlap: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub view_1: ViewTruth,
    pub view_2: ViewTruth,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub bundle: PairBundle,
    pub truth: GroundTruth,
    worlds: [World; 2],
    rigs: [Rig; 2],
}

struct Render {
    depth: Array2<f32>,
    image: Array3<u8>,
    surfaces: Array2<Option<(u32, [u8; 3])>>,
    hits: Array2<Option<Hit>>,
}

fn render(world: &World, rig: &Rig, rows: usize, cols: usize) -> Render {
    let hits = Array2::from_shape_fn((rows, cols), |(r, c)| {
        world.cast(&rig.center, &rig.ray(c as f64, r as f64))
    });
    let depth = hits.mapv(|h| h.map_or(0.0, |h| h.t as f32));
    let image = Array3::from_shape_fn((rows, cols, 3), |(r, c, ch)| match hits[(r, c)] {
        Some(h) => {
            let p = rig.center + rig.ray(c as f64, r as f64) * h.t;
            world.0[h.object].primitive.shade(&p, h.axis)[ch]
        }
        None => 0,
    });
    let surfaces = hits.mapv(|h| world.surface(h));
    Render {
        depth,
        image,
        surfaces,
        hits,
    }
}

/// splitmix64 finalizer folded over the inputs.
fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const KEY_SALT: u64 = 1;
const EMBED_SALT: u64 = 2;

struct FeatureSynth {
    seed: u64,
    max_angle: f64,
    bases: HashMap<(u64, u32, [u8; 3], usize), Vec<f64>>,
}

impl FeatureSynth {
    fn base(&mut self, salt: u64, surface: (u32, [u8; 3]), head: usize, dim: usize) -> Vec<f64> {
        let seed = self.seed;
        self.bases
            .entry((salt, surface.0, surface.1, head))
            .or_insert_with(|| {
                let [r, g, b] = surface.1.map(u64::from);
                let key = mix(&[seed, salt, surface.0 as u64, r, g, b, head as u64]);
                random_unit(&mut ChaCha8Rng::seed_from_u64(key), dim)
            })
            .clone()
    }

    /// Base direction rotated by a seeded angle of at most `max_angle`.
    fn perturbed(&mut self, salt: u64, surface: (u32, [u8; 3]), head: usize, dim: usize, pixel: [u64; 3]) -> Vec<f64> {
        let base = self.base(salt, surface, head, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, salt, pixel[0], pixel[1], pixel[2], head as u64]));
        let angle = rng.gen::<f64>() * self.max_angle;
        let w = random_unit(&mut rng, dim);
        let dot: f64 = w.iter().zip(&base).map(|(a, b)| a * b).sum();
        let ortho: Vec<f64> = w.iter().zip(&base).map(|(a, b)| a - dot * b).collect();
        let n = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            return base;
        }
        let (s, c) = angle.sin_cos();
        base.iter().zip(&ortho).map(|(b, o)| c * b + s * o / n).collect()
    }
}

fn synth_features(
    synth: &mut FeatureSynth,
    spec: &FeatureSpec,
    surfaces: &Array2<Option<(u32, [u8; 3])>>,
    view: u64,
) -> (Array4<f32>, Array3<f32>) {
    let (rows, cols) = surfaces.dim();
    let mut keys = Array4::zeros((spec.heads, rows, cols, spec.key_dim));
    let mut embed = Array3::zeros((rows, cols, spec.embed_dim));
    for ((r, c), s) in surfaces.indexed_iter() {
        let Some(s) = *s else { continue };
        let pixel = [view, r as u64, c as u64];
        for h in 0..spec.heads {
            let v = synth.perturbed(KEY_SALT, s, h, spec.key_dim, pixel);
            for (k, x) in v.into_iter().enumerate() {
                keys[(h, r, c, k)] = x as f32;
            }
        }
        let v = synth.perturbed(EMBED_SALT, s, 0, spec.embed_dim, pixel);
        for (k, x) in v.into_iter().enumerate() {
            embed[(r, c, k)] = x as f32;
        }
    }
    (keys, embed)
}

fn seg_masks(world: &World, hits: &Array2<Option<Hit>>) -> Vec<Array2<bool>> {
    let ids: BTreeSet<u32> = hits.iter().flatten().map(|h| world.0[h.object].id).collect();
    ids.into_iter()
        .map(|id| hits.mapv(|h| h.is_some_and(|h| world.0[h.object].id == id)))
        .collect()
}

/// Matrix entries rounded through f32, as stored in a bundle.
fn f32_exact<const R: usize, const C: usize>(
    m: &nalgebra::SMatrix<f64, R, C>,
) -> nalgebra::SMatrix<f64, R, C> {
    m.map(|x| x as f32 as f64)
}

fn worlds(spec: &SceneSpec) -> Result<[World; 2], SynthError> {
    for p in &spec.layout {
        p.check()?;
    }
    let before: Vec<Object> = spec
        .layout
        .iter()
        .enumerate()
        .map(|(i, p)| Object {
            id: i as u32,
            primitive: p.clone(),
        })
        .collect();
    let mut after: Vec<Option<Object>> = before.iter().cloned().map(Some).collect();
    let mut next_id = spec.layout.len() as u32;
    let mut inserted = Vec::new();
    for change in &spec.changes {
        match change {
            Change::Insert { primitive } => {
                primitive.check()?;
                inserted.push(Object {
                    id: next_id,
                    primitive: primitive.clone(),
                });
                next_id += 1;
            }
            Change::Remove { index } => {
                let slot = after.get_mut(*index).ok_or_else(|| {
                    SynthError::InvalidSpec(format!("remove index {index} out of range"))
                })?;
                *slot = None;
            }
            Change::Recolor { index, albedo } => {
                let slot = after.get_mut(*index).ok_or_else(|| {
                    SynthError::InvalidSpec(format!("recolor index {index} out of range"))
                })?;
                if let Some(o) = slot {
                    o.primitive.set_albedo(*albedo);
                }
            }
        }
    }
    let after = after.into_iter().flatten().chain(inserted).collect();
    Ok([World(before), World(after)])
}

/// Ray-casts both views and assembles the bundle and ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    let [rows, cols] = spec.resolution;
    if rows == 0 || cols == 0 {
        return Err(SynthError::InvalidSpec("resolution must be non-zero".into()));
    }
    let f = &spec.features;
    if f.heads == 0 || f.key_dim == 0 || f.embed_dim == 0 || !(0.0..90.0).contains(&f.noise_deg) {
        return Err(SynthError::InvalidSpec(format!("bad feature spec {f:?}")));
    }
    let worlds = worlds(spec)?;
    let rigs = [Rig::new(&spec.cam1, rows, cols)?, Rig::new(&spec.cam2, rows, cols)?];

    let mut synth = FeatureSynth {
        seed: spec.seed,
        max_angle: f.noise_deg.to_radians(),
        bases: HashMap::new(),
    };
    let mut views = Vec::with_capacity(2);
    let mut renders = Vec::with_capacity(2);
    for v in 0..2 {
        let r = render(&worlds[v], &rigs[v], rows, cols);
        if r.hits.iter().all(Option::is_none) {
            return Err(SynthError::NothingVisible { view: v + 1 });
        }
        let (keys, embed) = synth_features(&mut synth, f, &r.surfaces, v as u64 + 1);
        views.push(ViewData {
            image: r.image.clone(),
            depth: r.depth.clone(),
            intrinsics: f32_exact(&rigs[v].k),
            extrinsics: f32_exact(&rigs[v].extrinsics()),
            features: Some(keys),
            embed: Some(embed),
            seg_masks: Some(seg_masks(&worlds[v], &r.hits)),
        });
        renders.push(r);
    }
    let view_2 = views.pop().expect("two views");
    let view_1 = views.pop().expect("two views");

    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), "synthetic".to_string());
    meta.insert("seed".to_string(), spec.seed.to_string());
    meta.insert("layer".to_string(), DEFAULT_LAYER.to_string());
    if let Some(name) = &spec.name {
        meta.insert("scene".to_string(), name.clone());
    }
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        bundle: PairBundle {
            view_1,
            view_2,
            gt_mask: None,
            meta,
        },
        truth: GroundTruth {
            view_1: empty_truth(rows, cols),
            view_2: empty_truth(rows, cols),
        },
        worlds,
        rigs,
    };

    let mut truths = Vec::with_capacity(2);
    for (v, dir) in [Direction::OneToTwo, Direction::TwoToOne].into_iter().enumerate() {
        let overlap = oracle_overlap(&scene.bundle, dir)?;
        let other_world = &scene.worlds[1 - v];
        let rig = &scene.rigs[v];
        let surfaces = &renders[v].surfaces;
        let change = Array2::from_shape_fn((rows, cols), |(r, c)| {
            let seen_other = other_world.surface(other_world.cast(&rig.center, &rig.ray(c as f64, r as f64)));
            overlap[(r, c)] && seen_other != surfaces[(r, c)]
        });
        let occlusion = scene.occlusion_within(dir, &overlap);
        truths.push(ViewTruth {
            change,
            occlusion,
            overlap,
        });
    }
    scene.truth.view_2 = truths.pop().expect("two views");
    scene.truth.view_1 = truths.pop().expect("two views");
    scene.bundle.gt_mask = Some(scene.truth.view_1.change.clone());
    Ok(scene)
}

fn empty_truth(rows: usize, cols: usize) -> ViewTruth {
    let none = Array2::from_elem((rows, cols), false);
    ViewTruth {
        change: none.clone(),
        occlusion: none.clone(),
        overlap: none,
    }
}

/// Overlap by explicit back-projection to world coordinates and membership
/// test in the other camera's image domain.
pub fn oracle_overlap(bundle: &PairBundle, dir: Direction) -> Result<Array2<bool>, GeometryError> {
    let (s, d) = dir.indices();
    let views = [&bundle.view_1, &bundle.view_2];
    let (src, dst) = (views[s], views[d]);
    let k_inv = src
        .intrinsics
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidIntrinsics("singular intrinsics".into()))?;
    let cam_to_world = src
        .extrinsics
        .try_inverse()
        .ok_or(GeometryError::DegeneratePose("singular extrinsics".into()))?;
    let (w, h) = (dst.width() as f64, dst.height() as f64);
    Ok(Array2::from_shape_fn(src.depth.dim(), |(r, c)| {
        let depth = src.depth[(r, c)] as f64;
        if !(depth > 0.0) {
            return false;
        }
        let ray = k_inv * Vector3::new(c as f64, r as f64, 1.0) * depth;
        let world = cam_to_world * Vector4::new(ray.x, ray.y, ray.z, 1.0);
        let x = dst.extrinsics * world;
        let z = x.z / x.w;
        if !(z > BEHIND_CAMERA_EPS) {
            return false;
        }
        let p = dst.intrinsics * Vector3::new(x.x, x.y, x.z);
        let (u, v) = (p.x / p.z, p.y / p.z);
        let t = DOMAIN_TOLERANCE;
        (-t..=w - 1.0 + t).contains(&u) && (-t..=h - 1.0 + t).contains(&v)
    }))
}

impl SyntheticScene {
    /// Occlusion by exhaustive surface intersection along the ray from the
    /// other camera to each visible point, with a fixed depth slack.
    pub fn oracle_occlusion(&self, dir: Direction) -> Result<Array2<bool>, GeometryError> {
        let overlap = oracle_overlap(&self.bundle, dir)?;
        Ok(self.occlusion_within(dir, &overlap))
    }

    fn occlusion_within(&self, dir: Direction, overlap: &Array2<bool>) -> Array2<bool> {
        let (s, d) = dir.indices();
        let (src_rig, dst_rig) = (&self.rigs[s], &self.rigs[d]);
        let (src_world, dst_world) = (&self.worlds[s], &self.worlds[d]);
        Array2::from_shape_fn(overlap.dim(), |(r, c)| {
            if !overlap[(r, c)] {
                return false;
            }
            let ray = src_rig.ray(c as f64, r as f64);
            let Some(hit) = src_world.cast(&src_rig.center, &ray) else {
                return false;
            };
            let x = src_rig.center + ray * hit.t;
            let to_x = x - dst_rig.center;
            let depth = dst_rig.depth_of(&x);
            dst_world
                .cast(&dst_rig.center, &to_x)
                .is_some_and(|h| (1.0 - h.t) * depth > ORACLE_SLACK)
        })
    }

    /// Writes the bundle plus ground-truth masks into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf, SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = crate::bundle::write_bundle(&self.bundle, dir)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        for (suffix, t) in [("1", &self.truth.view_1), ("2", &self.truth.view_2)] {
            for (name, mask) in [("change", &t.change), ("occlusion", &t.occlusion), ("overlap", &t.overlap)] {
                write_tensor(&Tensor::from_array(mask)?, dir.join(format!("gt_{name}_{suffix}.npy")))?;
            }
        }
        Ok(manifest)
    }
}

/// Pixels within `radius` (Chebyshev) of a depth discontinuity: a 4-neighbour
/// jump above `rel_jump` of the smaller depth, or a valid/invalid boundary.
pub fn discontinuity_band(depth: &Array2<f32>, radius: usize, rel_jump: f32) -> Array2<bool> {
    let (rows, cols) = depth.dim();
    let jump = |a: f32, b: f32| {
        if (a > 0.0) != (b > 0.0) {
            return true;
        }
        a > 0.0 && (a - b).abs() > rel_jump * a.min(b)
    };
    let mut edge = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            let d = depth[(r, c)];
            if (c + 1 < cols && jump(d, depth[(r, c + 1)])) || (r + 1 < rows && jump(d, depth[(r + 1, c)])) {
                edge[(r, c)] = true;
                if c + 1 < cols && jump(d, depth[(r, c + 1)]) {
                    edge[(r, c + 1)] = true;
                }
                if r + 1 < rows && jump(d, depth[(r + 1, c)]) {
                    edge[(r + 1, c)] = true;
                }
            }
        }
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(rows - 1));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(cols - 1));
        (r0..=r1).any(|rr| (c0..=c1).any(|cc| edge[(rr, cc)]))
    })
}

const RESOLUTION: [usize; 2] = [96, 128];
const FOCAL: f64 = 110.0;

fn wall(z: f64, rng: &mut ChaCha8Rng) -> Primitive {
    Primitive::Rect {
        center: [0.0, 0.0, z],
        normal: Axis::Z,
        half_extents: [60.0, 60.0],
        albedo: [rng.gen_range(150..200), rng.gen_range(150..200), rng.gen_range(140..190)],
        checker: Some(rng.gen_range(0.4..0.7)),
    }
}

fn camera(position: [f64; 3], yaw_deg: f64) -> CameraSpec {
    CameraSpec {
        focal: FOCAL,
        position,
        yaw_deg,
        pitch_deg: 0.0,
        roll_deg: 0.0,
    }
}

fn inside_margin(rig: &Rig, corners: &[Vector3<f64>], margin: f64) -> bool {
    let [rows, cols] = RESOLUTION;
    let t = rig.orientation.transpose();
    corners.iter().all(|x| {
        let p = t * (x - rig.center);
        if p.z <= 0.1 {
            return false;
        }
        let h = rig.k * p;
        let (u, v) = (h.x / h.z, h.y / h.z);
        u >= margin && v >= margin && u <= cols as f64 - 1.0 - margin && v <= rows as f64 - 1.0 - margin
    })
}

fn box_corners(min: [f64; 3], max: [f64; 3]) -> Vec<Vector3<f64>> {
    (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            )
        })
        .collect()
}

/// Kind of edit in a randomized detection scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    None,
    Recolor,
    Insert,
}

impl SceneSpec {
    /// A textured wall with a floating box, viewed under a random rigid
    /// motion with yaw up to 30° and translation up to 20% of wall depth.
    pub fn plane_and_box(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x504C]));
        let z = rng.gen_range(5.0..7.0);
        let (bx, by) = (rng.gen_range(-0.8..0.4), rng.gen_range(-0.6..0.2));
        let (bw, bh) = (rng.gen_range(0.8..1.4), rng.gen_range(0.6..1.2));
        let front = z - rng.gen_range(1.5..2.8);
        let depth = rng.gen_range(0.3..1.0);
        let yaw: f64 = rng.gen_range(-30.0..30.0);
        let magnitude = rng.gen_range(0.0..0.2) * z;
        let heading = rng.gen_range(-1.0f64..1.0);
        // Move against the yaw so the box stays near the middle of view 2.
        let tx = -yaw.signum() * magnitude * heading.abs().max(0.5);
        let rest = (magnitude * magnitude - tx * tx).max(0.0).sqrt();
        let (ty, tz) = (rest * heading.signum() * 0.5, rest * 0.8);
        let mut cam2 = camera([tx, ty, tz], yaw);
        cam2.pitch_deg = rng.gen_range(-8.0..8.0);
        cam2.roll_deg = rng.gen_range(-5.0..5.0);
        SceneSpec {
            name: Some(format!("plane_and_box_{seed}")),
            resolution: RESOLUTION,
            seed,
            layout: vec![
                wall(z, &mut rng),
                Primitive::Cuboid {
                    min: [bx, by, front],
                    max: [bx + bw, by + bh, front + depth],
                    albedo: [rng.gen_range(20..90), rng.gen_range(60..140), rng.gen_range(120..220)],
                    checker: Some(0.25),
                },
            ],
            cam1: camera([0.0, 0.0, 0.0], 0.0),
            cam2,
            changes: vec![],
            features: FeatureSpec::default(),
        }
    }

    /// Wall, box on the left, poster on the right and a small camera motion
    /// keeping the poster region inside both views. The edit targets the
    /// poster region.
    pub fn detection(seed: u64, kind: EditKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x4445, kind as u64]));
        loop {
            let z = rng.gen_range(5.5..6.5);
            let front = z - rng.gen_range(1.6..2.2);
            let box_min = [rng.gen_range(-1.8..-1.5), rng.gen_range(-0.7..-0.4), front];
            let box_max = [box_min[0] + rng.gen_range(0.8..1.0), rng.gen_range(0.4..0.7), front + 0.8];
            let (px, py) = (rng.gen_range(0.9..1.3), rng.gen_range(-0.2..0.2));
            let (hw, hh) = (rng.gen_range(0.8..0.95), rng.gen_range(0.7..0.85));
            let target_min = [px - hw, py - hh, z - 0.1];
            let target_max = [px + hw, py + hh, z - 0.001];
            let yaw: f64 = rng.gen_range(-8.0..8.0);
            let tx = -yaw.to_radians() * z * rng.gen_range(0.2..0.6);
            let cam2 = camera([tx, rng.gen_range(-0.15..0.15), rng.gen_range(-0.3..0.3)], yaw);

            let rigs = [
                Rig::new(&camera([0.0; 3], 0.0), RESOLUTION[0], RESOLUTION[1]).expect("valid camera"),
                Rig::new(&cam2, RESOLUTION[0], RESOLUTION[1]).expect("valid camera"),
            ];
            let region = box_corners(target_min, target_max);
            if !rigs.iter().all(|r| inside_margin(r, &region, 4.0)) {
                continue;
            }

            let poster_albedo = [rng.gen_range(180..250), rng.gen_range(40..100), rng.gen_range(30..80)];
            let mut layout = vec![
                wall(z, &mut rng),
                Primitive::Cuboid {
                    min: box_min,
                    max: box_max,
                    albedo: [40, 90, 160],
                    checker: Some(0.25),
                },
            ];
            let mut changes = vec![];
            match kind {
                EditKind::None | EditKind::Recolor => {
                    layout.push(Primitive::Rect {
                        center: [px, py, z - 0.001],
                        normal: Axis::Z,
                        half_extents: [hw, hh],
                        albedo: poster_albedo,
                        checker: None,
                    });
                    if kind == EditKind::Recolor {
                        changes.push(Change::Recolor {
                            index: 2,
                            albedo: [poster_albedo[2], poster_albedo[0], poster_albedo[1]],
                        });
                    }
                }
                EditKind::Insert => changes.push(Change::Insert {
                    primitive: Primitive::Cuboid {
                        min: target_min,
                        max: target_max,
                        albedo: poster_albedo,
                        checker: Some(0.3),
                    },
                }),
            }
            return SceneSpec {
                name: Some(format!("detection_{kind:?}_{seed}").to_lowercase()),
                resolution: RESOLUTION,
                seed,
                layout,
                cam1: camera([0.0; 3], 0.0),
                cam2,
                changes,
                features: FeatureSpec::default(),
            };
        }
    }

    /// No changes; a poster on the wall that camera 1 sees beside a box and
    /// camera 2, shifted sideways, sees hidden behind it.
    pub fn occlusion_probe(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x4F43]));
        let z = rng.gen_range(5.5..6.5);
        let front = z - rng.gen_range(1.8..2.4);
        let back = front + rng.gen_range(0.4..0.8);
        let x0 = rng.gen_range(-0.6..-0.2);
        let width = rng.gen_range(0.9..1.3);
        let half_height = rng.gen_range(0.6..0.9);
        let tx = rng.gen_range(0.8..1.1);

        // Left edge of the box's shadow on the wall for each camera.
        let scale = z / front;
        let left_1 = x0 * scale;
        let shift = tx * (scale - 1.0);
        let gap = 0.03;
        let poster_width = (shift - gap) * rng.gen_range(0.75..0.95);
        let poster_right = left_1 - gap;
        let poster_half_height = 0.8 * half_height * scale;

        SceneSpec {
            name: Some(format!("occlusion_probe_{seed}")),
            resolution: RESOLUTION,
            seed,
            layout: vec![
                wall(z, &mut rng),
                Primitive::Cuboid {
                    min: [x0, -half_height, front],
                    max: [x0 + width, half_height, back],
                    albedo: [40, 90, 160],
                    checker: Some(0.25),
                },
                Primitive::Rect {
                    center: [poster_right - poster_width / 2.0, 0.0, z - 0.001],
                    normal: Axis::Z,
                    half_extents: [poster_width / 2.0, poster_half_height],
                    albedo: [220, 60, 50],
                    checker: None,
                },
            ],
            cam1: camera([0.0; 3], 0.0),
            cam2: camera([tx, 0.0, 0.0], -rng.gen_range(0.0..4.0)),
            changes: vec![],
            features: FeatureSpec::default(),
        }
    }
}
