//! Synthetic multi-view keypoint benchmark with a controllable domain gap.
//!
//! Objects are parameterized chairs with ten keypoints (four leg bottoms,
//! four seat corners, two back-top corners). Each object is observed from
//! several camera rotations; an observation is an ordered cloud of surface
//! points sampled along the chair's edges and seat, flattened into the
//! predictor input. Source data is clean. Target data draws sub-types with a
//! different mixture and corrupts the observed points with scale jitter,
//! noise, background clutter and self-occlusion. Ground-truth keypoints are
//! never corrupted.

use std::path::Path;

use nalgebra::{Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{super_fibonacci_rotations, KeypointConfig, Rotation};
use crate::io;

pub const CHAIR_KEYPOINTS: usize = 10;

/// SplitMix64 finalizer, used to derive independent per-item seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, t| mix(acc ^ mix(*t)))
}

/// Style parameters of one chair, in object units (metres, roughly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairParams {
    pub seat_width: f64,
    pub seat_depth: f64,
    pub leg_height: f64,
    pub back_height: f64,
    /// Backwards offset of the back-top edge.
    pub back_tilt: f64,
    /// Relative outward offset of the leg bottoms.
    pub leg_splay: f64,
}

impl ChairParams {
    /// Width, depth, leg and back heights of 1; no tilt or splay.
    pub fn unit_cube() -> Self {
        Self {
            seat_width: 1.0,
            seat_depth: 1.0,
            leg_height: 1.0,
            back_height: 1.0,
            back_tilt: 0.0,
            leg_splay: 0.0,
        }
    }
}

/// Closed interval `[lo, hi]`.
pub type Range = [f64; 2];

/// Parameter ranges of one chair sub-type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtype {
    pub name: String,
    pub seat_width: Range,
    pub seat_depth: Range,
    pub leg_height: Range,
    pub back_height: Range,
    pub back_tilt: Range,
    pub leg_splay: Range,
}

impl Subtype {
    fn sample<R: Rng>(&self, rng: &mut R) -> ChairParams {
        let mut u = |r: Range| {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        ChairParams {
            seat_width: u(self.seat_width),
            seat_depth: u(self.seat_depth),
            leg_height: u(self.leg_height),
            back_height: u(self.back_height),
            back_tilt: u(self.back_tilt),
            leg_splay: u(self.leg_splay),
        }
    }
}

/// Chair template: sub-types, per-domain mixtures, and surface sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub name: String,
    pub subtypes: Vec<Subtype>,
    pub source_mixture: Vec<f64>,
    pub target_mixture: Vec<f64>,
    /// Number of surface points `S` per observation.
    pub surface_points: usize,
}

impl Default for ShapeTemplate {
    fn default() -> Self {
        Self::chair()
    }
}

impl ShapeTemplate {
    /// Dining, bar and lounge chairs; the source favours dining chairs and the
    /// target favours lounge chairs.
    pub fn chair() -> Self {
        let subtypes = vec![
            Subtype {
                name: "dining".into(),
                seat_width: [0.40, 0.50],
                seat_depth: [0.40, 0.48],
                leg_height: [0.42, 0.48],
                back_height: [0.40, 0.50],
                back_tilt: [0.00, 0.06],
                leg_splay: [0.00, 0.05],
            },
            Subtype {
                name: "bar".into(),
                seat_width: [0.34, 0.42],
                seat_depth: [0.34, 0.40],
                leg_height: [0.65, 0.78],
                back_height: [0.15, 0.25],
                back_tilt: [0.00, 0.03],
                leg_splay: [0.06, 0.15],
            },
            Subtype {
                name: "lounge".into(),
                seat_width: [0.55, 0.70],
                seat_depth: [0.55, 0.65],
                leg_height: [0.22, 0.32],
                back_height: [0.35, 0.50],
                back_tilt: [0.10, 0.20],
                leg_splay: [0.00, 0.05],
            },
        ];
        Self {
            name: "chair".into(),
            subtypes,
            source_mixture: vec![0.5, 0.3, 0.2],
            target_mixture: vec![0.1, 0.3, 0.6],
            surface_points: 96,
        }
    }

    pub fn keypoints(&self) -> usize {
        CHAIR_KEYPOINTS
    }

    pub fn input_dim(&self) -> usize {
        3 * self.surface_points
    }

    pub fn validate(&self) -> Result<()> {
        if self.subtypes.is_empty() {
            return Err(Error::invalid("template has no sub-types"));
        }
        for (what, mix) in [("source", &self.source_mixture), ("target", &self.target_mixture)] {
            if mix.len() != self.subtypes.len() {
                return Err(Error::invalid(format!(
                    "{what} mixture has {} weights for {} sub-types",
                    mix.len(),
                    self.subtypes.len()
                )));
            }
            if mix.iter().any(|w| !(*w >= 0.0)) || mix.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!("{what} mixture weights are invalid")));
            }
        }
        if self.surface_points < SURFACE_LAYOUT_MIN {
            return Err(Error::invalid(format!(
                "at least {SURFACE_LAYOUT_MIN} surface points are required"
            )));
        }
        Ok(())
    }

    /// Raw (uncentered) keypoints: four leg bottoms, four seat corners
    /// (front-left, front-right, back-right, back-left) and the two back-top
    /// corners. `y` points up and the back sits at negative `z`.
    pub fn skeleton(&self, p: &ChairParams) -> Matrix3xX<f64> {
        let (hw, hd) = (p.seat_width / 2.0, p.seat_depth / 2.0);
        let (lw, ld) = (hw * (1.0 + p.leg_splay), hd * (1.0 + p.leg_splay));
        let h = p.leg_height;
        let top = h + p.back_height;
        let back = -hd - p.back_tilt;
        let columns = [
            [-lw, 0.0, ld],
            [lw, 0.0, ld],
            [lw, 0.0, -ld],
            [-lw, 0.0, -ld],
            [-hw, h, hd],
            [hw, h, hd],
            [hw, h, -hd],
            [-hw, h, -hd],
            [hw, top, back],
            [-hw, top, back],
        ];
        Matrix3xX::from_iterator(CHAIR_KEYPOINTS, columns.into_iter().flatten())
    }

    /// Fixed `d × S` mixing matrix: surface point `k` is `K·B[:, k]`.
    pub fn surface_weights(&self) -> nalgebra::DMatrix<f64> {
        surface_weights(self.surface_points)
    }
}

const SURFACE_LAYOUT_MIN: usize = 24;

/// Edges of the chair skeleton as keypoint index pairs.
const EDGES: [(usize, usize); 11] = [
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (7, 9),
    (6, 8),
    (8, 9),
];

/// Points are spread over the 11 edges and a seat-interior grid; every point
/// is a convex combination of keypoints.
fn surface_weights(s: usize) -> nalgebra::DMatrix<f64> {
    let mut b = nalgebra::DMatrix::zeros(CHAIR_KEYPOINTS, s);
    let interior = s / 5;
    let on_edges = s - interior;
    let mut k = 0;
    for (e, &(a, c)) in EDGES.iter().enumerate() {
        let count = on_edges / EDGES.len() + usize::from(e < on_edges % EDGES.len());
        for q in 0..count {
            let t = (q as f64 + 0.5) / count as f64;
            b[(a, k)] = 1.0 - t;
            b[(c, k)] = t;
            k += 1;
        }
    }
    // seat interior: bilinear over seat corners 4..8
    let side = (interior as f64).sqrt().ceil() as usize;
    for q in 0..interior {
        let u = ((q % side) as f64 + 0.5) / side as f64;
        let v = ((q / side) as f64 + 0.5) / (interior.div_ceil(side)) as f64;
        b[(4, k)] = (1.0 - u) * (1.0 - v);
        b[(5, k)] = u * (1.0 - v);
        b[(6, k)] = u * v;
        b[(7, k)] = (1.0 - u) * v;
        k += 1;
    }
    debug_assert_eq!(k, s);
    b
}

/// Corruption applied to target observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShiftConfig {
    /// Per-coordinate Gaussian jitter, in units of the bounding-box diagonal.
    pub noise_std: f64,
    /// Fraction of surface points lost to self-occlusion (the farthest from
    /// the camera), replaced by the sentinel 0.
    pub dropout_rate: f64,
    /// Surface points overwritten by random background points.
    pub clutter_count: usize,
    /// Per-view multiplicative scale error drawn from `[1 − j, 1 + j]`.
    pub scale_jitter: f64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.01,
            dropout_rate: 0.1,
            clutter_count: 12,
            scale_jitter: 0.1,
        }
    }
}

impl DomainShiftConfig {
    pub fn none() -> Self {
        Self {
            noise_std: 0.0,
            dropout_rate: 0.0,
            clutter_count: 0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::invalid("scale_jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    fn is_none(&self) -> bool {
        self.noise_std == 0.0
            && self.dropout_rate == 0.0
            && self.clutter_count == 0
            && self.scale_jitter == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Holdout,
    Target,
}

/// One observation of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    pub domain: Domain,
    pub object_id: usize,
    pub view_id: usize,
    pub subtype: usize,
    /// Flattened camera-frame surface points `[x₀ y₀ z₀ x₁ …]`.
    pub input: Vec<f64>,
    /// Camera-frame keypoints.
    #[serde(with = "config_serde")]
    pub gt: KeypointConfig,
    /// Bounding-box diagonal of `gt`.
    pub diagonal: f64,
    /// Diagnostic only; training never reads it.
    pub camera_rotation: Rotation,
}

mod config_serde {
    use super::KeypointConfig;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &KeypointConfig, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(c.coords().iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<KeypointConfig, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        if data.len() % 3 != 0 {
            return Err(serde::de::Error::custom("keypoint data length is not a multiple of 3"));
        }
        KeypointConfig::new(nalgebra::Matrix3xX::from_column_slice(&data))
            .map_err(serde::de::Error::custom)
    }
}

/// All views of one target object.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub object_id: usize,
    pub views: Vec<ViewSample>,
}

/// Canonical (object-frame) keypoints and surface points of one object.
struct ObjectGeometry {
    subtype: usize,
    keypoints: Matrix3xX<f64>,
    surface: Matrix3xX<f64>,
    base_rotation: Rotation,
}

fn sample_object(template: &ShapeTemplate, mixture: &[f64], seed: u64) -> Result<ObjectGeometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(mixture)
        .map_err(|e| Error::invalid(format!("bad sub-type mixture: {e}")))?;
    let subtype = picker.sample(&mut rng);
    let params = template.subtypes[subtype].sample(&mut rng);
    let keypoints = KeypointConfig::center_unchecked(template.skeleton(&params)).into_coords();
    let surface = &keypoints * template.surface_weights();
    let base_rotation = Rotation::random(&mut rng);
    Ok(ObjectGeometry {
        subtype,
        keypoints,
        surface,
        base_rotation,
    })
}

fn flatten_centered(points: &Matrix3xX<f64>, observed: &[bool]) -> Vec<f64> {
    let count = observed.iter().filter(|o| **o).count();
    let mut centroid = Vector3::zeros();
    if count > 0 {
        for (col, _) in points.column_iter().zip(observed).filter(|(_, o)| **o) {
            centroid += col;
        }
        centroid /= count as f64;
    }
    let mut out = Vec::with_capacity(points.len());
    for (col, o) in points.column_iter().zip(observed) {
        if *o {
            out.extend((col - centroid).iter());
        } else {
            out.extend([0.0; 3]);
        }
    }
    out
}

fn corrupt(
    points: &mut Matrix3xX<f64>,
    diagonal: f64,
    shift: &DomainShiftConfig,
    seed: u64,
) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = points.ncols();
    if shift.scale_jitter > 0.0 {
        let factor = rng.random_range(1.0 - shift.scale_jitter..=1.0 + shift.scale_jitter);
        *points *= factor;
    }
    if shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, shift.noise_std * diagonal).expect("finite std");
        points.apply(|v| *v += normal.sample(&mut rng));
    }
    let clutter = shift.clutter_count.min(s);
    if clutter > 0 {
        let slots = rand::seq::index::sample(&mut rng, s, clutter);
        for k in slots {
            let p = Vector3::from_fn(|_, _| rng.random_range(-0.6..=0.6) * diagonal);
            points.set_column(k, &p);
        }
    }
    let mut observed = vec![true; s];
    let dropped = (shift.dropout_rate * s as f64).round() as usize;
    if dropped > 0 {
        // farthest from the camera (largest z) first
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| points[(2, b)].total_cmp(&points[(2, a)]).then(a.cmp(&b)));
        for &k in order.iter().take(dropped) {
            observed[k] = false;
        }
    }
    observed
}

fn generate(
    template: &ShapeTemplate,
    domain: Domain,
    n_models: usize,
    views_per_model: usize,
    shift: &DomainShiftConfig,
    seed: u64,
) -> Result<Vec<Vec<ViewSample>>> {
    template.validate()?;
    shift.validate()?;
    if n_models == 0 || views_per_model == 0 {
        return Err(Error::invalid("at least one model and one view are required"));
    }
    let mixture = match domain {
        Domain::Source | Domain::Holdout => &template.source_mixture,
        Domain::Target => &template.target_mixture,
    };
    let view_rotations = super_fibonacci_rotations(views_per_model);
    (0..n_models)
        .map(|object_id| {
            let object = sample_object(template, mixture, derive_seed(seed, &[object_id as u64]))?;
            Ok(view_rotations
                .iter()
                .enumerate()
                .map(|(view_id, offset)| {
                    let camera_rotation = offset.compose(&object.base_rotation);
                    let gt = KeypointConfig::center_unchecked(
                        camera_rotation.matrix() * &object.keypoints,
                    );
                    let diagonal = gt.bbox_diagonal();
                    let mut points = camera_rotation.matrix() * &object.surface;
                    let observed = if shift.is_none() {
                        vec![true; points.ncols()]
                    } else {
                        let view_seed =
                            derive_seed(seed, &[object_id as u64, 0xC0FFEE, view_id as u64]);
                        corrupt(&mut points, diagonal, shift, view_seed)
                    };
                    ViewSample {
                        domain,
                        object_id,
                        view_id,
                        subtype: object.subtype,
                        input: flatten_centered(&points, &observed),
                        gt,
                        diagonal,
                        camera_rotation,
                    }
                })
                .collect())
        })
        .collect()
}

/// Clean labeled views drawn from the source mixture.
pub fn generate_source(
    template: &ShapeTemplate,
    n_models: usize,
    views_per_model: usize,
    seed: u64,
) -> Result<Vec<ViewSample>> {
    let per_object = generate(
        template,
        Domain::Source,
        n_models,
        views_per_model,
        &DomainShiftConfig::none(),
        seed,
    )?;
    Ok(per_object.into_iter().flatten().collect())
}

/// Corrupted multi-view objects drawn from the target mixture.
pub fn generate_target(
    template: &ShapeTemplate,
    n_models: usize,
    views_per_model: usize,
    shift: &DomainShiftConfig,
    seed: u64,
) -> Result<Vec<ViewSet>> {
    let per_object = generate(template, Domain::Target, n_models, views_per_model, shift, seed)?;
    Ok(per_object
        .into_iter()
        .enumerate()
        .map(|(object_id, views)| ViewSet { object_id, views })
        .collect())
}

/// Complete benchmark description, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub template: ShapeTemplate,
    pub source_models: usize,
    pub source_views: usize,
    /// Clean source-distribution models held out from training.
    pub holdout_models: usize,
    pub target_models: usize,
    pub target_views: usize,
    pub shift: DomainShiftConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            template: ShapeTemplate::chair(),
            source_models: 200,
            source_views: 1,
            holdout_models: 50,
            target_models: 40,
            target_views: 12,
            shift: DomainShiftConfig::default(),
        }
    }
}

/// Generated source, held-out source and target splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: Vec<ViewSample>,
    pub holdout: Vec<ViewSample>,
    pub target: Vec<ViewSet>,
}

impl Benchmark {
    /// Each split uses its own seed derived from `seed`.
    pub fn generate(cfg: &BenchConfig, seed: u64) -> Result<Self> {
        let source = generate_source(
            &cfg.template,
            cfg.source_models,
            cfg.source_views,
            derive_seed(seed, &[1]),
        )?;
        let holdout = generate(
            &cfg.template,
            Domain::Holdout,
            cfg.holdout_models.max(1),
            1,
            &DomainShiftConfig::none(),
            derive_seed(seed, &[2]),
        )?
        .into_iter()
        .flatten()
        .collect();
        let target = generate_target(
            &cfg.template,
            cfg.target_models,
            cfg.target_views,
            &cfg.shift,
            derive_seed(seed, &[3]),
        )?;
        Ok(Self {
            source,
            holdout,
            target,
        })
    }

    pub fn target_views(&self) -> Vec<ViewSample> {
        self.target.iter().flat_map(|s| s.views.iter().cloned()).collect()
    }

    pub fn write(&self, dir: &Path, cfg: &BenchConfig, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_jsonl(&dir.join(SOURCE_FILE), &self.source)?;
        io::write_jsonl(&dir.join(HOLDOUT_FILE), &self.holdout)?;
        io::write_jsonl(&dir.join(TARGET_FILE), &self.target_views())?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: DATASET_VERSION,
            template: cfg.template.name.clone(),
            seed,
            config: cfg.clone(),
            files: [SOURCE_FILE, HOLDOUT_FILE, TARGET_FILE]
                .map(String::from)
                .to_vec(),
        };
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn read(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = io::read_json(&manifest_path)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::format(
                manifest_path,
                format!("unsupported dataset {} v{}", manifest.format, manifest.version),
            ));
        }
        let source: Vec<ViewSample> = io::read_jsonl(&dir.join(SOURCE_FILE))?;
        let holdout: Vec<ViewSample> = io::read_jsonl(&dir.join(HOLDOUT_FILE))?;
        let views: Vec<ViewSample> = io::read_jsonl(&dir.join(TARGET_FILE))?;
        let target = group_views(views).map_err(|e| Error::format(dir.join(TARGET_FILE), e))?;
        Ok((
            Self {
                source,
                holdout,
                target,
            },
            manifest,
        ))
    }
}

/// Groups views by object id; objects must be listed contiguously from 0.
pub fn group_views(views: Vec<ViewSample>) -> Result<Vec<ViewSet>> {
    let mut sets: Vec<ViewSet> = Vec::new();
    for v in views {
        match sets.last_mut() {
            Some(set) if set.object_id == v.object_id => set.views.push(v),
            _ => {
                if v.object_id != sets.len() {
                    return Err(Error::invalid(format!(
                        "object ids must be contiguous from 0, found {} after {}",
                        v.object_id,
                        sets.len()
                    )));
                }
                sets.push(ViewSet {
                    object_id: v.object_id,
                    views: vec![v],
                });
            }
        }
    }
    Ok(sets)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SOURCE_FILE: &str = "source.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
pub const TARGET_FILE: &str = "target.jsonl";
const MANIFEST_FORMAT: &str = "viewconsist-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub template: String,
    pub seed: u64,
    pub config: BenchConfig,
    pub files: Vec<String>,
}
