//! Calibrated synthetic multi-view datasets rendered by analytic ray casting.
//!
//! A scene is one parametric primitive with procedural albedo, observed by a
//! ring of inward-looking cameras (a turntable rig). Defects are either albedo
//! blotches or smooth displacements of the surface along its normal; the
//! ground-truth mask marks pixels whose first hit lies within the defect radius.

mod shape;
mod texture;

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{add, dot, norm, normalize, scale, sub, CameraError, CameraModel, Vec3};
use crate::dataset::{io_err, save_viewset, write_json, DataError, Label, ViewObservation, ViewSet};

pub use shape::Shape;
pub use texture::{fractal_noise, value_noise};

const LIGHT_DIR: Vec3 = [0.35, 0.25, 0.9];
const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;
const WORLD_UP: Vec3 = [0.0, 0.0, 1.0];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid defect: {0}")]
    InvalidDefect(String),
    #[error("view index {index} outside 1..={views}")]
    ViewIndex { index: usize, views: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("could not place a visible defect after {0} attempts")]
    DefectNotVisible(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub seed: u64,
    /// Spatial frequency of the albedo noise, cycles per world unit.
    pub frequency: f64,
    /// Peak-to-peak albedo variation of the base texture.
    pub contrast: f64,
    /// Seed of the low-amplitude per-sample detail layer.
    pub detail_seed: u64,
    pub detail_amplitude: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            frequency: 3.0,
            contrast: 0.6,
            detail_seed: 0,
            detail_amplitude: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub views: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub texture: TextureSpec,
    pub ring: RingSpec,
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Unit sphere at the origin seen by `views` cameras on a ring of radius 3.
    pub fn sphere(views: usize, resolution: usize) -> Self {
        Self {
            shape: Shape::Sphere { radius: 1.0 },
            texture: TextureSpec::default(),
            ring: RingSpec {
                views,
                radius: 3.0,
                height: 0.0,
                look_at: [0.0; 3],
            },
            height: resolution,
            width: resolution,
            fov_deg: 45.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !self.shape.is_valid() {
            return Err(SynthError::InvalidScene(format!("bad shape size {:?}", self.shape)));
        }
        if self.ring.views < 3 {
            return Err(SynthError::InvalidScene("need at least 3 views".into()));
        }
        let eye_dist = (self.ring.radius.powi(2) + self.ring.height.powi(2)).sqrt();
        if !(self.ring.radius > self.shape.bounding_radius()) || eye_dist <= self.shape.bounding_radius()
        {
            return Err(SynthError::InvalidScene(format!(
                "ring radius {} must exceed the shape's bounding radius {}",
                self.ring.radius,
                self.shape.bounding_radius()
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(SynthError::InvalidScene("resolution too small".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 179.0) {
            return Err(SynthError::InvalidScene(format!("fov {} out of range", self.fov_deg)));
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Camera of 1-based view `index` on the ring.
    pub fn camera(&self, index: usize) -> Result<CameraModel, SynthError> {
        if index == 0 || index > self.ring.views {
            return Err(SynthError::ViewIndex {
                index,
                views: self.ring.views,
            });
        }
        let theta = std::f64::consts::TAU * (index - 1) as f64 / self.ring.views as f64;
        let eye = [
            self.ring.radius * theta.cos(),
            self.ring.radius * theta.sin(),
            self.ring.height,
        ];
        let f = self.focal_px();
        Ok(CameraModel::look_at(
            f,
            f,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            eye,
            self.ring.look_at,
            WORLD_UP,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    TextureBlotch,
    GeometricDent,
    GeometricBump,
}

impl DefectKind {
    pub fn is_geometric(self) -> bool {
        !matches!(self, DefectKind::TextureBlotch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Surface point hit by the ray from the object center along these angles.
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    /// Albedo delta for blotches; displacement (world units) for dents and bumps.
    pub magnitude: f64,
    pub seed: u64,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.radius > 0.0) {
            return Err(SynthError::InvalidDefect("radius must be positive".into()));
        }
        if self.magnitude == 0.0 || !self.magnitude.is_finite() {
            return Err(SynthError::InvalidDefect("magnitude must be nonzero".into()));
        }
        Ok(())
    }
}

/// First surface hit of one ray.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub in_defect: bool,
}

/// A scene with an optional defect resolved to world coordinates.
struct Resolved<'a> {
    scene: &'a SceneSpec,
    defect: Option<(&'a DefectSpec, Vec3)>,
}

impl<'a> Resolved<'a> {
    fn new(scene: &'a SceneSpec, defect: Option<&'a DefectSpec>) -> Self {
        let defect = defect.map(|d| (d, scene.shape.surface_point(d.azimuth_deg, d.elevation_deg)));
        Self { scene, defect }
    }

    /// Signed displacement along the outward normal.
    fn displacement(&self, p: Vec3) -> f64 {
        match self.defect {
            Some((d, c)) if d.kind.is_geometric() => {
                let s = norm(sub(p, c)) / d.radius;
                if s >= 1.0 {
                    return 0.0;
                }
                let amp = match d.kind {
                    DefectKind::GeometricBump => d.magnitude.abs(),
                    _ => -d.magnitude.abs(),
                };
                amp * (1.0 - s * s).powi(2)
            }
            _ => 0.0,
        }
    }

    fn implicit(&self, p: Vec3) -> f64 {
        self.scene.shape.sdf(p) - self.displacement(p)
    }

    fn implicit_normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let g = |k: usize| {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            (self.implicit(a) - self.implicit(b)) / (2.0 * h)
        };
        normalize([g(0), g(1), g(2)])
    }

    fn cast(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let shape = &self.scene.shape;
        let base = shape.intersect(origin, dir, shape::HIT_EPS);
        let hit_at = |t: f64, displaced: bool| {
            let point = add(origin, scale(dir, t));
            let normal = if displaced {
                self.implicit_normal(point)
            } else {
                shape.normal(point)
            };
            let in_defect = self
                .defect
                .is_some_and(|(d, c)| norm(sub(point, c)) < d.radius);
            Hit {
                t,
                point,
                normal,
                in_defect,
            }
        };
        let Some((d, c)) = self.defect.filter(|(d, _)| d.kind.is_geometric()) else {
            return base.map(|t| hit_at(t, false));
        };
        // The displaced surface differs from the primitive only inside this ball.
        let ball_r = d.radius + d.magnitude.abs();
        let oc = sub(origin, c);
        let b = dot(oc, dir);
        let disc = b * b - (dot(oc, oc) - ball_r * ball_r);
        if disc <= 0.0 {
            return base.map(|t| hit_at(t, false));
        }
        let t0 = (-b - disc.sqrt()).max(shape::HIT_EPS);
        let t1 = -b + disc.sqrt();
        if t1 <= t0 {
            return base.map(|t| hit_at(t, false));
        }
        if let Some(tb) = base {
            if tb < t0 {
                return Some(hit_at(tb, false));
            }
        }
        if let Some(t) = self.march(origin, dir, t0, t1, d) {
            return Some(hit_at(t, true));
        }
        base.filter(|&tb| tb > t1).map(|t| hit_at(t, false))
    }

    /// Sphere tracing on the displaced implicit surface within `[t0, t1]`.
    fn march(&self, origin: Vec3, dir: Vec3, t0: f64, t1: f64, d: &DefectSpec) -> Option<f64> {
        // Lipschitz bound of sdf minus displacement: 1 + max |∇ displacement|.
        let lipschitz = 1.0 + 1.6 * d.magnitude.abs() / d.radius;
        let at = |t: f64| self.implicit(add(origin, scale(dir, t)));
        let mut t = t0;
        let mut g = at(t);
        if g <= 0.0 {
            return Some(t);
        }
        let min_step = 1e-6 * d.radius;
        for _ in 0..20_000 {
            let step = (g / lipschitz).max(min_step);
            let next = t + step;
            if next > t1 {
                return None;
            }
            let gn = at(next);
            if gn <= 0.0 {
                // bisection between t (outside) and next (inside)
                let (mut lo, mut hi) = (t, next);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if at(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            if gn < 1e-12 {
                return Some(next);
            }
            t = next;
            g = gn;
        }
        None
    }

    fn albedo(&self, p: Vec3) -> f64 {
        let tex = &self.scene.texture;
        let base = 0.5 + tex.contrast * (fractal_noise(tex.seed, p, tex.frequency) - 0.5);
        let detail =
            tex.detail_amplitude * (value_noise(tex.detail_seed ^ 0xD37A, p.map(|v| v * tex.frequency * 4.0)) - 0.5);
        let mut a = base + detail;
        if let Some((d, c)) = self.defect {
            if d.kind == DefectKind::TextureBlotch {
                let s = norm(sub(p, c)) / d.radius;
                if s < 1.0 {
                    let profile = (2.0 * (1.0 - s)).min(1.0);
                    let jitter = 0.75 + 0.5 * value_noise(d.seed, p.map(|v| v * 8.0 / d.radius));
                    a += d.magnitude * profile * jitter;
                }
            }
        }
        a.clamp(0.0, 1.0)
    }

    fn shade(&self, hit: &Hit) -> f64 {
        let lambert = dot(hit.normal, normalize(LIGHT_DIR)).max(0.0);
        (self.albedo(hit.point) * (AMBIENT + DIFFUSE * lambert)).clamp(0.0, 1.0)
    }
}

/// Casts one world-space ray against the scene.
pub fn cast_ray(scene: &SceneSpec, defect: Option<&DefectSpec>, origin: Vec3, dir: Vec3) -> Option<Hit> {
    Resolved::new(scene, defect).cast(origin, normalize(dir))
}

/// Renders 1-based view `view_index`: shaded intensity, camera depth of the
/// first hit (0 on misses), exact camera, and the defect mask.
pub fn render_view(
    scene: &SceneSpec,
    defect: Option<&DefectSpec>,
    view_index: usize,
) -> Result<ViewObservation, SynthError> {
    scene.validate()?;
    if let Some(d) = defect {
        d.validate()?;
    }
    let camera = scene.camera(view_index)?;
    let resolved = Resolved::new(scene, defect);
    let (h, w) = (scene.height, scene.width);
    let eye = camera.center();
    let mut image = Array3::<f32>::zeros((h, w, 1));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut mask = Array2::<f32>::zeros((h, w));
    for v in 0..h {
        for u in 0..w {
            let dir = camera.ray_direction(u as f64 + 0.5, v as f64 + 0.5);
            if let Some(hit) = resolved.cast(eye, dir) {
                image[[v, u, 0]] = resolved.shade(&hit) as f32;
                depth[[v, u]] = camera.world_to_camera(hit.point)[2] as f32;
                if hit.in_defect {
                    mask[[v, u]] = 1.0;
                }
            }
        }
    }
    Ok(ViewObservation {
        view_index,
        image,
        depth,
        camera,
        gt_mask: Some(mask),
    })
}

pub fn render_viewset(
    scene: &SceneSpec,
    defect: Option<&DefectSpec>,
    sample_id: &str,
    label: Label,
) -> Result<ViewSet, SynthError> {
    let views = (1..=scene.ring.views)
        .into_par_iter()
        .map(|i| render_view(scene, defect, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewSet::new(sample_id.to_string(), views, label)?)
}

/// How many samples of each kind to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_anomalous: usize,
}

/// Defect population for anomalous test samples; kinds are cycled in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectPlan {
    pub kinds: Vec<DefectKind>,
    /// Radius as a fraction of the shape's bounding radius.
    pub radius_frac: f64,
    pub texture_magnitude: f64,
    /// Displacement as a fraction of the bounding radius.
    pub displacement_frac: f64,
}

impl Default for DefectPlan {
    fn default() -> Self {
        Self {
            kinds: vec![
                DefectKind::TextureBlotch,
                DefectKind::GeometricDent,
                DefectKind::GeometricBump,
            ],
            radius_frac: 0.25,
            texture_magnitude: -0.35,
            displacement_frac: 0.1,
        }
    }
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    scene: &'a SceneSpec,
    plan: &'a DatasetPlan,
    defects: &'a DefectPlan,
    seed: u64,
    samples: Vec<ManifestEntry>,
}

/// One generated sample as listed in `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: String,
    pub label: Label,
    pub defect: Option<DefectSpec>,
}

/// Reads the per-sample listing of a generated dataset.
pub fn read_manifest_entries(dataset_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, SynthError> {
    #[derive(Deserialize)]
    struct Listing {
        samples: Vec<ManifestEntry>,
    }
    let listing: Listing = crate::dataset::read_json(&dataset_dir.as_ref().join("dataset.json"))?;
    Ok(listing.samples)
}

fn sample_scene(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> SceneSpec {
    let mut s = scene.clone();
    s.texture.detail_seed = rng.random();
    s
}

/// Draws a defect on the camera-facing band of the surface and retries until
/// at least one view sees it.
pub fn sample_visible_defect(
    scene: &SceneSpec,
    kind: DefectKind,
    plan: &DefectPlan,
    rng: &mut ChaCha8Rng,
) -> Result<DefectSpec, SynthError> {
    const ATTEMPTS: usize = 16;
    let bound = scene.shape.bounding_radius();
    let band = (scene.ring.height - scene.ring.look_at[2])
        .atan2(scene.ring.radius)
        .to_degrees();
    for _ in 0..ATTEMPTS {
        let magnitude = if kind.is_geometric() {
            plan.displacement_frac * bound
        } else {
            plan.texture_magnitude
        };
        let defect = DefectSpec {
            kind,
            azimuth_deg: rng.random_range(0.0..360.0),
            elevation_deg: band + rng.random_range(-15.0..15.0),
            radius: plan.radius_frac * bound,
            magnitude,
            seed: rng.random(),
        };
        defect.validate()?;
        let visible = (1..=scene.ring.views).any(|i| {
            render_view(scene, Some(&defect), i).is_ok_and(|v| v.has_defect_pixels())
        });
        if visible {
            return Ok(defect);
        }
    }
    Err(SynthError::DefectNotVisible(ATTEMPTS))
}

/// Writes `train/` (normal samples only) and `test/` (held-out normals plus
/// anomalous samples) under `out_dir`, plus a `dataset.json` manifest.
pub fn generate_dataset(
    scene: &SceneSpec,
    plan: &DatasetPlan,
    defects: &DefectPlan,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<(), SynthError> {
    scene.validate()?;
    if plan.n_train == 0 {
        return Err(SynthError::InvalidScene("need at least one training sample".into()));
    }
    if plan.n_anomalous > 0 && defects.kinds.is_empty() {
        return Err(SynthError::InvalidDefect("no defect kinds configured".into()));
    }
    let out_dir = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut entries = Vec::new();
    let train_dir = out_dir.join("train");
    fs::create_dir_all(&train_dir).map_err(io_err(&train_dir))?;
    for n in 0..plan.n_train {
        let s = sample_scene(scene, &mut rng);
        let id = format!("train_{n:03}");
        let vs = render_viewset(&s, None, &id, Label::Normal)?;
        save_viewset(train_dir.join(&id), &vs)?;
        entries.push(ManifestEntry {
            sample_id: id,
            split: "train".into(),
            label: Label::Normal,
            defect: None,
        });
    }

    let test_dir = out_dir.join("test");
    fs::create_dir_all(&test_dir).map_err(io_err(&test_dir))?;
    let total = plan.n_test_normal + plan.n_anomalous;
    let mut anomalous_made = 0;
    let mut normal_made = 0;
    for n in 0..total {
        // interleave so that truncated test sets stay mixed
        let want_anomalous = if normal_made >= plan.n_test_normal {
            true
        } else if anomalous_made >= plan.n_anomalous {
            false
        } else {
            n % 2 == 1
        };
        let s = sample_scene(scene, &mut rng);
        let id = format!("test_{n:03}");
        let defect = if want_anomalous {
            let kind = defects.kinds[anomalous_made % defects.kinds.len()];
            anomalous_made += 1;
            Some(sample_visible_defect(&s, kind, defects, &mut rng)?)
        } else {
            normal_made += 1;
            None
        };
        let label = if defect.is_some() { Label::Anomalous } else { Label::Normal };
        let vs = render_viewset(&s, defect.as_ref(), &id, label)?;
        save_viewset(test_dir.join(&id), &vs)?;
        entries.push(ManifestEntry {
            sample_id: id,
            split: "test".into(),
            label,
            defect,
        });
    }

    write_json(
        &out_dir.join("dataset.json"),
        &DatasetManifest {
            scene,
            plan,
            defects,
            seed,
            samples: entries,
        },
    )?;
    Ok(())
}
