//! Synthetic capture: analytic SDF scenes, spiral camera paths, sphere-traced
//! frames and the on-disk dataset consumed by training.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_event_file, simulate_events, write_event_file, BayerMask, EventStream, SimulatorConfig};
use crate::fields::SdfField;
use crate::imaging::RgbImage;
use crate::meshing::{bake_field, export_mesh, import_mesh, marching_cubes, Bounds, MeshFormat, TriMesh, DEFAULT_MAX_VOXELS};
use crate::renderer::{read_json, write_json, CameraModel, Intrinsics, PoseFile, BG_VAL};
use crate::training::PoseTrack;

/// Seconds between rendered frames.
pub const FRAME_DT: f64 = 1e-3;

const MAX_STEPS: usize = 256;
const HIT_TOL: f64 = 1e-4;

fn length(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn minus(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Closed-form signed distance primitives and their combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { centre: [f64; 3], radius: f64 },
    Box { centre: [f64; 3], half_extents: [f64; 3] },
    /// Ring around the z axis.
    Torus { centre: [f64; 3], major: f64, minor: f64 },
    Union { a: std::boxed::Box<Shape>, b: std::boxed::Box<Shape> },
    Subtract { a: std::boxed::Box<Shape>, b: std::boxed::Box<Shape> },
}

impl Shape {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Shape::Sphere { centre, radius } => length(minus(p, *centre)) - radius,
            Shape::Box { centre, half_extents } => {
                let q = [0, 1, 2].map(|a| (p[a] - centre[a]).abs() - half_extents[a]);
                let outside = length(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Torus { centre, major, minor } => {
                let d = minus(p, *centre);
                let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
                (ring * ring + d[2] * d[2]).sqrt() - minor
            }
            Shape::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            Shape::Subtract { a, b } => a.sdf(p).max(-b.sdf(p)),
        }
    }

    /// Point the surface colour patterns are laid out around.
    pub fn anchor(&self) -> [f64; 3] {
        match self {
            Shape::Sphere { centre, .. } | Shape::Box { centre, .. } | Shape::Torus { centre, .. } => *centre,
            Shape::Union { a, .. } | Shape::Subtract { a, .. } => a.anchor(),
        }
    }
}

/// Surface albedo as a function of position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Constant { rgb: [f64; 3] },
    /// Latitude-longitude checkerboard with `cells` bands of latitude.
    Checker { a: [f64; 3], b: [f64; 3], cells: u32 },
    /// Hue around the vertical axis, brightness with height.
    LatLong,
}

impl Surface {
    pub fn colour(&self, p: [f64; 3], anchor: [f64; 3]) -> [f64; 3] {
        let d = minus(p, anchor);
        let r = length(d).max(1e-12);
        let lon = d[1].atan2(d[0]) + PI;
        let colat = (d[2] / r).clamp(-1.0, 1.0).acos();
        match self {
            Surface::Constant { rgb } => *rgb,
            Surface::Checker { a, b, cells } => {
                let n = f64::from(*cells);
                let i = (lon / (2.0 * PI) * 2.0 * n).floor() as i64;
                let j = (colat / PI * n).floor() as i64;
                if (i + j).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Surface::LatLong => {
                let v = 0.35 + 0.6 * (1.0 - colat / PI);
                [0.0, 2.0, 4.0].map(|k| v * (0.55 + 0.45 * (lon - k * PI / 3.0).cos()))
            }
        }
    }
}

/// Shape, albedo, background and a fixed directional light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub surface: Surface,
    pub background: [f64; 3],
    /// Unit direction towards the light.
    pub light: [f64; 3],
    pub ambient: f64,
}

impl AnalyticScene {
    pub fn new(shape: Shape, surface: Surface) -> Self {
        let l = [0.4, -0.5, 0.75];
        let n = length(l);
        Self {
            shape,
            surface,
            background: [BG_VAL; 3],
            light: l.map(|v| v / n),
            ambient: 0.2,
        }
    }

    /// Named scenes: `sphere`, `sphere_checker`, `box`, `torus`,
    /// `capsule`, `cut_box`.
    pub fn preset(name: &str) -> Result<Self> {
        let checker = Surface::Checker {
            a: [0.85, 0.25, 0.2],
            b: [0.2, 0.45, 0.85],
            cells: 6,
        };
        let scene = match name {
            "sphere" => Self::new(
                Shape::Sphere {
                    centre: [0.0; 3],
                    radius: 0.5,
                },
                Surface::Constant { rgb: [0.8, 0.6, 0.3] },
            ),
            "sphere_checker" => Self::new(
                Shape::Sphere {
                    centre: [0.12, -0.08, 0.05],
                    radius: 0.4,
                },
                checker,
            ),
            "box" => Self::new(
                Shape::Box {
                    centre: [0.0; 3],
                    half_extents: [0.35, 0.25, 0.3],
                },
                Surface::LatLong,
            ),
            "torus" => Self::new(
                Shape::Torus {
                    centre: [0.0; 3],
                    major: 0.45,
                    minor: 0.15,
                },
                checker,
            ),
            "capsule" => Self::new(
                Shape::Union {
                    a: std::boxed::Box::new(Shape::Sphere {
                        centre: [0.0, 0.0, -0.25],
                        radius: 0.3,
                    }),
                    b: std::boxed::Box::new(Shape::Sphere {
                        centre: [0.0, 0.0, 0.25],
                        radius: 0.3,
                    }),
                },
                Surface::LatLong,
            ),
            "cut_box" => Self::new(
                Shape::Subtract {
                    a: std::boxed::Box::new(Shape::Box {
                        centre: [0.0; 3],
                        half_extents: [0.4; 3],
                    }),
                    b: std::boxed::Box::new(Shape::Sphere {
                        centre: [0.0; 3],
                        radius: 0.5,
                    }),
                },
                checker,
            ),
            other => return Err(Error::invalid(format!("unknown scene preset `{other}`"))),
        };
        Ok(scene)
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.shape.sdf(p)
    }

    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let g = self.gradient(p);
        let n = length(g).max(1e-12);
        g.map(|v| v / n)
    }

    /// Lambert-shaded albedo at a surface point.
    pub fn shade(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.normal(p);
        let lambert = (n[0] * self.light[0] + n[1] * self.light[1] + n[2] * self.light[2]).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        self.surface.colour(p, self.shape.anchor()).map(|c| (c * k).clamp(0.0, 1.0))
    }

    /// First surface point along a ray, if any.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3], max_t: f64) -> Option<[f64; 3]> {
        let mut t = 0.0;
        for _ in 0..MAX_STEPS {
            let p = [0, 1, 2].map(|a| origin[a] + t * dir[a]);
            let d = self.sdf(p);
            if d < HIT_TOL {
                return Some(p);
            }
            t += d;
            if t > max_t {
                break;
            }
        }
        None
    }
}

impl SdfField for AnalyticScene {
    fn sdf_batch(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().map(|p| self.sdf(*p)).collect()
    }
}

/// Sphere-traced frame; misses show the background.
pub fn sphere_trace_render(scene: &AnalyticScene, cam: &CameraModel) -> RgbImage {
    let k = &cam.intrinsics;
    let max_t = length(cam.centre.into()) + 10.0;
    let mut img = RgbImage::filled(k.width, k.height, scene.background);
    for y in 0..k.height {
        for x in 0..k.width {
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            if let Some(p) = scene.trace(ray.origin, ray.dir, max_t) {
                img.set(x, y, scene.shade(p));
            }
        }
    }
    img
}

/// Camera path with one pose per rendered frame.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<CameraModel>,
    pub timestamps: Vec<f64>,
    pub revolutions: f64,
    pub radius: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose_track(&self) -> Result<PoseTrack> {
        PoseTrack::new(self.timestamps.clone(), self.poses.clone())
    }
}

/// Polar angle (from +z) at the first and last frame.
pub const SPIRAL_BASE_POLAR_DEG: f64 = 95.0;
pub const SPIRAL_APEX_POLAR_DEG: f64 = 5.0;

/// Spherical spiral rising from just below the equator to near the pole:
/// azimuth advances uniformly by `revolutions` turns while the polar angle
/// falls linearly. Every pose looks at the origin with the image x axis
/// along the azimuthal direction, so no pose flips near the pole.
pub fn seiffert_trajectory(n_frames: usize, revolutions: f64, radius: f64, intrinsics: Intrinsics) -> Result<Trajectory> {
    if n_frames < 2 {
        return Err(Error::invalid("a trajectory needs at least two frames"));
    }
    if !(revolutions > 0.0) || !(radius > 0.0) {
        return Err(Error::invalid("revolutions and radius must be positive"));
    }
    let base = SPIRAL_BASE_POLAR_DEG.to_radians();
    let apex = SPIRAL_APEX_POLAR_DEG.to_radians();
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let u = i as f64 / (n_frames - 1) as f64;
        let phi = 2.0 * PI * revolutions * u;
        let theta = base + (apex - base) * u;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let centre = Vector3::new(radius * st * cp, radius * st * sp, radius * ct);
        let forward = -centre / radius;
        let right = Vector3::new(-sp, cp, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        poses.push(CameraModel::new(intrinsics, rotation, centre)?);
    }
    Ok(Trajectory {
        timestamps: (0..n_frames).map(|i| i as f64 * FRAME_DT).collect(),
        poses,
        revolutions,
        radius,
    })
}

/// Everything needed to synthesise one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub preset: String,
    /// Overrides the preset when present.
    pub scene: Option<AnalyticScene>,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub revolutions: f64,
    pub camera_distance: f64,
    pub fov_deg: f64,
    pub threshold: f64,
    pub gamma: f64,
    /// Marching-cubes resolution of the reference mesh.
    pub gt_resolution: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            preset: "sphere_checker".into(),
            scene: None,
            width: 86,
            height: 65,
            n_frames: 999,
            revolutions: 8.0,
            camera_distance: 2.5,
            fov_deg: 30.0,
            threshold: 0.2,
            gamma: 2.2,
            gt_resolution: 160,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if self.width == 0 || self.height == 0 {
            return fail("width/height", "must be positive");
        }
        if self.n_frames < 2 {
            return fail("n_frames", "needs at least two frames");
        }
        if !(self.revolutions > 0.0) {
            return fail("revolutions", "must be positive");
        }
        if !(self.camera_distance > 1.0) {
            return fail("camera_distance", "camera must sit outside the unit bounding sphere");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return fail("fov_deg", "must lie in (0, 180)");
        }
        if !(self.threshold > 0.0) {
            return fail("threshold", "must be positive");
        }
        if !(self.gamma > 0.0) {
            return fail("gamma", "must be positive");
        }
        if self.gt_resolution < 2 {
            return fail("gt_resolution", "must be at least 2");
        }
        if self.scene.is_none() {
            AnalyticScene::preset(&self.preset)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene(&self) -> Result<AnalyticScene> {
        match &self.scene {
            Some(s) => Ok(s.clone()),
            None => AnalyticScene::preset(&self.preset),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }

    pub fn simulator(&self) -> SimulatorConfig {
        SimulatorConfig {
            width: self.width,
            height: self.height,
            bg_val: BG_VAL,
            threshold: self.threshold,
            gamma: self.gamma,
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        seiffert_trajectory(self.n_frames, self.revolutions, self.camera_distance, self.intrinsics())
    }
}

/// A simulated capture held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stream: EventStream,
    pub trajectory: Trajectory,
    pub gt_mesh: TriMesh,
}

/// Renders every frame, simulates events and meshes the true surface.
pub fn build_dataset(scene: &AnalyticScene, trajectory: &Trajectory, sim: &SimulatorConfig, gt_resolution: usize) -> Result<Dataset> {
    let k = trajectory.poses[0].intrinsics;
    if k.width != sim.width || k.height != sim.height {
        return Err(Error::shape(
            format!("{}x{}", sim.width, sim.height),
            format!("{}x{}", k.width, k.height),
        ));
    }
    let frames: Vec<RgbImage> = trajectory.poses.iter().map(|c| sphere_trace_render(scene, c)).collect();
    let bayer = BayerMask::rggb(sim.width, sim.height);
    let stream = simulate_events(&frames, &trajectory.timestamps, sim.threshold, sim.gamma, &bayer)?;
    let gt_mesh = reference_mesh(scene, gt_resolution)?;
    Ok(Dataset {
        stream,
        trajectory: trajectory.clone(),
        gt_mesh,
    })
}

/// Marching cubes of the analytic SDF over `[-1, 1]^3`.
pub fn reference_mesh(scene: &AnalyticScene, resolution: usize) -> Result<TriMesh> {
    let grid = bake_field(scene, [resolution; 3], Bounds::cube(1.0), DEFAULT_MAX_VOXELS)?;
    marching_cubes(&grid, 0.0)
}

pub const EVENTS_FILE: &str = "events.txt";
pub const POSES_FILE: &str = "poses.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const GT_MESH_FILE: &str = "gt_mesh.ply";
pub const CONFIG_FILE: &str = "config.json";

/// Files every dataset directory holds.
pub const DATASET_FILES: [&str; 5] = [EVENTS_FILE, POSES_FILE, INTRINSICS_FILE, GT_MESH_FILE, CONFIG_FILE];

#[derive(Serialize, Deserialize)]
struct ConfigSnapshot {
    scene: SceneConfig,
    simulator: serde_json::Value,
}

pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, cfg: &SceneConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_event_file(&data.stream, dir.join(EVENTS_FILE))?;
    PoseFile::from_cameras(&data.trajectory.poses, &data.trajectory.timestamps).save(dir.join(POSES_FILE))?;
    data.trajectory.poses[0].intrinsics.save(dir.join(INTRINSICS_FILE))?;
    export_mesh(&data.gt_mesh, dir.join(GT_MESH_FILE), MeshFormat::Ply)?;
    let snapshot = ConfigSnapshot {
        scene: cfg.clone(),
        simulator: cfg.simulator().to_json(),
    };
    write_json(dir.join(CONFIG_FILE), &snapshot)
}

/// A dataset directory read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub stream: EventStream,
    pub poses: PoseTrack,
    pub intrinsics: Intrinsics,
    pub gt_mesh: TriMesh,
    pub config: SceneConfig,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    for f in DATASET_FILES {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::invalid(format!("dataset is missing {}", p.display())));
        }
    }
    let mut stream = read_event_file(dir.join(EVENTS_FILE))?;
    let snapshot: ConfigSnapshot = read_json(dir.join(CONFIG_FILE))?;
    let intrinsics = Intrinsics::load(dir.join(INTRINSICS_FILE))?;
    let pose_file = PoseFile::load(dir.join(POSES_FILE))?;
    let poses = PoseTrack::new(pose_file.timestamps.clone(), pose_file.cameras(intrinsics)?)?;
    // the recorded span is the frame span, not the first and last event
    stream.t_start = pose_file.timestamps[0];
    stream.t_end = *pose_file.timestamps.last().unwrap();
    stream.validate()?;
    Ok(LoadedDataset {
        stream,
        poses,
        intrinsics,
        gt_mesh: import_mesh(dir.join(GT_MESH_FILE))?,
        config: snapshot.scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_are_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["sphere", "sphere_checker", "box", "torus", "capsule", "cut_box"] {
            let s = AnalyticScene::preset(name).unwrap();
            for _ in 0..2000 {
                let a: [f64; 3] = [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)];
                let b: [f64; 3] = [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)];
                assert!((s.sdf(a) - s.sdf(b)).abs() <= length(minus(a, b)) + 1e-9, "{name}");
            }
        }
        assert!(AnalyticScene::preset("teapot").is_err());
    }

    #[test]
    fn spiral_geometry() {
        let k = Intrinsics::from_fov(86, 65, 30.0);
        let t = seiffert_trajectory(999, 8.0, 2.5, k).unwrap();
        assert_eq!(t.len(), 999);
        for c in &t.poses {
            assert!((c.centre.norm() - 2.5).abs() < 1e-9);
            assert!((c.rotation.transpose() * c.rotation - Matrix3::identity()).abs().max() < 1e-9);
            // looks at the origin
            let fwd = c.rotation.column(2);
            assert!((fwd + c.centre / 2.5).norm() < 1e-9);
        }
        let first = t.poses[0].centre.z;
        let last = t.poses[998].centre.z;
        assert!(first < 0.0 && last > 2.4);
        assert!(t.poses.windows(2).all(|w| w[1].centre.z >= w[0].centre.z));
        assert!(seiffert_trajectory(1, 8.0, 2.5, k).is_err());
        assert!(seiffert_trajectory(10, 0.0, 2.5, k).is_err());
    }

    #[test]
    fn inside_camera_sees_only_surface_and_away_camera_sees_background() {
        let scene = AnalyticScene::preset("sphere").unwrap();
        let k = Intrinsics::from_fov(12, 9, 60.0);
        let inside = CameraModel::new(k, Matrix3::identity(), Vector3::zeros()).unwrap();
        let img = sphere_trace_render(&scene, &inside);
        assert!(img.pixels.iter().all(|p| *p != scene.background));
        let away = CameraModel::look_at(k, Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 6.0), Vector3::y()).unwrap();
        let img = sphere_trace_render(&scene, &away);
        assert!(img.pixels.iter().all(|p| *p == [BG_VAL; 3]));
    }

    #[test]
    fn static_capture_is_silent() {
        let scene = AnalyticScene::preset("sphere_checker").unwrap();
        let k = Intrinsics::from_fov(16, 12, 30.0);
        let cam = CameraModel::look_at(k, Vector3::new(2.5, 0.0, 0.0), Vector3::zeros(), Vector3::z()).unwrap();
        let traj = Trajectory {
            poses: vec![cam; 5],
            timestamps: (0..5).map(|i| i as f64 * FRAME_DT).collect(),
            revolutions: 0.0,
            radius: 2.5,
        };
        let sim = SimulatorConfig {
            width: 16,
            height: 12,
            ..SimulatorConfig::default()
        };
        let data = build_dataset(&scene, &traj, &sim, 24).unwrap();
        assert!(data.stream.is_empty());
        assert!(!data.gt_mesh.is_empty());
    }

    #[test]
    fn scene_config_validation() {
        assert!(SceneConfig::from_toml("preset = \"torus\"\nwidth = 32").is_ok());
        let err = SceneConfig::from_toml("camera_distance = 0.5").unwrap_err();
        assert!(err.to_string().contains("camera_distance"));
        assert!(SceneConfig::from_toml("preset = \"nope\"").is_err());
        assert!(SceneConfig::from_toml("width = \"wide\"").is_err());
    }
}
