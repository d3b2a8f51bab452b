//! Pinhole cameras, SDF-to-opacity conversion, importance sampling along
//! rays and volume compositing.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::graph::{ray_alphas, CompositeSpec, Graph, Var};
use crate::fields::{Bound, FieldParams, NetworkField, SdfField};
use crate::imaging::RgbImage;

/// Default background grey, 159/255 on every channel.
pub const BG_VAL: f64 = 159.0 / 255.0;

/// Focal lengths and principal point in pixels, plus sensor size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }
}

/// Pinhole camera. Camera axes: x right, y down, z forward. `rotation` and
/// `centre` map camera coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub centre: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, centre: Vector3<f64>) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            centre,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || k.width == 0 || k.height == 0 {
            return Err(Error::invalid("camera needs positive focal lengths and resolution"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`. `up` is a world-space hint for
    /// the image's upward direction.
    pub fn look_at(intrinsics: Intrinsics, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::invalid("look_at: up hint parallel to the viewing direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(intrinsics, rotation, eye)
    }

    pub fn pose_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.centre);
        m
    }

    pub fn from_pose_matrix(intrinsics: Intrinsics, m: &Matrix4<f64>) -> Result<Self> {
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let centre: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(intrinsics, rotation, centre)
    }

    /// Continuous pixel coordinates of a world point, if in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let pc = self.rotation.transpose() * (Vector3::from(p) - self.centre);
        if pc.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let dc = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dw = (self.rotation * dc).normalize();
        Ray {
            origin: self.centre.into(),
            dir: dw.into(),
        }
    }

    /// Rotation as a proper rotation (re-orthonormalised).
    pub fn rotation3(&self) -> Rotation3<f64> {
        Rotation3::from_matrix(&self.rotation)
    }

    pub fn eye(&self) -> Point3<f64> {
        Point3::from(self.centre)
    }
}

/// Rays through the centres of the given `(x, y)` pixels.
pub fn generate_rays(cam: &CameraModel, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    let k = &cam.intrinsics;
    pixels
        .iter()
        .map(|&(x, y)| {
            if x as usize >= k.width || y as usize >= k.height {
                return Err(Error::invalid(format!("pixel ({x}, {y}) outside {}x{}", k.width, k.height)));
            }
            Ok(cam.ray_through(f64::from(x) + 0.5, f64::from(y) + 0.5))
        })
        .collect()
}

/// Opacity of the interval between two consecutive samples:
/// `max((P(a) - P(b)) / P(a), 0)` with `P(x) = 1 / (1 + e^{-s x})`.
pub fn alpha_from_sdf(sdf_i: f64, sdf_next: f64, s: f64) -> f64 {
    ray_alphas(&[sdf_i, sdf_next], s)[0]
}

/// Front-to-back compositing. Returns the pixel colour and per-sample
/// weights `T_i * alpha_i`; the residual transmittance is filled with
/// `background`.
pub fn composite(alphas: &[f64], colours: &[[f64; 3]], background: [f64; 3]) -> Result<([f64; 3], Vec<f64>)> {
    if alphas.len() != colours.len() {
        return Err(Error::shape(alphas.len(), colours.len()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("alpha {a} outside [0, 1]")));
    }
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(alphas.len());
    for (a, c) in alphas.iter().zip(colours) {
        let w = trans * a;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        weights.push(w);
        trans *= 1.0 - a;
    }
    for k in 0..3 {
        rgb[k] += trans * background[k];
    }
    Ok((rgb, weights))
}

/// Depth range where a ray is inside the sphere of `radius` at the origin.
pub fn sphere_bounds(ray: &Ray, radius: f64) -> Option<(f64, f64)> {
    let o = Vector3::from(ray.origin);
    let d = Vector3::from(ray.dir);
    let a = d.dot(&d);
    let b = o.dot(&d);
    let c = o.dot(&o) - radius * radius;
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let near = ((-b - root) / a).max(0.0);
    let far = (-b + root) / a;
    (far > near).then_some((near, far))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_rounds: usize,
    pub n_per_round: usize,
    /// Radius of the scene's bounding sphere.
    pub bound_radius: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_rounds: 4,
            n_per_round: 16,
            bound_radius: 1.0,
        }
    }
}

/// Sample depths along one ray with their SDF values and volume weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySampleSet {
    pub t_values: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub sdf: Vec<f64>,
    /// Per interval `[t_i, t_{i+1}]`, one fewer than samples.
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RaySampleSet {
    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    fn refresh_weights(&mut self, s: f64) {
        self.alphas = ray_alphas(&self.sdf, s);
        let mut trans = 1.0;
        self.weights = self
            .alphas
            .iter()
            .map(|a| {
                let w = trans * a;
                trans *= 1.0 - a;
                w
            })
            .collect();
    }

    /// Position of the largest-weight sample, if any.
    pub fn peak(&self) -> Option<[f64; 3]> {
        self.weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| self.positions[i])
    }
}

/// Coarse stratified sampling followed by rounds of inverse-CDF sampling
/// from the current weight distribution, all using one field.
pub fn importance_sample<F: SdfField + ?Sized, R: Rng>(
    ray: &Ray,
    field: &F,
    s: f64,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RaySampleSet> {
    let mut rngs = [ChaCha8Rng::seed_from_u64(rng.gen())];
    Ok(importance_sample_batch(std::slice::from_ref(ray), field, s, cfg, &mut rngs)?.remove(0))
}

/// Batched [`importance_sample`]; field queries for all rays in a round go
/// through a single call. One random stream per ray.
pub fn importance_sample_batch<F: SdfField + ?Sized>(
    rays: &[Ray],
    field: &F,
    s: f64,
    cfg: &SamplingConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<RaySampleSet>> {
    if rngs.len() != rays.len() {
        return Err(Error::shape(rays.len(), rngs.len()));
    }
    if cfg.n_coarse < 2 {
        return Err(Error::invalid("need at least two coarse samples"));
    }
    let mut sets = vec![RaySampleSet::default(); rays.len()];
    let mut pending: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        let d = ray.dir;
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !(len > 1e-12) {
            return Err(Error::invalid("degenerate ray direction"));
        }
        let Some((near, far)) = sphere_bounds(ray, cfg.bound_radius) else { continue };
        let step = (far - near) / cfg.n_coarse as f64;
        let ts = (0..cfg.n_coarse)
            .map(|k| near + (k as f64 + rngs[i].gen::<f64>()) * step)
            .collect();
        pending.push((i, ts));
    }
    evaluate_and_merge(rays, field, &mut sets, pending, s);

    for _ in 0..cfg.n_rounds {
        let mut pending = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            if set.len() < 2 {
                continue;
            }
            let extra = sample_intervals(&set.t_values, &set.weights, cfg.n_per_round, &mut rngs[i]);
            pending.push((i, extra));
        }
        evaluate_and_merge(rays, field, &mut sets, pending, s);
    }
    Ok(sets)
}

fn evaluate_and_merge<F: SdfField + ?Sized>(
    rays: &[Ray],
    field: &F,
    sets: &mut [RaySampleSet],
    pending: Vec<(usize, Vec<f64>)>,
    s: f64,
) {
    let points: Vec<[f64; 3]> = pending
        .iter()
        .flat_map(|(i, ts)| ts.iter().map(move |t| rays[*i].at(*t)))
        .collect();
    if points.is_empty() {
        return;
    }
    let values = field.sdf_batch(&points);
    let mut offset = 0;
    for (i, ts) in pending {
        let set = &mut sets[i];
        let mut merged: Vec<(f64, [f64; 3], f64)> = set
            .t_values
            .iter()
            .zip(&set.positions)
            .zip(&set.sdf)
            .map(|((t, p), f)| (*t, *p, *f))
            .collect();
        for (k, t) in ts.iter().enumerate() {
            merged.push((*t, points[offset + k], values[offset + k]));
        }
        offset += ts.len();
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        merged.dedup_by(|a, b| a.0 == b.0);
        set.t_values = merged.iter().map(|m| m.0).collect();
        set.positions = merged.iter().map(|m| m.1).collect();
        set.sdf = merged.iter().map(|m| m.2).collect();
        set.refresh_weights(s);
    }
}

/// Draws `n` depths from the piecewise-constant density over intervals
/// `[t_i, t_{i+1}]` with mass proportional to `weights[i]`.
fn sample_intervals<R: Rng>(t: &[f64], weights: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let eps = 1e-5;
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let total: f64 = weights.iter().map(|w| w + eps).sum();
    let mut acc = 0.0;
    for w in weights {
        acc += (w + eps) / total;
        cdf.push(acc);
    }
    (0..n)
        .map(|k| {
            // stratified uniforms
            let u = ((k as f64 + rng.gen::<f64>()) / n as f64).min(1.0 - 1e-12);
            let i = cdf.partition_point(|c| *c <= u).clamp(1, weights.len()) - 1;
            let span = cdf[i + 1] - cdf[i];
            let frac = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
            t[i] + frac * (t[i + 1] - t[i])
        })
        .collect()
}

/// Rendering settings shared by evaluation and training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub sampling: SamplingConfig,
    pub background: [f64; 3],
    /// Rays per evaluation chunk.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            background: [BG_VAL; 3],
            chunk: 512,
        }
    }
}

/// Deterministic per-ray stream from `(seed, pixel index, iteration)`.
pub fn ray_rng(seed: u64, pixel: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ pixel) ^ iteration.rotate_left(32)))
}

/// splitmix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Graph nodes produced by [`render_on_graph`].
#[derive(Debug, Clone)]
pub struct RenderNodes {
    /// `rays × 3` composited colours.
    pub rgb: Var,
    /// `samples × 3` SDF gradients at every sample.
    pub gradient: Var,
    pub ranges: Vec<Range<usize>>,
}

/// Differentiable render of rays whose sample depths are already chosen.
pub fn render_on_graph(
    g: &mut Graph,
    params: &FieldParams,
    bound: &Bound,
    rays: &[Ray],
    samples: &[RaySampleSet],
    coeffs: &[f64],
    background: [f64; 3],
) -> Result<RenderNodes> {
    if rays.len() != samples.len() {
        return Err(Error::shape(rays.len(), samples.len()));
    }
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut ranges = Vec::with_capacity(rays.len());
    for (ray, set) in rays.iter().zip(samples) {
        let start = points.len();
        points.extend_from_slice(&set.positions);
        dirs.extend(std::iter::repeat(ray.dir).take(set.len()));
        ranges.push(start..points.len());
    }
    let (sdf, rgb, gradient) = if points.is_empty() {
        let z = g.constant(Array2::zeros((0, 1)));
        let c = g.constant(Array2::zeros((0, 3)));
        (z, c, c)
    } else {
        let nodes = params.sdf_forward(g, bound, &points, coeffs, true)?;
        let gradient = nodes.gradient.expect("gradient requested");
        let rgb = params.radiance_forward(g, bound, &points, &dirs, gradient, nodes.feature)?;
        (nodes.value, rgb, gradient)
    };
    let spec = CompositeSpec {
        rays: ranges.clone(),
        background,
    };
    let out = g.composite(sdf, rgb, params.log_s_var(bound), spec);
    Ok(RenderNodes {
        rgb: out,
        gradient,
        ranges,
    })
}

/// Renders pixels with the networks (no gradients).
pub fn render_pixels(
    cam: &CameraModel,
    pixels: &[(u32, u32)],
    params: &FieldParams,
    coeffs: &[f64],
    cfg: &RenderConfig,
    seed: u64,
    iteration: u64,
) -> Result<Vec<[f64; 3]>> {
    let rays = generate_rays(cam, pixels)?;
    let field = NetworkField { params, coeffs };
    let s = params.sharpness();
    let w = cam.intrinsics.width as u64;
    let mut out = Vec::with_capacity(rays.len());
    for (chunk_idx, chunk) in rays.chunks(cfg.chunk.max(1)).enumerate() {
        let base = chunk_idx * cfg.chunk.max(1);
        let mut rngs: Vec<_> = (0..chunk.len())
            .map(|k| {
                let (x, y) = pixels[base + k];
                ray_rng(seed, u64::from(y) * w + u64::from(x), iteration)
            })
            .collect();
        let samples = importance_sample_batch(chunk, &field, s, &cfg.sampling, &mut rngs)?;
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let nodes = render_on_graph(&mut g, params, &bound, chunk, &samples, coeffs, cfg.background)?;
        let v = g.value(nodes.rgb);
        out.extend((0..chunk.len()).map(|i| [v[[i, 0]], v[[i, 1]], v[[i, 2]]]));
    }
    Ok(out)
}

/// Full-frame [`render_pixels`].
pub fn render_image(
    cam: &CameraModel,
    params: &FieldParams,
    coeffs: &[f64],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RgbImage> {
    let k = &cam.intrinsics;
    let pixels: Vec<(u32, u32)> = (0..k.height as u32)
        .flat_map(|y| (0..k.width as u32).map(move |x| (x, y)))
        .collect();
    let colours = render_pixels(cam, &pixels, params, coeffs, cfg, seed, 0)?;
    Ok(RgbImage {
        width: k.width,
        height: k.height,
        pixels: colours,
    })
}

/// Per-frame poses with timestamps, stored as row-major 4×4
/// world-from-camera matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub timestamps: Vec<f64>,
    pub poses: Vec<[f64; 16]>,
}

impl PoseFile {
    pub fn from_cameras(cams: &[CameraModel], timestamps: &[f64]) -> Self {
        Self {
            timestamps: timestamps.to_vec(),
            poses: cams
                .iter()
                .map(|c| {
                    let m = c.pose_matrix();
                    let mut out = [0.0; 16];
                    for r in 0..4 {
                        for col in 0..4 {
                            out[4 * r + col] = m[(r, col)];
                        }
                    }
                    out
                })
                .collect(),
        }
    }

    pub fn cameras(&self, intrinsics: Intrinsics) -> Result<Vec<CameraModel>> {
        if self.poses.len() != self.timestamps.len() {
            return Err(Error::shape(self.timestamps.len(), self.poses.len()));
        }
        self.poses
            .iter()
            .map(|p| CameraModel::from_pose_matrix(intrinsics, &Matrix4::from_row_slice(p)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

impl Intrinsics {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}
