//! Event supervision: losses, pixel batches, pose interpolation, the
//! optimiser and the step loop.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encodings::AnnealSchedule;
use crate::error::{Error, Result};
use crate::events::{accumulate, sample_window, BayerMask, EventFrame, EventStream, LOG_EPS};
use crate::fields::checkpoint::Checkpoint;
use crate::fields::graph::{Graph, Tensor, Var};
use crate::fields::{FieldConfig, FieldParams, NetworkField, SdfField};
use crate::renderer::{generate_rays, Ray, RaySampleSet, importance_sample_batch, mix, ray_rng, render_on_graph, CameraModel, SamplingConfig, BG_VAL};

/// Event loss on plain values: mean over pixels of
/// `(E - (log c1 - log c0))^2` on each pixel's filter channel.
pub fn event_loss(
    rendered_t0: &[[f64; 3]],
    rendered_t1: &[[f64; 3]],
    pixels: &[(u32, u32)],
    frame: &EventFrame,
    bayer: &BayerMask,
) -> Result<f64> {
    if rendered_t0.len() != pixels.len() || rendered_t1.len() != pixels.len() {
        return Err(Error::shape(pixels.len(), rendered_t0.len().max(rendered_t1.len())));
    }
    check_pixels(pixels, frame, bayer)?;
    if pixels.is_empty() {
        return Err(Error::invalid("event loss over an empty pixel set"));
    }
    let sum: f64 = pixels
        .iter()
        .zip(rendered_t0.iter().zip(rendered_t1))
        .map(|(&(x, y), (c0, c1))| {
            let ch = bayer.channel(x as usize, y as usize);
            let predicted = c1[ch].max(LOG_EPS).ln() - c0[ch].max(LOG_EPS).ln();
            let r = frame.get(x as usize, y as usize) - predicted;
            r * r
        })
        .sum();
    Ok(sum / pixels.len() as f64)
}

fn check_pixels(pixels: &[(u32, u32)], frame: &EventFrame, bayer: &BayerMask) -> Result<()> {
    if frame.width != bayer.width || frame.height != bayer.height {
        return Err(Error::shape(
            format!("{}x{}", frame.width, frame.height),
            format!("{}x{}", bayer.width, bayer.height),
        ));
    }
    match pixels
        .iter()
        .find(|(x, y)| *x as usize >= frame.width || *y as usize >= frame.height)
    {
        Some(p) => Err(Error::invalid(format!("pixel {p:?} outside the event frame"))),
        None => Ok(()),
    }
}

/// One-hot filter-channel selector, `pixels × 3`.
fn channel_mask(pixels: &[(u32, u32)], bayer: &BayerMask) -> Tensor {
    let mut m = Array2::zeros((pixels.len(), 3));
    for (i, &(x, y)) in pixels.iter().enumerate() {
        m[[i, bayer.channel(x as usize, y as usize)]] = 1.0;
    }
    m
}

/// Graph form of [`event_loss`]; `c0` and `c1` are `pixels × 3` intensities.
pub fn event_loss_on_graph(
    g: &mut Graph,
    c0: Var,
    c1: Var,
    pixels: &[(u32, u32)],
    frame: &EventFrame,
    bayer: &BayerMask,
) -> Result<Var> {
    check_pixels(pixels, frame, bayer)?;
    if pixels.is_empty() || g.value(c0).dim() != (pixels.len(), 3) || g.value(c1).dim() != (pixels.len(), 3) {
        return Err(Error::shape(pixels.len(), g.value(c0).nrows()));
    }
    let mask = g.constant(channel_mask(pixels, bayer));
    let target = Array2::from_shape_fn((pixels.len(), 1), |(i, _)| {
        frame.get(pixels[i].0 as usize, pixels[i].1 as usize)
    });
    let target = g.constant(target);
    let l0 = g.log(c0, LOG_EPS);
    let l1 = g.log(c1, LOG_EPS);
    let diff = g.sub(l1, l0);
    let sel = g.mul(diff, mask);
    let sel = g.row_sum(sel);
    let r = g.sub(target, sel);
    let sq = g.square(r);
    Ok(g.mean(sq))
}

/// `mean((|grad f(x)| - 1)^2)` over the points.
pub fn eikonal_loss<F: SdfField + ?Sized>(points: &[[f64; 3]], field: &F) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("Eikonal loss needs at least one point"));
    }
    let sum: f64 = points
        .iter()
        .map(|p| {
            let g = field.gradient(*p);
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            (n - 1.0) * (n - 1.0)
        })
        .sum();
    Ok(sum / points.len() as f64)
}

/// Graph form of [`eikonal_loss`] for an `n × 3` gradient node.
pub fn eikonal_loss_on_graph(g: &mut Graph, gradient: Var) -> Var {
    let sq = g.square(gradient);
    let norm2 = g.row_sum(sq);
    let norm2 = g.add_scalar(norm2, 1e-12);
    let norm = g.sqrt(norm2);
    let r = g.add_scalar(norm, -1.0);
    let r2 = g.square(r);
    g.mean(r2)
}

/// Draws `ceil((1 - rho) * batch)` pixels from cells with events and the
/// rest from cells without. Falls back to the other stratum when one is
/// empty.
pub fn sample_pixel_batch<R: Rng + ?Sized>(
    frame: &EventFrame,
    batch: usize,
    neg_fraction: f64,
    rng: &mut R,
) -> Result<Vec<(u32, u32)>> {
    if batch == 0 {
        return Err(Error::invalid("pixel batch size must be positive"));
    }
    if !(0.0..=1.0).contains(&neg_fraction) {
        return Err(Error::invalid(format!("negative fraction {neg_fraction} outside [0, 1]")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let cell = (x as u32, y as u32);
            if frame.get(x, y) != 0.0 {
                pos.push(cell);
            } else {
                neg.push(cell);
            }
        }
    }
    let mut n_pos = ((1.0 - neg_fraction) * batch as f64).ceil() as usize;
    if pos.is_empty() {
        n_pos = 0;
    } else if neg.is_empty() {
        n_pos = batch;
    }
    let mut out = Vec::with_capacity(batch);
    out.extend((0..n_pos).map(|_| *pos.choose(rng).unwrap()));
    out.extend((n_pos..batch).map(|_| *neg.choose(rng).unwrap()));
    Ok(out)
}

/// Camera poses at frame timestamps, interpolated in between.
#[derive(Debug, Clone)]
pub struct PoseTrack {
    timestamps: Vec<f64>,
    cams: Vec<CameraModel>,
}

impl PoseTrack {
    pub fn new(timestamps: Vec<f64>, cams: Vec<CameraModel>) -> Result<Self> {
        if timestamps.len() != cams.len() || cams.is_empty() {
            return Err(Error::shape(timestamps.len(), cams.len()));
        }
        if timestamps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("pose timestamps must increase strictly"));
        }
        Ok(Self { timestamps, cams })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cams
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Linear centre and spherical-linear rotation between the bracketing
    /// keyframes; clamps outside the recorded span.
    pub fn at(&self, t: f64) -> CameraModel {
        let ts = &self.timestamps;
        if t <= ts[0] {
            return self.cams[0];
        }
        if t >= *ts.last().unwrap() {
            return *self.cams.last().unwrap();
        }
        let i = ts.partition_point(|s| *s <= t) - 1;
        let u = (t - ts[i]) / (ts[i + 1] - ts[i]);
        let (a, b) = (&self.cams[i], &self.cams[i + 1]);
        if u == 0.0 {
            return *a;
        }
        let qa = UnitQuaternion::from_rotation_matrix(&a.rotation3());
        let qb = UnitQuaternion::from_rotation_matrix(&b.rotation3());
        let q = qa.slerp(&qb, u);
        let centre: Vector3<f64> = a.centre.lerp(&b.centre, u);
        CameraModel {
            intrinsics: a.intrinsics,
            rotation: q.to_rotation_matrix().into_inner(),
            centre,
        }
    }
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Array2::zeros(*s)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
    }

    fn to_extra(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Array2::from_elem((1, 1), self.step as f64))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("adam.m.{i}"), m.clone()));
            out.push((format!("adam.v.{i}"), v.clone()));
        }
        out
    }

    fn from_extra(&mut self, extra: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks optimiser tensor {name}")))
        };
        self.step = find("adam.step")?[[0, 0]] as u64;
        for i in 0..self.m.len() {
            let m = find(&format!("adam.m.{i}"))?;
            let v = find(&format!("adam.v.{i}"))?;
            if m.dim() != self.m[i].dim() || v.dim() != self.v[i].dim() {
                return Err(Error::invalid(format!("optimiser tensor {i} has the wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Every training setting, read from a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_eik: f64,
    pub batch_rays: usize,
    pub neg_fraction: f64,
    /// Longest supervision window in seconds.
    pub max_window: f64,
    pub iterations: u64,
    pub anneal_enabled: bool,
    pub anneal_min_bands: u32,
    pub anneal_duration: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Spread of the near-surface Eikonal points.
    pub eik_sigma: f64,
    pub n_coarse: usize,
    pub n_rounds: usize,
    pub n_per_round: usize,
    pub background: f64,
    pub dataset: Option<String>,
    pub out: Option<String>,
    #[serde(flatten)]
    pub network: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_eik: 0.1,
            batch_rays: 64,
            neg_fraction: 0.5,
            max_window: 0.05,
            iterations: 20_000,
            anneal_enabled: true,
            anneal_min_bands: 0,
            anneal_duration: 30_000,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 5_000,
            eik_sigma: 0.01,
            n_coarse: 64,
            n_rounds: 4,
            n_per_round: 16,
            background: BG_VAL,
            dataset: None,
            out: None,
            network: FieldConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if !(self.lambda_eik >= 0.0) {
            return fail("lambda_eik", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.neg_fraction) {
            return fail("neg_fraction", "must lie in [0, 1]");
        }
        if self.batch_rays == 0 {
            return fail("batch_rays", "must be positive");
        }
        if !(self.max_window > 0.0) {
            return fail("max_window", "must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return fail("learning_rate", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("beta1/beta2/adam_eps", "moment decays must lie in [0, 1) and epsilon be positive");
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return fail("log_interval/checkpoint_interval", "must be positive");
        }
        if self.n_coarse < 2 {
            return fail("n_coarse", "needs at least two samples");
        }
        if !(0.0..=1.0).contains(&self.background) {
            return fail("background", "must lie in [0, 1]");
        }
        self.anneal_schedule().validate()?;
        self.network.validate()
    }

    pub fn anneal_schedule(&self) -> AnnealSchedule {
        let bands = self.network.sdf_bands as u32;
        if self.anneal_enabled {
            AnnealSchedule {
                min_bands: self.anneal_min_bands.min(bands),
                max_bands: bands,
                duration: self.anneal_duration,
            }
        } else {
            AnnealSchedule::disabled(bands)
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            n_coarse: self.n_coarse,
            n_rounds: self.n_rounds,
            n_per_round: self.n_per_round,
            bound_radius: 1.0,
        }
    }

    /// Step size halved after every quarter of the run.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let quarter = (self.iterations / 4).max(1);
        self.learning_rate * 0.5f64.powi((iteration / quarter).min(3) as i32)
    }

    /// Parses flat `key = value` TOML; unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: "<config>".into(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        let known = toml::Table::try_from(Self::default()).expect("default config serialises");
        for key in table.keys() {
            if !known.contains_key(key) && key != "dataset" && key != "out" {
                return Err(Error::invalid(format!("unknown config key `{key}`")));
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Inputs of one step, fixed before any gradient is taken.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub t0: f64,
    pub t1: f64,
    pub frame: EventFrame,
    pub pixels: Vec<(u32, u32)>,
    /// Rays at `t0` followed by rays at `t1`.
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySampleSet>,
    pub eik_points: Vec<[f64; 3]>,
    pub coeffs: Vec<f64>,
}

/// Everything a run reads but never changes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub stream: EventStream,
    pub poses: PoseTrack,
    pub bayer: BayerMask,
}

impl TrainData {
    pub fn new(stream: EventStream, poses: PoseTrack) -> Result<Self> {
        stream.validate()?;
        let k = poses.cameras()[0].intrinsics;
        if k.width != stream.width || k.height != stream.height {
            return Err(Error::shape(
                format!("{}x{}", stream.width, stream.height),
                format!("{}x{}", k.width, k.height),
            ));
        }
        if !(stream.t_end > stream.t_start) {
            return Err(Error::invalid("event stream spans no time"));
        }
        let bayer = BayerMask::rggb(stream.width, stream.height);
        Ok(Self { stream, poses, bayer })
    }
}

/// Losses reported for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub event: f64,
    pub eikonal: f64,
    pub total: f64,
    pub sharpness: f64,
}

pub const LOG_HEADER: &str = "# iter L_event L_eik L_total s_sharpness";

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.iteration, self.event, self.eikonal, self.total, self.sharpness
        )
    }

    pub fn parse_log_line(line: &str) -> Option<Self> {
        let mut it = line.split_whitespace();
        let iteration = it.next()?.parse().ok()?;
        let mut next = || it.next()?.parse::<f64>().ok();
        Some(Self {
            iteration,
            event: next()?,
            eikonal: next()?,
            total: next()?,
            sharpness: next()?,
        })
    }
}

// named random sub-streams
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_RAYS: u64 = 3;

/// Seed of a named sub-stream of the run seed.
pub fn substream(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream)
}

/// Parameters, optimiser state and iteration counter of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: FieldParams,
    pub adam: Adam,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = FieldParams::new(config.network.clone(), substream(config.seed, STREAM_INIT))?;
        let adam = Adam::new(&params.shapes(), config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            config,
            params,
            adam,
            iteration: 0,
        })
    }

    pub fn anneal_coeffs(&self) -> Vec<f64> {
        self.config
            .anneal_schedule()
            .coefficients(self.config.network.sdf_bands, self.iteration)
    }

    /// Draws the window, pixels, ray samples and Eikonal points for the
    /// current iteration.
    pub fn sample_batch(&self, data: &TrainData) -> Result<StepBatch> {
        let cfg = &self.config;
        let it = self.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(substream(cfg.seed, STREAM_SAMPLING) ^ it));
        let stream = &data.stream;
        let span = stream.t_end - stream.t_start;
        let t1 = stream.t_start + (1.0 - rng.gen::<f64>()) * span;
        let (t0, t1) = sample_window(t1, cfg.max_window, stream.t_start, &mut rng)?;
        let frame = accumulate(stream, t0, t1)?;
        let pixels = sample_pixel_batch(&frame, cfg.batch_rays, cfg.neg_fraction, &mut rng)?;

        let coeffs = self.anneal_coeffs();
        let mut rays = generate_rays(&data.poses.at(t0), &pixels)?;
        rays.extend(generate_rays(&data.poses.at(t1), &pixels)?);
        let width = stream.width as u64;
        let ray_seed = substream(cfg.seed, STREAM_RAYS);
        let mut rngs: Vec<ChaCha8Rng> = (0..2)
            .flat_map(|view| {
                pixels
                    .iter()
                    .map(move |&(x, y)| ray_rng(ray_seed, u64::from(y) * width + u64::from(x), 2 * it + view))
            })
            .collect();
        let field = NetworkField {
            params: &self.params,
            coeffs: &coeffs,
        };
        let samples = importance_sample_batch(&rays, &field, self.params.sharpness(), &cfg.sampling(), &mut rngs)?;
        let eik_points = eikonal_points(&samples, cfg.batch_rays, cfg.eik_sigma, &mut rng);
        Ok(StepBatch {
            t0,
            t1,
            frame,
            pixels,
            rays,
            samples,
            eik_points,
            coeffs,
        })
    }

    /// Losses and parameter gradients of `params` on a fixed batch.
    pub fn evaluate(&self, params: &FieldParams, batch: &StepBatch, data: &TrainData) -> Result<(StepStats, Vec<Tensor>)> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let bg = [cfg.background; 3];
        let nodes = render_on_graph(&mut g, params, &bound, &batch.rays, &batch.samples, &batch.coeffs, bg)?;
        let n = batch.pixels.len();
        let gamma = data.stream.gamma;
        let rgb0 = g.rows(nodes.rgb, 0, n);
        let rgb1 = g.rows(nodes.rgb, n, n);
        // renders are display-referred; events see linear intensity
        let lin0 = g.powf(rgb0, gamma);
        let lin1 = g.powf(rgb1, gamma);
        let l_event = event_loss_on_graph(&mut g, lin0, lin1, &batch.pixels, &batch.frame, &data.bayer)?;
        let eik = params.sdf_forward(&mut g, &bound, &batch.eik_points, &batch.coeffs, true)?;
        let l_eik = eikonal_loss_on_graph(&mut g, eik.gradient.expect("gradient requested"));
        let weighted = g.scale(l_eik, cfg.lambda_eik);
        let total = g.add(l_event, weighted);

        let stats = StepStats {
            iteration: self.iteration,
            event: g.scalar(l_event),
            eikonal: g.scalar(l_eik),
            total: g.scalar(total),
            sharpness: params.sharpness(),
        };
        let grads = g.backward(total, &params.shapes());
        Ok((stats, grads))
    }

    /// Runs one optimiser update on a freshly sampled window and pixel batch.
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats> {
        let batch = self.sample_batch(data)?;
        let (stats, grads) = self.evaluate(&self.params, &batch, data)?;
        if !stats.total.is_finite() || grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                pixels: batch.pixels,
            });
        }
        let lr = self.config.learning_rate_at(self.iteration);
        self.adam.update(&mut self.params.tensors, &grads, lr);
        self.iteration += 1;
        Ok(stats)
    }

    /// Trains up to `until` iterations, calling `on_step` after each one.
    pub fn run<F: FnMut(&Self, &StepStats) -> Result<()>>(&mut self, data: &TrainData, until: u64, mut on_step: F) -> Result<()> {
        while self.iteration < until {
            let stats = self.step(data)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            iteration: self.iteration,
            seed: self.config.seed,
            extra: self.adam.to_extra(),
            settings: serde_json::to_value(&self.config).expect("config serialises"),
        }
    }

    /// Restores a run; the stored configuration wins over `config` except
    /// for the iteration budget.
    pub fn from_checkpoint(ck: Checkpoint, iterations: Option<u64>) -> Result<Self> {
        let mut config: TrainConfig = serde_json::from_value(ck.settings.clone())
            .map_err(|e| Error::invalid(format!("checkpoint settings: {e}")))?;
        if let Some(n) = iterations {
            config.iterations = n;
        }
        config.validate()?;
        if config.network != ck.params.config {
            return Err(Error::invalid("checkpoint network does not match its settings"));
        }
        let mut adam = Adam::new(&ck.params.shapes(), config.beta1, config.beta2, config.adam_eps);
        adam.from_extra(&ck.extra)?;
        Ok(Self {
            config,
            params: ck.params,
            adam,
            iteration: ck.iteration,
        })
    }
}

/// Half uniform in the unit ball, half jittered around each ray's
/// highest-weight sample.
fn eikonal_points<R: Rng>(samples: &[RaySampleSet], n: usize, sigma: f64, rng: &mut R) -> Vec<[f64; 3]> {
    let peaks: Vec<[f64; 3]> = samples.iter().filter_map(|s| s.peak()).collect();
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    let n_near = if peaks.is_empty() { 0 } else { n / 2 };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_near {
        let p = peaks.choose(rng).unwrap();
        out.push([
            p[0] + normal.sample(rng),
            p[1] + normal.sample(rng),
            p[2] + normal.sample(rng),
        ]);
    }
    while out.len() < n {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            out.push(p);
        }
    }
    out
}

/// Formats a run log from collected stats.
pub fn format_log(stats: &[StepStats], interval: u64) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for s in stats.iter().filter(|s| (s.iteration + 1) % interval == 0) {
        let _ = writeln!(out, "{}", s.log_line());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FnField;
    use crate::renderer::Intrinsics;
    use nalgebra::Matrix3;

    fn frame_with(values: Vec<f64>, width: usize, height: usize) -> EventFrame {
        EventFrame {
            width,
            height,
            values,
            t0: 0.0,
            t1: 1.0,
        }
    }

    #[test]
    fn event_loss_examples() {
        let bayer = BayerMask::rggb(2, 2);
        let zero = frame_with(vec![0.0; 4], 2, 2);
        let px = [(0, 0), (1, 1)];
        let c = [[0.3, 0.4, 0.5], [0.6, 0.1, 0.9]];
        assert_eq!(event_loss(&c, &c, &px, &zero, &bayer).unwrap(), 0.0);

        // pixel (0, 0) reads red
        let c0 = [[0.2, 0.7, 0.7]];
        let c1 = [[0.2 * 0.4f64.exp(), 0.1, 0.9]];
        let f = frame_with(vec![0.4, 0.0, 0.0, 0.0], 2, 2);
        assert!(event_loss(&c0, &c1, &[(0, 0)], &f, &bayer).unwrap().abs() < 1e-15);
        let f = frame_with(vec![0.2, 0.0, 0.0, 0.0], 2, 2);
        let l = event_loss(&c0, &c1, &[(0, 0)], &f, &bayer).unwrap();
        assert!((l - 0.04).abs() < 1e-14, "{l}");
        assert!(event_loss(&c0, &c1, &[(0, 0), (1, 0)], &f, &bayer).is_err());
        assert!(event_loss(&c0, &c1, &[(2, 0)], &f, &bayer).is_err());
    }

    #[test]
    fn event_loss_graph_matches_values() {
        let bayer = BayerMask::rggb(3, 2);
        let f = frame_with(vec![0.2, -0.4, 0.0, 0.6, 0.2, -0.2], 3, 2);
        let px = [(0, 0), (1, 0), (2, 1), (1, 1)];
        let c0 = [[0.3, 0.4, 0.5], [0.6, 0.1, 0.9], [0.2, 0.2, 0.3], [0.7, 0.3, 0.2]];
        let c1 = [[0.5, 0.2, 0.5], [0.1, 0.3, 0.8], [0.25, 0.6, 0.1], [0.3, 0.6, 0.6]];
        let expect = event_loss(&c0, &c1, &px, &f, &bayer).unwrap();
        let mut g = Graph::new();
        let to = |c: &[[f64; 3]]| Array2::from_shape_fn((c.len(), 3), |(i, j)| c[i][j]);
        let a = g.constant(to(&c0));
        let b = g.constant(to(&c1));
        let l = event_loss_on_graph(&mut g, a, b, &px, &f, &bayer).unwrap();
        assert!((g.scalar(l) - expect).abs() < 1e-15);
    }

    #[test]
    fn eikonal_examples() {
        let unit = FnField(|p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5);
        let scaled = FnField(|p: [f64; 3]| 2.0 * ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5));
        let pts = [[0.3, 0.1, -0.2], [0.0, 0.7, 0.1], [-0.5, -0.5, 0.2]];
        assert!(eikonal_loss(&pts, &unit).unwrap() < 1e-12);
        assert!((eikonal_loss(&pts, &scaled).unwrap() - 1.0).abs() < 1e-9);
        assert!(eikonal_loss(&[], &unit).is_err());
    }

    #[test]
    fn pixel_batch_strata() {
        let (w, h) = (50, 40);
        let mut values = vec![0.0; w * h];
        for v in values.iter_mut().step_by(2) {
            *v = 0.2;
        }
        let f = frame_with(values, w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_pos = sample_pixel_batch(&f, 100, 0.0, &mut rng).unwrap();
        assert!(all_pos.iter().all(|&(x, y)| f.get(x as usize, y as usize) != 0.0));
        let all_neg = sample_pixel_batch(&f, 100, 1.0, &mut rng).unwrap();
        assert!(all_neg.iter().all(|&(x, y)| f.get(x as usize, y as usize) == 0.0));
        let half = sample_pixel_batch(&f, 512, 0.5, &mut rng).unwrap();
        let n_pos = half.iter().filter(|&&(x, y)| f.get(x as usize, y as usize) != 0.0).count();
        assert_eq!(n_pos, 256);
        assert!(sample_pixel_batch(&f, 0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn pose_interpolation_hits_keyframes_and_midpoints() {
        let k = Intrinsics::from_fov(8, 6, 60.0);
        let a = CameraModel::new(k, Matrix3::identity(), Vector3::zeros()).unwrap();
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.5);
        let b = CameraModel::new(k, rot.into_inner(), Vector3::new(2.0, 0.0, 0.0)).unwrap();
        let track = PoseTrack::new(vec![0.0, 1.0], vec![a, b]).unwrap();
        assert_eq!(track.at(0.0), a);
        assert_eq!(track.at(1.0), b);
        let mid = track.at(0.5);
        assert!((mid.centre - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let half = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.25);
        assert!((mid.rotation - half.into_inner()).abs().max() < 1e-12);
        assert!(PoseTrack::new(vec![1.0, 1.0], vec![a, b]).is_err());
    }

    #[test]
    fn learning_rate_halves_each_quarter() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 5e-4);
        assert_eq!(cfg.learning_rate_at(24), 5e-4);
        assert_eq!(cfg.learning_rate_at(25), 2.5e-4);
        assert_eq!(cfg.learning_rate_at(99), 5e-4 / 8.0);
    }

    #[test]
    fn config_round_trip_and_rejections() {
        let cfg = TrainConfig {
            seed: 9,
            dataset: Some("data/sphere".into()),
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::from_toml("lambda_eik = -1.0").unwrap_err();
        assert!(err.to_string().contains("lambda_eik"), "{err}");
        let err = TrainConfig::from_toml("no_such_key = 3").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
        let err = TrainConfig::from_toml("neg_fraction = 1.5").unwrap_err();
        assert!(err.to_string().contains("neg_fraction"));
        assert!(TrainConfig::from_toml("sdf_width = 32\nbatch_rays = 8").is_ok());
    }

    #[test]
    fn log_lines_parse_back() {
        let s = StepStats {
            iteration: 12,
            event: 0.25,
            eikonal: 1e-3,
            total: 0.2501,
            sharpness: 3.3,
        };
        let back = StepStats::parse_log_line(&s.log_line()).unwrap();
        assert_eq!(back.iteration, 12);
        assert!((back.total - 0.2501).abs() < 1e-12);
        assert!(StepStats::parse_log_line("# iter").is_none());
    }

    #[test]
    fn adam_with_zero_step_leaves_parameters() {
        let mut p = vec![Array2::from_elem((2, 2), 1.5)];
        let g = vec![Array2::from_elem((2, 2), 0.3)];
        let mut adam = Adam::new(&[(2, 2)], 0.9, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.0);
        assert!(p[0].iter().all(|v| *v == 1.5));
        adam.update(&mut p, &g, 0.1);
        // first bias-corrected step moves each weight by about lr
        assert!((p[0][[0, 0]] - 1.4).abs() < 1e-6);
    }
}
