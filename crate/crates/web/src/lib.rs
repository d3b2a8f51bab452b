//! Browser bindings for three small views into the pipeline: annealing
//! curves, simulated event frames and volume-rendering weight profiles.

use evsdf::encodings::AnnealSchedule;
use evsdf::events::{accumulate, simulate_events, BayerMask};
use evsdf::renderer::{alpha_from_sdf, composite, Intrinsics};
use evsdf::scenegen::{seiffert_trajectory, sphere_trace_render, AnalyticScene};
use wasm_bindgen::prelude::*;

fn js_err(e: evsdf::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Band weights over training, `steps` samples per band, band-major.
#[wasm_bindgen]
pub fn anneal_curves(min_bands: u32, max_bands: u32, duration: u32, steps: u32) -> Result<Vec<f64>, JsError> {
    let sched = AnnealSchedule {
        min_bands,
        max_bands,
        duration: u64::from(duration),
    };
    sched.validate().map_err(js_err)?;
    let steps = steps.max(2);
    let mut out = Vec::with_capacity((max_bands * steps) as usize);
    let per_step: Vec<Vec<f64>> = (0..steps)
        .map(|i| {
            let it = u64::from(duration) * u64::from(i) / u64::from(steps - 1);
            sched.coefficients(max_bands as usize, it)
        })
        .collect();
    for k in 0..max_bands as usize {
        out.extend(per_step.iter().map(|c| c[k]));
    }
    Ok(out)
}

/// Signed event frame `C * sum(p)` for a preset scene seen along the first
/// `n_frames` poses of an 8-revolution spiral of 999 frames.
#[wasm_bindgen]
pub fn event_frame(preset: &str, width: usize, height: usize, n_frames: usize, threshold: f64) -> Result<Vec<f64>, JsError> {
    let scene = AnalyticScene::preset(preset).map_err(js_err)?;
    if n_frames < 2 || n_frames > 999 {
        return Err(JsError::new("n_frames must lie in 2..=999"));
    }
    let intrinsics = Intrinsics::from_fov(width, height, 30.0);
    let trajectory = seiffert_trajectory(999, 8.0, 2.5, intrinsics).map_err(js_err)?;
    let frames: Vec<_> = trajectory.poses[..n_frames]
        .iter()
        .map(|c| sphere_trace_render(&scene, c))
        .collect();
    let times = &trajectory.timestamps[..n_frames];
    let bayer = BayerMask::rggb(width, height);
    let stream = simulate_events(&frames, times, threshold, 2.2, &bayer).map_err(js_err)?;
    let frame = accumulate(&stream, times[0], times[n_frames - 1]).map_err(js_err)?;
    Ok(frame.values)
}

/// Compositing weights along a ray that meets a flat surface head-on at
/// depth 1, sampled at `n` even steps over `[0, 2]`.
#[wasm_bindgen]
pub fn weight_profile(sharpness: f64, n: usize) -> Result<Vec<f64>, JsError> {
    if !(sharpness > 0.0) || n < 2 {
        return Err(JsError::new("need a positive sharpness and at least two samples"));
    }
    let t: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64).collect();
    let sdf: Vec<f64> = t.iter().map(|t| 1.0 - t).collect();
    let alphas: Vec<f64> = sdf.windows(2).map(|w| alpha_from_sdf(w[0], w[1], sharpness)).collect();
    let colours = vec![[1.0; 3]; alphas.len()];
    let (_, weights) = composite(&alphas, &colours, [0.0; 3]).map_err(js_err)?;
    Ok(weights)
}
