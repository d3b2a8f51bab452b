//! Event camera model: simulation from frame sequences, accumulation into
//! frames, supervision window sampling and the RGGB colour filter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Floor applied to linear intensity before taking the logarithm.
pub const LOG_EPS: f64 = 1e-5;

/// Crossings within this fraction of a threshold count as reached.
const LEVEL_EPS: f64 = 1e-9;

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: f64,
    /// +1 or -1.
    pub p: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    pub gamma: f64,
    /// Recorded time span. Windows passed to [`accumulate`] must lie inside it.
    pub t_start: f64,
    pub t_end: f64,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Checks ordering, bounds and parameter invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::invalid("threshold and gamma must be positive"));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(Error::invalid(format!("event {i} out of bounds")));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::invalid(format!("event {i} has polarity {}", e.p)));
            }
            if !(e.t >= 0.0) {
                return Err(Error::invalid(format!("event {i} has negative timestamp")));
            }
        }
        for (i, w) in self.events.windows(2).enumerate() {
            if event_order(&w[0], &w[1]) == std::cmp::Ordering::Greater {
                return Err(Error::invalid(format!("events {i} and {} out of order", i + 1)));
            }
        }
        Ok(())
    }
}

fn event_order(a: &Event, b: &Event) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
}

/// Signed per-pixel accumulation `C * sum(p)` over `(t0, t1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
}

impl EventFrame {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// RGGB colour filter array. Channel 0 = R, 1 = G, 2 = B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BayerMask {
    pub width: usize,
    pub height: usize,
}

impl BayerMask {
    pub fn rggb(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    #[inline]
    pub fn channel(&self, x: usize, y: usize) -> usize {
        match (y & 1, x & 1) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }

    /// Row-major channel-index grid.
    pub fn pattern(&self) -> Vec<u8> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .map(|(y, x)| self.channel(x, y) as u8)
            .collect()
    }
}

/// Selects the filter channel at each pixel, giving a row-major H×W grid.
pub fn apply_bayer(image: &RgbImage, bayer: &BayerMask) -> Result<Vec<f64>> {
    if (image.width, image.height) != (bayer.width, bayer.height) {
        return Err(Error::shape(
            format!("{}x{}", bayer.width, bayer.height),
            format!("{}x{}", image.width, image.height),
        ));
    }
    let mut out = Vec::with_capacity(image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            out.push(image.get(x, y)[bayer.channel(x, y)]);
        }
    }
    Ok(out)
}

/// Log intensity of an sRGB value after gamma linearisation.
#[inline]
pub fn log_intensity(srgb: f64, gamma: f64) -> f64 {
    srgb.max(0.0).powf(gamma).max(LOG_EPS).ln()
}

/// Runs the threshold-crossing event model over a frame sequence.
///
/// Each pixel keeps a reference log intensity of its filter channel. When the
/// current value departs from it by `n >= 1` thresholds, `n` events are emitted
/// at timestamps interpolated linearly in log intensity across the frame
/// interval and the reference advances by `n * C`.
pub fn simulate_events(
    frames: &[RgbImage],
    timestamps: &[f64],
    threshold: f64,
    gamma: f64,
    bayer: &BayerMask,
) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::shape(frames.len(), timestamps.len()));
    }
    if !(threshold > 0.0) || !(gamma > 0.0) {
        return Err(Error::invalid("threshold and gamma must be positive"));
    }
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) || !(timestamps[0] >= 0.0) {
        return Err(Error::invalid("timestamps must be non-negative and strictly increasing"));
    }
    let (w, h) = frames[0].resolution();
    if let Some(f) = frames.iter().find(|f| f.resolution() != (w, h)) {
        return Err(Error::shape(
            format!("{w}x{h}"),
            format!("{}x{}", f.width, f.height),
        ));
    }

    let to_log = |img: &RgbImage| -> Result<Vec<f64>> {
        Ok(apply_bayer(img, bayer)?
            .into_iter()
            .map(|v| log_intensity(v, gamma))
            .collect())
    };

    let mut reference = to_log(&frames[0])?;
    let mut previous = reference.clone();
    let mut events = Vec::new();
    let mut batch = Vec::new();

    for (k, frame) in frames.iter().enumerate().skip(1) {
        let current = to_log(frame)?;
        let (ta, tb) = (timestamps[k - 1], timestamps[k]);
        batch.clear();
        for (idx, (&l_new, &l_prev)) in current.iter().zip(&previous).enumerate() {
            let delta = l_new - reference[idx];
            let n = (delta.abs() / threshold + LEVEL_EPS).floor();
            if n < 1.0 {
                continue;
            }
            let sign = delta.signum();
            let (x, y) = ((idx % w) as u32, (idx / w) as u32);
            for j in 1..=(n as u64) {
                let level = reference[idx] + sign * threshold * j as f64;
                let span = l_new - l_prev;
                let frac = if span == 0.0 { 1.0 } else { ((level - l_prev) / span).clamp(0.0, 1.0) };
                batch.push(Event {
                    x,
                    y,
                    t: (ta + frac * (tb - ta)).min(tb),
                    p: sign as i8,
                });
            }
            reference[idx] += sign * threshold * n;
        }
        events.extend_from_slice(&batch);
        previous = current;
    }

    events.sort_by(event_order);
    Ok(EventStream {
        events,
        width: w,
        height: h,
        threshold,
        gamma,
        t_start: timestamps[0],
        t_end: *timestamps.last().unwrap(),
    })
}

/// Sums `C * p` per pixel over events with `t0 < t <= t1`.
pub fn accumulate(stream: &EventStream, t0: f64, t1: f64) -> Result<EventFrame> {
    if !(t0 < t1) {
        return Err(Error::invalid(format!("empty window [{t0}, {t1}]")));
    }
    let slack = 1e-9 * (1.0 + stream.t_end.abs());
    if t0 < stream.t_start - slack || t1 > stream.t_end + slack {
        return Err(Error::invalid(format!(
            "window ({t0}, {t1}] outside recorded span [{}, {}]",
            stream.t_start, stream.t_end
        )));
    }
    let lo = stream.events.partition_point(|e| e.t <= t0);
    let hi = stream.events.partition_point(|e| e.t <= t1);
    let mut counts = vec![0i64; stream.width * stream.height];
    for e in &stream.events[lo..hi] {
        counts[e.y as usize * stream.width + e.x as usize] += i64::from(e.p);
    }
    Ok(EventFrame {
        width: stream.width,
        height: stream.height,
        values: counts
            .into_iter()
            .map(|c| c as f64 * stream.threshold)
            .collect(),
        t0,
        t1,
    })
}

/// Draws a supervision window ending at `t_end` with start uniform in
/// `[t_end - L, t_end)`. `L` shrinks to the span available after `span_start`.
pub fn sample_window<R: Rng + ?Sized>(
    t_end: f64,
    max_len: f64,
    span_start: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(max_len > 0.0) {
        return Err(Error::invalid("maximum window length must be positive"));
    }
    let len = max_len.min(t_end - span_start);
    if !(len > 0.0) {
        return Err(Error::invalid("window end does not follow the span start"));
    }
    let u: f64 = rng.gen();
    let t0 = (t_end - len + u * len).min(t_end);
    // rounding can land exactly on t_end for tiny windows
    let t0 = if t0 >= t_end { t_end - len * f64::EPSILON.max(1e-15) } else { t0 };
    Ok((t0, t_end))
}

/// Writes the `t x y p` text format with a `# W H C gamma` header.
pub fn write_event_file(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_events(stream)).map_err(|e| Error::io(path, e))
}

pub fn format_events(stream: &EventStream) -> String {
    let mut out = String::with_capacity(24 * stream.events.len() + 32);
    writeln!(
        out,
        "# {} {} {} {}",
        stream.width, stream.height, stream.threshold, stream.gamma
    )
    .unwrap();
    for e in &stream.events {
        writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p).unwrap();
    }
    out
}

/// Reads an event file. The span is taken from the first and last events;
/// callers with frame timestamps should overwrite it.
pub fn read_event_file(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

pub fn parse_events(text: &str) -> std::result::Result<EventStream, (usize, String)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or((1, "missing header".to_string()))?;
    let fields: Vec<&str> = header
        .strip_prefix('#')
        .ok_or((1, "header must start with '#'".to_string()))?
        .split_whitespace()
        .collect();
    if fields.len() != 4 {
        return Err((1, "header must be `# W H C gamma`".into()));
    }
    let bad = |what: &str| (1, format!("bad {what} in header"));
    let width: usize = fields[0].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[1].parse().map_err(|_| bad("height"))?;
    let threshold: f64 = fields[2].parse().map_err(|_| bad("threshold"))?;
    let gamma: f64 = fields[3].parse().map_err(|_| bad("gamma"))?;

    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let mut it = line.split_whitespace();
        let mut next = |what: &str| it.next().ok_or((lineno, format!("missing {what}")));
        let t: f64 = next("t")?.parse().map_err(|_| (lineno, "bad t".to_string()))?;
        let x: u32 = next("x")?.parse().map_err(|_| (lineno, "bad x".to_string()))?;
        let y: u32 = next("y")?.parse().map_err(|_| (lineno, "bad y".to_string()))?;
        let p: i8 = next("p")?.parse().map_err(|_| (lineno, "bad p".to_string()))?;
        if p != 1 && p != -1 {
            return Err((lineno, format!("polarity must be -1 or 1, got {p}")));
        }
        if x as usize >= width || y as usize >= height {
            return Err((lineno, "event outside sensor".into()));
        }
        events.push(Event { x, y, t, p });
    }
    let t_start = events.first().map_or(0.0, |e| e.t);
    let t_end = events.last().map_or(0.0, |e| e.t);
    let stream = EventStream {
        events,
        width,
        height,
        threshold,
        gamma,
        t_start,
        t_end,
    };
    stream.validate().map_err(|e| (0, e.to_string()))?;
    Ok(stream)
}

/// Simulator settings, serialised with the simulator's own key names and
/// string-valued entries (`"Resolution": "260, 346"` is height, width).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatorConfig {
    pub width: usize,
    pub height: usize,
    pub bg_val: f64,
    pub threshold: f64,
    pub gamma: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            width: 346,
            height: 260,
            bg_val: 159.0 / 255.0,
            threshold: 0.2,
            gamma: 2.2,
        }
    }
}

impl SimulatorConfig {
    pub fn to_json(&self) -> Value {
        json!({
            "Resolution": format!("{}, {}", self.height, self.width),
            "bg_val": format_fraction(self.bg_val),
            "THR": self.threshold.to_string(),
            "gamma": self.gamma.to_string(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let mut cfg = Self::default();
        let get = |key: &str| -> Option<String> {
            v.get(key).map(|x| match x {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        };
        if let Some(res) = get("Resolution") {
            let parts: Vec<&str> = res.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::invalid(format!("Resolution: expected \"H, W\", got {res:?}")));
            }
            cfg.height = parts[0]
                .parse()
                .map_err(|_| Error::invalid(format!("Resolution: bad height {:?}", parts[0])))?;
            cfg.width = parts[1]
                .parse()
                .map_err(|_| Error::invalid(format!("Resolution: bad width {:?}", parts[1])))?;
        }
        if let Some(s) = get("bg_val") {
            cfg.bg_val = parse_fraction(&s)
                .ok_or_else(|| Error::invalid(format!("bg_val: cannot parse {s:?}")))?;
        }
        if let Some(s) = get("THR") {
            cfg.threshold = parse_fraction(&s)
                .ok_or_else(|| Error::invalid(format!("THR: cannot parse {s:?}")))?;
        }
        if let Some(s) = get("gamma") {
            cfg.gamma = parse_fraction(&s)
                .ok_or_else(|| Error::invalid(format!("gamma: cannot parse {s:?}")))?;
        }
        if cfg.width == 0 || cfg.height == 0 || !(cfg.threshold > 0.0) || !(cfg.gamma > 0.0) {
            return Err(Error::invalid("simulator config has non-positive entries"));
        }
        Ok(cfg)
    }
}

/// Parses `a` or `a/b`.
pub fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then(|| a / b)
        }
        None => s.trim().parse().ok(),
    }
}

fn format_fraction(v: f64) -> String {
    let scaled = v * 255.0;
    if (scaled - scaled.round()).abs() < 1e-9 {
        format!("{:.1}/255.0", scaled.round())
    } else {
        v.to_string()
    }
}
