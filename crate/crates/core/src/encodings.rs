//! Input encodings: sinusoidal positional encoding with coarse-to-fine
//! band annealing, and a degree-4 (16 coefficient) real spherical harmonics
//! basis for view directions.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Band annealing schedule for the positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    /// Bands active from the first iteration.
    pub min_bands: u32,
    /// Bands active once annealing completes.
    pub max_bands: u32,
    /// Annealing duration in iterations.
    pub duration: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            min_bands: 0,
            max_bands: 9,
            duration: 30_000,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.min_bands > self.max_bands {
            return Err(Error::invalid("anneal: min_bands exceeds max_bands"));
        }
        if self.duration == 0 {
            return Err(Error::invalid("anneal: duration must be positive"));
        }
        Ok(())
    }

    /// A schedule with every band permanently on.
    pub fn disabled(bands: u32) -> Self {
        Self {
            min_bands: bands,
            max_bands: bands,
            duration: 1,
        }
    }

    /// Weights for bands `0..num_bands` at `iteration`.
    pub fn coefficients(&self, num_bands: usize, iteration: u64) -> Vec<f64> {
        (0..num_bands)
            .map(|k| anneal_coeff(k, iteration, self))
            .collect()
    }
}

/// Weight of band `k` at iteration `n`:
/// `0.5 * (1 - cos(pi * clamp(a(n) - k + min_bands, 0, 1)))` with
/// `a(n) = (max_bands - min_bands) * n / duration`.
pub fn anneal_coeff(k: usize, n: u64, sched: &AnnealSchedule) -> f64 {
    let progress = f64::from(sched.max_bands - sched.min_bands) * n as f64 / sched.duration as f64;
    let x = (progress - k as f64 + f64::from(sched.min_bands)).clamp(0.0, 1.0);
    0.5 * (1.0 - (PI * x).cos())
}

/// Sinusoidal encoding `[x, sin(2^k pi x), cos(2^k pi x), ...]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PosEncoding {
    pub num_bands: usize,
    pub include_input: bool,
}

impl PosEncoding {
    pub fn new(num_bands: usize) -> Self {
        Self {
            num_bands,
            include_input: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        6 * self.num_bands + if self.include_input { 3 } else { 0 }
    }

    fn check(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.num_bands {
            return Err(Error::shape(
                format!("{} band coefficients", self.num_bands),
                coeffs.len(),
            ));
        }
        Ok(())
    }

    /// Writes the encoding of `x` into `out` (length [`Self::output_dim`]).
    /// When `jac` is given, also writes `d out / d x_axis` for each axis.
    pub fn encode_into(
        &self,
        x: [f64; 3],
        coeffs: &[f64],
        out: &mut [f64],
        mut jac: Option<[&mut [f64]; 3]>,
    ) {
        let mut o = 0;
        if let Some(j) = jac.as_mut() {
            for axis in 0..3 {
                j[axis].fill(0.0);
            }
        }
        if self.include_input {
            out[..3].copy_from_slice(&x);
            if let Some(j) = jac.as_mut() {
                for axis in 0..3 {
                    j[axis][axis] = 1.0;
                }
            }
            o = 3;
        }
        for (k, &beta) in coeffs.iter().enumerate() {
            let freq = (1u64 << k) as f64 * PI;
            for axis in 0..3 {
                let (s, c) = (freq * x[axis]).sin_cos();
                out[o + axis] = beta * s;
                out[o + 3 + axis] = beta * c;
                if let Some(j) = jac.as_mut() {
                    j[axis][o + axis] = beta * freq * c;
                    j[axis][o + 3 + axis] = -beta * freq * s;
                }
            }
            o += 6;
        }
    }
}

/// Encodes a single point.
pub fn pos_encode(x: [f64; 3], enc: &PosEncoding, coeffs: &[f64]) -> Result<Vec<f64>> {
    enc.check(coeffs)?;
    let mut out = vec![0.0; enc.output_dim()];
    enc.encode_into(x, coeffs, &mut out, None);
    Ok(out)
}

/// Jacobian of [`pos_encode`], one row per input axis.
pub fn pos_encode_jacobian(x: [f64; 3], enc: &PosEncoding, coeffs: &[f64]) -> Result<[Vec<f64>; 3]> {
    enc.check(coeffs)?;
    let dim = enc.output_dim();
    let mut out = vec![0.0; dim];
    let mut jx = vec![0.0; dim];
    let mut jy = vec![0.0; dim];
    let mut jz = vec![0.0; dim];
    enc.encode_into(x, coeffs, &mut out, Some([&mut jx, &mut jy, &mut jz]));
    Ok([jx, jy, jz])
}

pub const SH_DEGREE: usize = 4;
pub const SH_DIM: usize = SH_DEGREE * SH_DEGREE;

/// Real spherical harmonics `Y_l^m` for `l = 0..3`, `m = -l..l`, ordered by
/// `(l, m)`, without the Condon–Shortley phase.
pub fn sh_encode(d: [f64; 3]) -> Result<[f64; SH_DIM]> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::invalid(format!("direction must be unit length, |d| = {norm}")));
    }
    Ok(sh_basis(d))
}

/// [`sh_encode`] without the unit-length check.
pub fn sh_basis(d: [f64; 3]) -> [f64; SH_DIM] {
    const C0: f64 = 0.282_094_791_773_878_14;
    const C1: f64 = 0.488_602_511_902_919_9;
    const C2A: f64 = 1.092_548_430_592_079_2;
    const C2B: f64 = 0.315_391_565_252_520_05;
    const C2C: f64 = 0.546_274_215_296_039_6;
    const C3A: f64 = 0.590_043_589_926_643_5;
    const C3B: f64 = 2.890_611_442_640_554;
    const C3C: f64 = 0.457_045_799_464_465_8;
    const C3D: f64 = 0.373_176_332_590_115_4;
    const C3E: f64 = 1.445_305_721_320_277;

    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2A * x * y,
        C2A * y * z,
        C2B * (3.0 * zz - 1.0),
        C2A * x * z,
        C2C * (xx - yy),
        C3A * y * (3.0 * xx - yy),
        C3B * x * y * z,
        C3C * y * (5.0 * zz - 1.0),
        C3D * z * (5.0 * zz - 3.0),
        C3C * x * (5.0 * zz - 1.0),
        C3E * z * (xx - yy),
        C3A * x * (xx - 3.0 * yy),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_boundaries() {
        let s = AnnealSchedule {
            min_bands: 2,
            max_bands: 8,
            duration: 30_000,
        };
        assert_eq!(anneal_coeff(0, 0, &s), 1.0);
        assert_eq!(anneal_coeff(1, 0, &s), 1.0);
        assert_eq!(anneal_coeff(2, 0, &s), 0.0);
        assert_eq!(anneal_coeff(7, 0, &s), 0.0);
        for k in 0..8 {
            assert_eq!(anneal_coeff(k, 30_000, &s), 1.0, "band {k}");
        }
        // halfway through the first annealed band
        let n = 30_000 / 12;
        assert!((anneal_coeff(2, n, &s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn anneal_validation() {
        assert!(AnnealSchedule { min_bands: 3, max_bands: 2, duration: 1 }.validate().is_err());
        assert!(AnnealSchedule { min_bands: 0, max_bands: 2, duration: 0 }.validate().is_err());
        assert!(AnnealSchedule::default().validate().is_ok());
    }

    #[test]
    fn pos_encode_origin_and_zero_weights() {
        let enc = PosEncoding::new(4);
        let v = pos_encode([0.0; 3], &enc, &[1.0; 4]).unwrap();
        assert_eq!(v.len(), 3 + 24);
        for k in 0..4 {
            let o = 3 + 6 * k;
            assert_eq!(&v[o..o + 3], &[0.0; 3]);
            assert_eq!(&v[o + 3..o + 6], &[1.0; 3]);
        }
        let x = [0.3, -0.2, 0.7];
        let v = pos_encode(x, &enc, &[0.0; 4]).unwrap();
        assert_eq!(&v[..3], &x);
        assert!(v[3..].iter().all(|c| *c == 0.0));
    }

    #[test]
    fn pos_encode_quarter_period() {
        let enc = PosEncoding::new(2);
        let v = pos_encode([0.25, 0.0, 0.0], &enc, &[1.0, 1.0]).unwrap();
        // band 1, first axis sine slot: sin(2 * pi * 0.25)
        assert!((v[3 + 6] - 1.0).abs() < 1e-15);
        assert!(pos_encode([0.0; 3], &enc, &[1.0]).is_err());
    }

    #[test]
    fn sh_constant_term_and_pole() {
        let y = sh_encode([0.0, 0.0, 1.0]).unwrap();
        assert!((y[0] - 0.282_094_8).abs() < 1e-7);
        assert!((y[0] - 0.5 / PI.sqrt()).abs() < 1e-15);
        // m != 0 slots for l = 1..3
        for i in [1, 3, 4, 5, 7, 8, 9, 10, 11, 13, 14, 15] {
            assert_eq!(y[i], 0.0, "component {i}");
        }
        assert!(sh_encode([1.0, 1.0, 0.0]).is_err());
    }
}
