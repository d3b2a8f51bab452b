//! Signed distance and radiance networks.
//!
//! The SDF network maps an annealed positional encoding of `x` to a signed
//! distance and a geometric feature vector. Its spatial gradient is carried
//! alongside the forward pass as three stacked tangent rows, which keeps it
//! differentiable with respect to the weights (normals feed the radiance
//! network, and the Eikonal term penalises its norm).

pub mod checkpoint;
pub mod graph;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encodings::{sh_basis, PosEncoding, SH_DIM};
use crate::error::{Error, Result};
use graph::{Graph, Tensor, Var};

/// Network shapes and initialisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub sdf_layers: usize,
    pub sdf_width: usize,
    /// Hidden layer whose input is concatenated with the encoded point.
    pub skip_layer: usize,
    pub softplus_beta: f64,
    pub feature_dim: usize,
    /// Positional bands on the SDF input (annealed).
    pub sdf_bands: usize,
    /// Positional bands on the radiance input (fixed).
    pub radiance_bands: usize,
    pub radiance_layers: usize,
    pub radiance_width: usize,
    /// Radius of the sphere the SDF network starts as.
    pub init_radius: f64,
    /// Initial `1/s` of the sigmoid sharpness.
    pub init_inv_s: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            sdf_layers: 8,
            sdf_width: 256,
            skip_layer: 4,
            softplus_beta: 100.0,
            feature_dim: 256,
            sdf_bands: 9,
            radiance_bands: 8,
            radiance_layers: 4,
            radiance_width: 256,
            init_radius: 0.5,
            init_inv_s: 0.3,
        }
    }
}

impl FieldConfig {
    /// A reduced network for single-core desk runs.
    pub fn desk() -> Self {
        Self {
            sdf_layers: 4,
            sdf_width: 64,
            skip_layer: 2,
            feature_dim: 32,
            sdf_bands: 6,
            radiance_bands: 4,
            radiance_layers: 2,
            radiance_width: 64,
            init_inv_s: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sdf_layers == 0 || self.sdf_width == 0 || self.radiance_layers == 0 || self.radiance_width == 0 {
            return Err(Error::invalid("network depth and width must be positive"));
        }
        if self.skip_layer >= self.sdf_layers {
            return Err(Error::invalid("skip_layer must index a hidden layer"));
        }
        if !(self.softplus_beta > 0.0) || !(self.init_inv_s > 0.0) || !(self.init_radius > 0.0) {
            return Err(Error::invalid("softplus_beta, init_inv_s and init_radius must be positive"));
        }
        Ok(())
    }

    pub fn sdf_encoding(&self) -> PosEncoding {
        PosEncoding::new(self.sdf_bands)
    }

    pub fn radiance_encoding(&self) -> PosEncoding {
        PosEncoding::new(self.radiance_bands)
    }

    fn radiance_input_dim(&self) -> usize {
        self.radiance_encoding().output_dim() + 3 + self.feature_dim + SH_DIM
    }
}

/// Named parameter tensors plus the layout needed to run both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Indices into [`FieldParams::tensors`].
const LOG_S: usize = 0;

impl FieldParams {
    /// Sphere-initialised SDF network, fan-in uniform radiance network.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = vec!["log_s".to_string()];
        let mut tensors = vec![Array2::from_elem((1, 1), (1.0 / config.init_inv_s).ln())];

        let d_in = config.sdf_encoding().output_dim();
        let w = config.sdf_width;
        let last = config.sdf_layers;
        for l in 0..=last {
            let in_dim = match l {
                0 => d_in,
                l if l == config.skip_layer => w + d_in,
                _ => w,
            };
            let out_dim = if l == last { 1 + config.feature_dim } else { w };
            let (weight, bias) = geometric_init(l, last, in_dim, out_dim, d_in, &config, &mut rng);
            names.push(format!("sdf.{l}.weight"));
            tensors.push(weight);
            names.push(format!("sdf.{l}.bias"));
            tensors.push(bias);
        }

        let mut in_dim = config.radiance_input_dim();
        for l in 0..=config.radiance_layers {
            let out_dim = if l == config.radiance_layers { 3 } else { config.radiance_width };
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.gen_range(-bound..bound));
            let bias = Array2::from_shape_simple_fn((1, out_dim), || rng.gen_range(-bound..bound));
            names.push(format!("rgb.{l}.weight"));
            tensors.push(weight);
            names.push(format!("rgb.{l}.bias"));
            tensors.push(bias);
            in_dim = out_dim;
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.dim()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Sigmoid sharpness `s`, always positive.
    pub fn sharpness(&self) -> f64 {
        self.tensors[LOG_S][[0, 0]].exp()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn sdf_weight(&self, l: usize) -> usize {
        1 + 2 * l
    }

    fn rgb_weight(&self, l: usize) -> usize {
        1 + 2 * (self.config.sdf_layers + 1) + 2 * l
    }

    /// Places every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(i, t.clone()))
                .collect(),
        }
    }

    /// Places every tensor on `g` as a constant (evaluation only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// SDF network forward on a batch of points. With `with_gradient`, also
    /// returns `∇φ` as an `n×3` node.
    pub fn sdf_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        points: &[[f64; 3]],
        coeffs: &[f64],
        with_gradient: bool,
    ) -> Result<SdfNodes> {
        let enc = self.config.sdf_encoding();
        if coeffs.len() != enc.num_bands {
            return Err(Error::shape(format!("{} band coefficients", enc.num_bands), coeffs.len()));
        }
        if let Some(bad) = points.iter().find(|x| x.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite query point {bad:?}")));
        }
        let n = points.len();
        let dim = enc.output_dim();
        let mut input = Array2::zeros((n, dim));
        // rows [0, n) hold d/dx, [n, 2n) d/dy, [2n, 3n) d/dz
        let jac_rows = if with_gradient { 3 * n } else { 0 };
        let mut jac = Array2::zeros((jac_rows, dim));
        {
            let (mut jx, rest) = jac.view_mut().split_at(Axis(0), n.min(jac_rows));
            let (mut jy, mut jz) = rest.split_at(Axis(0), n.min(jac_rows.saturating_sub(n)));
            for (i, x) in points.iter().enumerate() {
                let out = input.row_mut(i).into_slice().unwrap();
                if with_gradient {
                    let j = [
                        jx.row_mut(i).into_slice().unwrap(),
                        jy.row_mut(i).into_slice().unwrap(),
                        jz.row_mut(i).into_slice().unwrap(),
                    ];
                    enc.encode_into(*x, coeffs, out, Some(j));
                } else {
                    enc.encode_into(*x, coeffs, out, None);
                }
            }
        }

        let beta = self.config.softplus_beta;
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let x_in = g.constant(input);
        let j_in = with_gradient.then(|| g.constant(jac));
        let mut h = x_in;
        let mut t = j_in;
        for l in 0..self.config.sdf_layers {
            if l == self.config.skip_layer && l > 0 {
                let cat = g.concat(&[h, x_in]);
                h = g.scale(cat, inv_sqrt2);
                if let (Some(tv), Some(jv)) = (t, j_in) {
                    let cat = g.concat(&[tv, jv]);
                    t = Some(g.scale(cat, inv_sqrt2));
                }
            }
            let w = p.vars[self.sdf_weight(l)];
            let b = p.vars[self.sdf_weight(l) + 1];
            let z = g.matmul_t(h, w);
            let z = g.add_row(z, b);
            if let Some(tv) = t {
                let tz = g.matmul_t(tv, w);
                let slope = g.sigmoid_scaled(z, beta);
                let slope = g.tile_rows(slope, 3);
                t = Some(g.mul(slope, tz));
            }
            h = g.softplus(z, beta);
        }
        let last = self.config.sdf_layers;
        let w = p.vars[self.sdf_weight(last)];
        let b = p.vars[self.sdf_weight(last) + 1];
        let out = g.matmul_t(h, w);
        let out = g.add_row(out, b);
        let value = g.cols(out, 0, 1);
        let feature = g.cols(out, 1, self.config.feature_dim);
        let gradient = t.map(|tv| {
            let w0 = g.rows(w, 0, 1);
            let gz = g.matmul_t(tv, w0);
            g.unstack_rows(gz, 3)
        });
        Ok(SdfNodes {
            value,
            feature,
            gradient,
        })
    }

    /// Radiance network forward. `normals` is `n×3`, `feature` is `n×F`.
    pub fn radiance_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
        normals: Var,
        feature: Var,
    ) -> Result<Var> {
        if points.len() != dirs.len() {
            return Err(Error::shape(points.len(), dirs.len()));
        }
        let enc = self.config.radiance_encoding();
        let n = points.len();
        let coeffs = vec![1.0; enc.num_bands];
        let mut pe = Array2::zeros((n, enc.output_dim()));
        let mut sh = Array2::zeros((n, SH_DIM));
        for i in 0..n {
            let d = dirs[i];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::invalid(format!("view direction not unit length: |d| = {norm}")));
            }
            enc.encode_into(points[i], &coeffs, pe.row_mut(i).into_slice().unwrap(), None);
            sh.row_mut(i).assign(&ndarray::ArrayView1::from(&sh_basis(d)));
        }
        let pe = g.constant(pe);
        let sh = g.constant(sh);
        let mut h = g.concat(&[pe, normals, feature, sh]);
        for l in 0..=self.config.radiance_layers {
            let w = p.vars[self.rgb_weight(l)];
            let b = p.vars[self.rgb_weight(l) + 1];
            let z = g.matmul_t(h, w);
            let z = g.add_row(z, b);
            h = if l == self.config.radiance_layers { g.sigmoid(z) } else { g.relu(z) };
        }
        Ok(h)
    }

    pub fn log_s_var(&self, p: &Bound) -> Var {
        p.vars[LOG_S]
    }

    /// Network indices of the skip-connection weight columns fed by the
    /// encoded input.
    pub fn skip_weight_index(&self) -> Option<usize> {
        (self.config.skip_layer > 0).then(|| self.sdf_weight(self.config.skip_layer))
    }
}

fn geometric_init(
    l: usize,
    last: usize,
    in_dim: usize,
    out_dim: usize,
    d_in: usize,
    cfg: &FieldConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    if l == last {
        let mean = std::f64::consts::PI.sqrt() / (in_dim as f64).sqrt();
        let dist = Normal::new(mean, 1e-4).unwrap();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
        let bias = Array2::from_elem((1, out_dim), -cfg.init_radius);
        return (weight, bias);
    }
    let dist = Normal::new(0.0, 2f64.sqrt() / (out_dim as f64).sqrt()).unwrap();
    let mut weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
    if l == 0 {
        // only the raw coordinates drive the first layer
        weight.slice_mut(ndarray::s![.., 3..]).fill(0.0);
    } else if l == cfg.skip_layer {
        let w = cfg.sdf_width;
        weight.slice_mut(ndarray::s![.., w + 3..w + d_in]).fill(0.0);
    }
    (weight, Array2::zeros((1, out_dim)))
}

/// Parameters placed on a graph, in [`FieldParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct SdfNodes {
    pub value: Var,
    pub feature: Var,
    pub gradient: Option<Var>,
}

/// Result of a single-point SDF query.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfEval {
    pub value: f64,
    pub feature: Vec<f64>,
    pub gradient: [f64; 3],
}

/// Evaluates the SDF network and its spatial gradient at `x`.
pub fn sdf_eval(x: [f64; 3], params: &FieldParams, anneal_coeffs: &[f64]) -> Result<SdfEval> {
    Ok(sdf_eval_batch(&[x], params, anneal_coeffs)?.remove(0))
}

pub fn sdf_eval_batch(points: &[[f64; 3]], params: &FieldParams, anneal_coeffs: &[f64]) -> Result<Vec<SdfEval>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let nodes = params.sdf_forward(&mut g, &p, points, anneal_coeffs, true)?;
    let v = g.value(nodes.value);
    let f = g.value(nodes.feature);
    let gr = g.value(nodes.gradient.unwrap());
    Ok((0..points.len())
        .map(|i| SdfEval {
            value: v[[i, 0]],
            feature: f.row(i).to_vec(),
            gradient: [gr[[i, 0]], gr[[i, 1]], gr[[i, 2]]],
        })
        .collect())
}

/// SDF values only, in chunks.
pub fn sdf_values(points: &[[f64; 3]], params: &FieldParams, anneal_coeffs: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(4096) {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let nodes = params.sdf_forward(&mut g, &p, chunk, anneal_coeffs, false)?;
        out.extend(g.value(nodes.value).column(0).iter().copied());
    }
    Ok(out)
}

/// View-dependent colour at `x`. `feature` and `normal` come from a matching
/// [`sdf_eval`].
pub fn radiance_eval(
    x: [f64; 3],
    d: [f64; 3],
    normal: [f64; 3],
    feature: &[f64],
    params: &FieldParams,
) -> Result<[f64; 3]> {
    Ok(radiance_eval_batch(&[x], &[d], &[normal], &[feature.to_vec()], params)?[0])
}

pub fn radiance_eval_batch(
    points: &[[f64; 3]],
    dirs: &[[f64; 3]],
    normals: &[[f64; 3]],
    features: &[Vec<f64>],
    params: &FieldParams,
) -> Result<Vec<[f64; 3]>> {
    let n = points.len();
    let fdim = params.config.feature_dim;
    if normals.len() != n || features.len() != n {
        return Err(Error::shape(n, normals.len().min(features.len())));
    }
    if let Some(f) = features.iter().find(|f| f.len() != fdim) {
        return Err(Error::shape(fdim, f.len()));
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let nm = Array2::from_shape_fn((n, 3), |(i, j)| normals[i][j]);
    let ft = Array2::from_shape_fn((n, fdim), |(i, j)| features[i][j]);
    let nm = g.constant(nm);
    let ft = g.constant(ft);
    let rgb = params.radiance_forward(&mut g, &p, points, dirs, nm, ft)?;
    let v = g.value(rgb);
    Ok((0..n).map(|i| [v[[i, 0]], v[[i, 1]], v[[i, 2]]]).collect())
}

/// A scalar field that can stand in for the SDF network.
pub trait SdfField {
    fn sdf_batch(&self, points: &[[f64; 3]]) -> Vec<f64>;

    fn sdf(&self, p: [f64; 3]) -> f64 {
        self.sdf_batch(&[p])[0]
    }

    /// Spatial gradient; central differences unless overridden.
    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-5;
        let mut pts = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut a = p;
            let mut b = p;
            a[axis] += h;
            b[axis] -= h;
            pts.push(a);
            pts.push(b);
        }
        let v = self.sdf_batch(&pts);
        [(v[0] - v[1]) / (2.0 * h), (v[2] - v[3]) / (2.0 * h), (v[4] - v[5]) / (2.0 * h)]
    }
}

/// The SDF network at fixed annealing weights.
#[derive(Debug, Clone, Copy)]
pub struct NetworkField<'a> {
    pub params: &'a FieldParams,
    pub coeffs: &'a [f64],
}

impl SdfField for NetworkField<'_> {
    fn sdf_batch(&self, points: &[[f64; 3]]) -> Vec<f64> {
        sdf_values(points, self.params, self.coeffs).expect("network SDF query")
    }

    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        sdf_eval(p, self.params, self.coeffs).expect("network SDF query").gradient
    }
}

/// Closure-backed field.
pub struct FnField<F>(pub F);

impl<F: Fn([f64; 3]) -> f64> SdfField for FnField<F> {
    fn sdf_batch(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().map(|p| (self.0)(*p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FieldParams {
        FieldParams::new(
            FieldConfig {
                sdf_width: 32,
                feature_dim: 8,
                radiance_width: 16,
                ..FieldConfig::desk()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn sphere_initialisation_sign() {
        let p = small();
        let coeffs = vec![1.0; p.config.sdf_bands];
        let centre = sdf_eval([0.0; 3], &p, &coeffs).unwrap();
        assert!(centre.value < 0.0, "origin should be inside, got {}", centre.value);
        let out = sdf_eval([0.0, 0.0, 3.0], &p, &coeffs).unwrap();
        assert!(out.value > 0.0);
    }

    #[test]
    fn wide_network_starts_near_the_init_sphere() {
        // narrow layers give a lumpy sphere, the default width a round one
        let p = FieldParams::new(FieldConfig::default(), 11).unwrap();
        let coeffs = vec![1.0; p.config.sdf_bands];
        let dirs: Vec<[f64; 3]> = (0..32)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / 32.0;
                let phi = i as f64 * 2.399_963;
                let r = (1.0 - z * z).sqrt();
                [0.9 * r * phi.cos(), 0.9 * r * phi.sin(), 0.9 * z]
            })
            .collect();
        let vals = sdf_values(&dirs, &p, &coeffs).unwrap();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 0.4).abs() < 0.15, "{mean}");
    }

    #[test]
    fn sharpness_is_inverse_of_init() {
        let p = small();
        assert!((1.0 / p.sharpness() - p.config.init_inv_s).abs() < 1e-12);
        assert_eq!(FieldConfig::default().init_inv_s, 0.3);
    }

    #[test]
    fn rejects_bad_queries() {
        let p = small();
        let coeffs = vec![1.0; p.config.sdf_bands];
        assert!(sdf_eval([f64::NAN, 0.0, 0.0], &p, &coeffs).is_err());
        assert!(sdf_eval([0.0; 3], &p, &coeffs[1..]).is_err());
        let e = sdf_eval([0.1; 3], &p, &coeffs).unwrap();
        assert!(radiance_eval([0.1; 3], [1.0, 1.0, 0.0], e.gradient, &e.feature, &p).is_err());
        assert!(radiance_eval([0.1; 3], [1.0, 0.0, 0.0], e.gradient, &e.feature[1..], &p).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = FieldConfig::desk();
        c.skip_layer = c.sdf_layers;
        assert!(FieldParams::new(c, 0).is_err());
        let mut c = FieldConfig::desk();
        c.init_inv_s = 0.0;
        assert!(c.validate().is_err());
    }
}
