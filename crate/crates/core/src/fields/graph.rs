//! A small tape-based reverse-mode differentiation engine over dense 2-D
//! tensors. Rows are batch items.
//!
//! Every operation is recorded on a [`Graph`] with its value; [`Graph::backward`]
//! walks the tape once in reverse. Spatial derivatives of a network are built
//! as ordinary forward operations (tangent propagation), so losses that depend
//! on them are differentiated with respect to parameters by the same pass.

use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Background-composited volume rendering over ray segments.
#[derive(Debug, Clone)]
pub struct CompositeSpec {
    /// Sample index range per ray. Consecutive samples form the intervals.
    pub rays: Vec<Range<usize>>,
    pub background: [f64; 3],
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softplus(Var, f64),
    SigmoidScaled(Var, f64),
    Relu(Var),
    Log(Var, f64),
    Powf(Var, f64),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Cols(Var, usize, usize),
    Rows(Var, usize, usize),
    RowSum(Var),
    TileRows(Var, usize),
    UnstackRows(Var, usize),
    Sum(Var),
    Composite(Var, Var, Var, Box<CompositeSpec>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large negative `x`.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -softplus_unit(-x)
}

/// `ln(1 + e^x)`.
#[inline]
fn softplus_unit(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Forward pass of volume compositing for one ray.
///
/// Returns per-interval alphas and the composited colour. Alphas follow
/// `max((P_i - P_{i+1}) / P_i, 0)` with `P = sigmoid(s * sdf)`, evaluated in
/// the log domain for stability.
pub(crate) fn ray_alphas(sdf: &[f64], s: f64) -> Vec<f64> {
    sdf.windows(2)
        .map(|w| {
            let ratio = (log_sigmoid(s * w[1]) - log_sigmoid(s * w[0])).exp();
            (1.0 - ratio).max(0.0)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf. `id` indexes the gradient vector from [`Self::backward`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    /// `a · wᵀ` with `a: n×k`, `w: m×k`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a).dot(&self.value(w).t());
        self.push(v, Op::MatMulT(a, w))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// `ln(1 + e^{beta a}) / beta`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).mapv(|z| softplus_unit(beta * z) / beta);
        self.push(v, Op::Softplus(a, beta))
    }

    /// `sigmoid(beta a)`, the derivative of [`Self::softplus`].
    pub fn sigmoid_scaled(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).mapv(|z| sigmoid(beta * z));
        self.push(v, Op::SigmoidScaled(a, beta))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.sigmoid_scaled(a, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| z.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `ln(max(a, floor))`.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|z| z.max(floor).ln());
        self.push(v, Op::Log(a, floor))
    }

    /// `max(a, 0)^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|z| z.max(0.0).powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| z.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|z| z * z);
        self.push(v, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Cols(a, start, len))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::Rows(a, start, len))
    }

    /// Sum over columns, giving `n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Stacks `k` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let views: Vec<_> = (0..k).map(|_| av.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("tile_rows");
        self.push(v, Op::TileRows(a, k))
    }

    /// Splits `a` (`k·n × c`) into `k` row blocks and lays them side by side
    /// (`n × k·c`).
    pub fn unstack_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let n = av.nrows() / k;
        assert_eq!(n * k, av.nrows(), "unstack_rows: rows not divisible by {k}");
        let blocks: Vec<_> = (0..k).map(|b| av.slice(s![b * n..(b + 1) * n, ..])).collect();
        let v = ndarray::concatenate(Axis(1), &blocks).expect("unstack_rows");
        self.push(v, Op::UnstackRows(a, k))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Volume-renders `rays.len()` pixels from per-sample SDF (`n×1`), colour
    /// (`n×3`) and the log sharpness (`1×1`). Interval `i` of a ray uses the
    /// colour of its first sample; residual transmittance picks up the
    /// background.
    pub fn composite(&mut self, sdf: Var, rgb: Var, log_s: Var, spec: CompositeSpec) -> Var {
        let s = self.scalar(log_s).exp();
        let sdf_v = self.value(sdf);
        let rgb_v = self.value(rgb);
        let mut out = Array2::zeros((spec.rays.len(), 3));
        for (r, range) in spec.rays.iter().enumerate() {
            let f: Vec<f64> = range.clone().map(|i| sdf_v[[i, 0]]).collect();
            let alphas = ray_alphas(&f, s);
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            for (j, a) in alphas.iter().enumerate() {
                let w = trans * a;
                for c in 0..3 {
                    acc[c] += w * rgb_v[[range.start + j, c]];
                }
                trans *= 1.0 - a;
            }
            for c in 0..3 {
                out[[r, c]] = acc[c] + trans * spec.background[c];
            }
        }
        self.push(out, Op::Composite(sdf, rgb, log_s, Box::new(spec)))
    }

    /// Reverse pass from the `1×1` node `loss`. Returns one gradient per
    /// parameter id in `0..num_params`, shaped like `param_shapes`; parameters
    /// the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, param_shapes: &[(usize, usize)]) -> Vec<Tensor> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: Vec<Tensor> = param_shapes.iter().map(|&s| Array2::zeros(s)).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[*id] += &g,
                Op::MatMulT(a, w) => {
                    if self.nodes[a.0].needs_grad {
                        send(*a, g.dot(self.value(*w)), &mut grads);
                    }
                    if self.nodes[w.0].needs_grad {
                        send(*w, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[row.0].needs_grad {
                        send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        send(*b, -&g, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, c) => send(*a, g * *c, &mut grads),
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::Softplus(a, beta) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &z| *d *= sigmoid(beta * z));
                    send(*a, d, &mut grads);
                }
                Op::SigmoidScaled(a, beta) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= beta * y * (1.0 - y));
                    send(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &z| {
                            if z <= 0.0 {
                                *d = 0.0
                            }
                        });
                    send(*a, d, &mut grads);
                }
                Op::Log(a, floor) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &z| {
                        *d = if z > *floor { *d / z } else { 0.0 };
                    });
                    send(*a, d, &mut grads);
                }
                Op::Powf(a, p) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &z| {
                        *d = if z > 0.0 { *d * p * z.powf(p - 1.0) } else { 0.0 };
                    });
                    send(*a, d, &mut grads);
                }
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 };
                    });
                    send(*a, d, &mut grads);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &z| *d *= 2.0 * z);
                    send(*a, d, &mut grads);
                }
                Op::Exp(a) => send(*a, g * &node.value, &mut grads),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.nodes[p.0].needs_grad {
                            send(*p, g.slice(s![.., start..start + w]).to_owned(), &mut grads);
                        }
                        start += w;
                    }
                }
                Op::Cols(a, start, len) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    send(*a, d, &mut grads);
                }
                Op::Rows(a, start, len) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    send(*a, d, &mut grads);
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).ncols();
                    let d = g.broadcast((g.nrows(), cols)).unwrap().to_owned();
                    send(*a, d, &mut grads);
                }
                Op::TileRows(a, k) => {
                    let n = self.value(*a).nrows();
                    let mut d = g.slice(s![0..n, ..]).to_owned();
                    for b in 1..*k {
                        d += &g.slice(s![b * n..(b + 1) * n, ..]);
                    }
                    send(*a, d, &mut grads);
                }
                Op::UnstackRows(a, k) => {
                    let c = self.value(*a).ncols();
                    let blocks: Vec<_> = (0..*k).map(|b| g.slice(s![.., b * c..(b + 1) * c])).collect();
                    let d = ndarray::concatenate(Axis(0), &blocks).unwrap();
                    send(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    send(*a, d, &mut grads);
                }
                Op::Composite(sdf, rgb, log_s, spec) => {
                    let (d_sdf, d_rgb, d_log_s) = self.composite_backward(*sdf, *rgb, *log_s, spec, &g);
                    if self.nodes[sdf.0].needs_grad {
                        send(*sdf, d_sdf, &mut grads);
                    }
                    if self.nodes[rgb.0].needs_grad {
                        send(*rgb, d_rgb, &mut grads);
                    }
                    if self.nodes[log_s.0].needs_grad {
                        send(*log_s, Array2::from_elem((1, 1), d_log_s), &mut grads);
                    }
                }
            }
        }
        out
    }

    fn composite_backward(
        &self,
        sdf: Var,
        rgb: Var,
        log_s: Var,
        spec: &CompositeSpec,
        g: &Tensor,
    ) -> (Tensor, Tensor, f64) {
        let s = self.scalar(log_s).exp();
        let sdf_v = self.value(sdf);
        let rgb_v = self.value(rgb);
        let mut d_sdf = Array2::zeros(sdf_v.raw_dim());
        let mut d_rgb = Array2::zeros(rgb_v.raw_dim());
        let mut d_s = 0.0;

        for (r, range) in spec.rays.iter().enumerate() {
            let n = range.len();
            if n < 2 {
                continue;
            }
            let f: Vec<f64> = range.clone().map(|i| sdf_v[[i, 0]]).collect();
            let alphas = ray_alphas(&f, s);
            let m = alphas.len();
            // trans[i]: transmittance before interval i
            let mut trans = vec![1.0; m + 1];
            for i in 0..m {
                trans[i + 1] = trans[i] * (1.0 - alphas[i]);
            }
            // rest[i]: colour composited from interval i onwards with unit
            // incoming transmittance, background included
            let mut rest = vec![spec.background; m + 1];
            for i in (0..m).rev() {
                for c in 0..3 {
                    let ci = rgb_v[[range.start + i, c]];
                    rest[i][c] = alphas[i] * ci + (1.0 - alphas[i]) * rest[i + 1][c];
                }
            }
            let go = [g[[r, 0]], g[[r, 1]], g[[r, 2]]];
            for i in 0..m {
                let w = trans[i] * alphas[i];
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    d_rgb[[range.start + i, c]] += go[c] * w;
                    d_alpha += go[c] * trans[i] * (rgb_v[[range.start + i, c]] - rest[i + 1][c]);
                }
                let (a, b) = (s * f[i], s * f[i + 1]);
                let ratio = (log_sigmoid(b) - log_sigmoid(a)).exp();
                if 1.0 - ratio <= 0.0 {
                    continue;
                }
                // alpha = 1 - ratio, d ln sigmoid(x) / dx = sigmoid(-x)
                let d_a = ratio * sigmoid(-a);
                let d_b = -ratio * sigmoid(-b);
                d_sdf[[range.start + i, 0]] += d_alpha * d_a * s;
                d_sdf[[range.start + i + 1, 0]] += d_alpha * d_b * s;
                d_s += d_alpha * (d_a * f[i] + d_b * f[i + 1]);
            }
        }
        (d_sdf, d_rgb, d_s * s)
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMulT(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Softplus(a, _)
        | Op::SigmoidScaled(a, _)
        | Op::Relu(a)
        | Op::Log(a, _)
        | Op::Powf(a, _)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Exp(a)
        | Op::Cols(a, _, _)
        | Op::Rows(a, _, _)
        | Op::RowSum(a)
        | Op::TileRows(a, _)
        | Op::UnstackRows(a, _)
        | Op::Sum(a) => vec![*a],
        Op::Concat(parts) => parts.clone(),
        Op::Composite(a, b, c, _) => vec![*a, *b, *c],
    }
}
