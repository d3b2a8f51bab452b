//! Mesh and image evaluation: Chamfer distance, SDF mean absolute error and
//! masked PSNR.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::meshing::{Bounds, TriMesh};

/// PSNR reported when the masked error is zero.
pub const PSNR_CAP: f64 = 99.0;

/// Surface sample count used by the evaluation protocol.
pub const DEFAULT_POINTS: usize = 10_000;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Balanced 3-d tree over a point set.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // permutation of point indices; node `lo..hi` splits at its median
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0, points.len());
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the closest point; ties go to the
    /// lower index.
    pub fn nearest(&self, q: [f64; 3]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: [f64; 3], lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.points[idx];
        let d = dist2(p, q);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if delta * delta <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [usize], axes: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &i in &order[lo..hi] {
        for a in 0..3 {
            min[a] = min[a].min(points[i][a]);
            max[a] = max[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
        .unwrap();
    let mid = lo + (hi - lo) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    axes[mid] = axis as u8;
    build(points, order, axes, lo, mid);
    build(points, order, axes, mid + 1, hi);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Points on the surface only.
    Surface,
    /// Half jittered surface points, half uniform in the bounding box.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointSampler {
    pub n_points: usize,
    pub seed: u64,
    pub mode: SampleMode,
}

impl PointSampler {
    pub fn surface(n_points: usize, seed: u64) -> Self {
        Self {
            n_points,
            seed,
            mode: SampleMode::Surface,
        }
    }
}

/// Uniform points on the surface (triangles picked by area).
pub fn sample_surface<R: Rng>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::invalid("cannot sample a mesh with no surface area"));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let t = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i as usize]);
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect())
}

/// Centres the bounding box at the origin and scales its longest side to 1.
pub fn normalise_unit_cube(mesh: &TriMesh) -> Result<TriMesh> {
    let b = mesh.bounding_box().ok_or_else(|| Error::invalid("empty mesh"))?;
    let extent = (0..3).map(|a| b.max[a] - b.min[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::invalid("mesh has a degenerate bounding box"));
    }
    let c = [0, 1, 2].map(|a| 0.5 * (b.min[a] + b.max[a]));
    Ok(mesh.map_vertices(|v| [0, 1, 2].map(|a| (v[a] - c[a]) / extent)))
}

fn mean_nearest(from: &[[f64; 3]], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(*p).unwrap().1.sqrt()).sum::<f64>() / from.len() as f64
}

/// Directional mean nearest-neighbour distances `(A -> B, B -> A)`.
pub fn chamfer_directional(a: &TriMesh, b: &TriMesh, sampler: PointSampler, normalise: bool) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer needs two non-empty meshes"));
    }
    if sampler.n_points == 0 {
        return Err(Error::invalid("chamfer needs at least one sample"));
    }
    let (a, b) = if normalise {
        (normalise_unit_cube(a)?, normalise_unit_cube(b)?)
    } else {
        (a.clone(), b.clone())
    };
    // both meshes draw from the same stream so chamfer(A, A) is exactly zero
    let pa = sample_surface(&a, sampler.n_points, &mut ChaCha8Rng::seed_from_u64(sampler.seed))?;
    let pb = sample_surface(&b, sampler.n_points, &mut ChaCha8Rng::seed_from_u64(sampler.seed))?;
    let ta = KdTree::new(&pa);
    let tb = KdTree::new(&pb);
    Ok((mean_nearest(&pa, &tb), mean_nearest(&pb, &ta)))
}

/// Sum of the two directional means, each mesh first scaled into the unit
/// cube.
pub fn chamfer(a: &TriMesh, b: &TriMesh, n: usize, seed: u64) -> Result<f64> {
    let (ab, ba) = chamfer_directional(a, b, PointSampler::surface(n, seed), true)?;
    Ok(ab + ba)
}

/// Closest-point and ray queries over a triangle mesh.
#[derive(Debug, Clone)]
pub struct MeshBvh {
    tris: Vec<[[f64; 3]; 3]>,
    nodes: Vec<BvhNode>,
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Bounds,
    // leaf: triangles start..end; inner: children left, right
    start: usize,
    end: usize,
    left: usize,
    right: usize,
}

fn tri_bounds(tris: &[[[f64; 3]; 3]]) -> Bounds {
    let mut b = Bounds {
        min: [f64::INFINITY; 3],
        max: [f64::NEG_INFINITY; 3],
    };
    for t in tris {
        for v in t {
            for a in 0..3 {
                b.min[a] = b.min[a].min(v[a]);
                b.max[a] = b.max[a].max(v[a]);
            }
        }
    }
    b
}

impl MeshBvh {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        mesh.validate()?;
        if mesh.is_empty() {
            return Err(Error::invalid("cannot index an empty mesh"));
        }
        let mut tris: Vec<[[f64; 3]; 3]> = mesh
            .triangles
            .iter()
            .map(|t| t.map(|i| mesh.vertices[i as usize]))
            .collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        build_bvh(&mut tris, &mut nodes, 0, n);
        Ok(Self { tris, nodes })
    }

    /// Unsigned distance to the closest triangle.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_dist2(&node.bounds, p) >= best {
                continue;
            }
            if node.left == usize::MAX {
                for t in &self.tris[node.start..node.end] {
                    best = best.min(dist2(p, closest_on_triangle(p, t)));
                }
            } else {
                let (l, r) = (node.left, node.right);
                let (dl, dr) = (box_dist2(&self.nodes[l].bounds, p), box_dist2(&self.nodes[r].bounds, p));
                // visit the nearer child first
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.sqrt()
    }

    /// Number of triangles crossed by the ray `o + t d`, `t > 0`.
    pub fn crossings(&self, o: [f64; 3], d: [f64; 3]) -> usize {
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !ray_hits_box(&node.bounds, o, d) {
                continue;
            }
            if node.left == usize::MAX {
                count += self.tris[node.start..node.end]
                    .iter()
                    .filter(|t| ray_triangle(o, d, t))
                    .count();
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        count
    }

    /// Majority vote of three ray-parity tests.
    pub fn is_inside(&self, p: [f64; 3]) -> bool {
        const DIRS: [[f64; 3]; 3] = [
            [0.577_215_664_9, 0.693_147_180_5, 0.431_457_505_1],
            [-0.618_033_988_7, 0.302_775_637_7, -0.725_374_371_0],
            [0.141_421_356_2, -0.839_962_905_1, 0.523_606_797_7],
        ];
        DIRS.iter().filter(|d| self.crossings(p, **d) % 2 == 1).count() >= 2
    }

    /// Negative inside, positive outside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let d = self.distance(p);
        if self.is_inside(p) {
            -d
        } else {
            d
        }
    }
}

fn build_bvh(tris: &mut [[[f64; 3]; 3]], nodes: &mut Vec<BvhNode>, start: usize, end: usize) -> usize {
    let id = nodes.len();
    nodes.push(BvhNode {
        bounds: tri_bounds(&tris[start..end]),
        start,
        end,
        left: usize::MAX,
        right: usize::MAX,
    });
    if end - start <= 4 {
        return id;
    }
    let centroid = |t: &[[f64; 3]; 3], a: usize| t[0][a] + t[1][a] + t[2][a];
    let b = nodes[id].bounds;
    let axis = (0..3)
        .max_by(|&x, &y| (b.max[x] - b.min[x]).total_cmp(&(b.max[y] - b.min[y])))
        .unwrap();
    let mid = start + (end - start) / 2;
    tris[start..end].select_nth_unstable_by(mid - start, |p, q| centroid(p, axis).total_cmp(&centroid(q, axis)));
    let left = build_bvh(tris, nodes, start, mid);
    let right = build_bvh(tris, nodes, mid, end);
    nodes[id].left = left;
    nodes[id].right = right;
    id
}

fn box_dist2(b: &Bounds, p: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let d = (b.min[a] - p[a]).max(0.0).max(p[a] - b.max[a]);
            d * d
        })
        .sum()
}

fn ray_hits_box(b: &Bounds, o: [f64; 3], d: [f64; 3]) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let (mut near, mut far) = ((b.min[a] - o[a]) * inv, (b.max[a] - o[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        // NaN from 0 * inf keeps the slab unconstrained
        if near.is_finite() || far.is_finite() {
            t0 = t0.max(near);
            t1 = t1.min(far);
        } else if !(o[a] >= b.min[a] && o[a] <= b.max[a]) {
            return false;
        }
    }
    t0 <= t1 * (1.0 + 1e-12) + 1e-12
}

fn ray_triangle(o: [f64; 3], d: [f64; 3], t: &[[f64; 3]; 3]) -> bool {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let e1 = sub(t[1], t[0]);
    let e2 = sub(t[2], t[0]);
    let h = cross(d, e2);
    let det = dot(e1, h);
    if det.abs() < 1e-15 {
        return false;
    }
    let inv = 1.0 / det;
    let s = sub(o, t[0]);
    let u = inv * dot(s, h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = cross(s, e1);
    let v = inv * dot(d, q);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    inv * dot(e2, q) > 1e-12
}

/// Closest point on a triangle to `p`, by Voronoi region.
fn closest_on_triangle(p: [f64; 3], t: &[[f64; 3]; 3]) -> [f64; 3] {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let at = |a: [f64; 3], v: [f64; 3], s: f64| [a[0] + s * v[0], a[1] + s * v[1], a[2] + s * v[2]];
    let [a, b, c] = *t;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return at(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return at(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return at(b, sub(c, b), w);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [0, 1, 2].map(|k| a[k] + ab[k] * v + ac[k] * w)
}

/// Probe points: half jittered surface samples from both meshes, half
/// uniform in their joint bounding box.
pub fn hybrid_points(gt: &TriMesh, pred: &TriMesh, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let ba = gt.bounding_box().ok_or_else(|| Error::invalid("empty ground-truth mesh"))?;
    let bb = pred.bounding_box().ok_or_else(|| Error::invalid("empty predicted mesh"))?;
    let b = Bounds {
        min: [0, 1, 2].map(|a| ba.min[a].min(bb.min[a])),
        max: [0, 1, 2].map(|a| ba.max[a].max(bb.max[a])),
    };
    b.validate()?;
    let maxdim = (0..3).map(|a| b.max[a] - b.min[a]).fold(0.0, f64::max);
    let jitter = 0.01 * maxdim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_surface = n / 2;
    let n_gt = n_surface / 2;
    let mut pts = sample_surface(gt, n_gt, &mut rng)?;
    pts.extend(sample_surface(pred, n_surface - n_gt, &mut rng)?);
    for p in &mut pts {
        for a in p.iter_mut() {
            *a += rng.gen_range(-jitter..=jitter);
        }
    }
    for _ in n_surface..n {
        pts.push([0, 1, 2].map(|a| b.min[a] + rng.gen::<f64>() * (b.max[a] - b.min[a])));
    }
    Ok(pts)
}

/// Mean `|sdf_gt(x) - sdf_pred(x)|` over hybrid probe points.
pub fn sdf_mae(gt: &TriMesh, pred: &TriMesh, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("sdf_mae needs at least one probe point"));
    }
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::invalid("sdf_mae needs two non-empty meshes"));
    }
    let pts = hybrid_points(gt, pred, n, seed)?;
    let bg = MeshBvh::new(gt)?;
    let bp = MeshBvh::new(pred)?;
    Ok(pts
        .iter()
        .map(|p| (bg.signed_distance(*p) - bp.signed_distance(*p)).abs())
        .sum::<f64>()
        / pts.len() as f64)
}

/// `10 log10(1 / MSE)` over masked pixels, capped at [`PSNR_CAP`].
pub fn masked_psnr(rendered: &RgbImage, reference: &RgbImage, mask: &Mask) -> Result<f64> {
    if rendered.resolution() != reference.resolution() || (mask.width, mask.height) != reference.resolution() {
        return Err(Error::shape(
            format!("{:?}", reference.resolution()),
            format!("{:?} / {:?}", rendered.resolution(), (mask.width, mask.height)),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, keep) in mask.values.iter().enumerate() {
        if *keep {
            for c in 0..3 {
                let d = rendered.pixels[i][c] - reference.pixels[i][c];
                sum += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// One evaluated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scene: String,
    pub chamfer: f64,
    pub sdf_mae: f64,
    pub psnr: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let psnr = self.psnr.map_or("-".to_string(), |p| format!("{p:.3}"));
        format!(
            "scene chamfer sdf_mae psnr\n{} {:.6} {:.6} {}\n",
            self.scene, self.chamfer, self.sdf_mae, psnr
        )
    }

    pub fn key_values(&self) -> String {
        let mut out = format!("scene={}\nchamfer={:?}\nsdf_mae={:?}\n", self.scene, self.chamfer, self.sdf_mae);
        if let Some(p) = self.psnr {
            let _ = writeln!(out, "psnr={p:?}");
        }
        out
    }
}
