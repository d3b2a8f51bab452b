//! Dense SDF grids, marching cubes, inverse-distance vertex colours and
//! OBJ/PLY files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{radiance_eval_batch, sdf_eval_batch, FieldParams, SdfField};

/// Largest grid [`bake_grid`] accepts unless told otherwise.
pub const DEFAULT_MAX_VOXELS: usize = 512 * 512 * 512;

/// Weight floor in the inverse-distance colour blend.
pub const COLOUR_EPS: f64 = 1e-6;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    /// Unit cube centred at the origin.
    fn default() -> Self {
        Self::cube(0.5)
    }
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.max[a] > self.min[a]) && self.min.iter().chain(&self.max).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate bounds {:?} .. {:?}", self.min, self.max)))
        }
    }
}

/// Samples at voxel centres. `values[(i * ny + j) * nz + k]` holds voxel
/// `(i, j, k)` along `(x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub resolution: [usize; 3],
    pub bounds: Bounds,
    pub values: Vec<f64>,
    pub colours: Option<Vec<[f64; 3]>>,
}

impl SdfGrid {
    pub fn new(resolution: [usize; 3], bounds: Bounds, values: Vec<f64>) -> Result<Self> {
        if resolution.iter().any(|n| *n < 2) {
            return Err(Error::invalid(format!("grid resolution {resolution:?} below 2")));
        }
        bounds.validate()?;
        let n = resolution.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::shape(n, values.len()));
        }
        Ok(Self {
            resolution,
            bounds,
            values,
            colours: None,
        })
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn spacing(&self) -> [f64; 3] {
        let b = &self.bounds;
        [0, 1, 2].map(|a| (b.max[a] - b.min[a]) / self.resolution[a] as f64)
    }

    pub fn centre(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let h = self.spacing();
        let b = &self.bounds;
        [
            b.min[0] + (i as f64 + 0.5) * h[0],
            b.min[1] + (j as f64 + 0.5) * h[1],
            b.min[2] + (k as f64 + 0.5) * h[2],
        ]
    }

    pub fn centres(&self) -> Vec<[f64; 3]> {
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    out.push(self.centre(i, j, k));
                }
            }
        }
        out
    }

    /// Length of one voxel diagonal.
    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing().iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    /// Text cache: `nx ny nz`, then the bounds, then one value per line.
    pub fn to_text(&self) -> String {
        let [nx, ny, nz] = self.resolution;
        let b = &self.bounds;
        let mut out = format!(
            "{nx} {ny} {nz}\n{:?} {:?} {:?} {:?} {:?} {:?}\n",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        );
        for v in &self.values {
            let _ = writeln!(out, "{v:?}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Parse {
            path: "<grid>".into(),
            line,
            message: what.to_string(),
        };
        let mut lines = text.lines();
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad(1, "missing dimensions"))?
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(1, "bad dimensions"))?;
        let b: Vec<f64> = lines
            .next()
            .ok_or_else(|| bad(2, "missing bounds"))?
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(2, "bad bounds"))?;
        if dims.len() != 3 || b.len() != 6 {
            return Err(bad(1, "header needs 3 dimensions and 6 bounds"));
        }
        let values = lines
            .enumerate()
            .map(|(n, l)| l.trim().parse::<f64>().map_err(|_| bad(n + 3, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            [dims[0], dims[1], dims[2]],
            Bounds {
                min: [b[0], b[1], b[2]],
                max: [b[3], b[4], b[5]],
            },
            values,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

fn check_budget(resolution: [usize; 3], max_voxels: usize) -> Result<()> {
    let n = resolution.iter().try_fold(1usize, |acc, r| acc.checked_mul(*r));
    match n {
        Some(n) if n <= max_voxels => Ok(()),
        _ => Err(Error::invalid(format!(
            "grid {resolution:?} exceeds the {max_voxels}-voxel budget"
        ))),
    }
}

/// Samples any field at voxel centres.
pub fn bake_field<F: SdfField + ?Sized>(field: &F, resolution: [usize; 3], bounds: Bounds, max_voxels: usize) -> Result<SdfGrid> {
    check_budget(resolution, max_voxels)?;
    let mut grid = SdfGrid::new(resolution, bounds, vec![0.0; resolution.iter().product()])?;
    let centres = grid.centres();
    for (chunk, out) in centres.chunks(8192).zip(grid.values.chunks_mut(8192)) {
        out.copy_from_slice(&field.sdf_batch(chunk));
    }
    Ok(grid)
}

/// Samples the networks at voxel centres. Colours, when requested, are
/// queried looking along the inward normal.
pub fn bake_grid(
    params: &FieldParams,
    coeffs: &[f64],
    resolution: [usize; 3],
    bounds: Bounds,
    with_colour: bool,
    max_voxels: usize,
) -> Result<SdfGrid> {
    check_budget(resolution, max_voxels)?;
    let mut grid = SdfGrid::new(resolution, bounds, vec![0.0; resolution.iter().product()])?;
    let centres = grid.centres();
    let mut colours = Vec::new();
    for (chunk, out) in centres.chunks(2048).zip(grid.values.chunks_mut(2048)) {
        if !with_colour {
            out.copy_from_slice(&crate::fields::sdf_values(chunk, params, coeffs)?);
            continue;
        }
        let evals = sdf_eval_batch(chunk, params, coeffs)?;
        let mut normals = Vec::with_capacity(chunk.len());
        let mut dirs = Vec::with_capacity(chunk.len());
        let mut features = Vec::with_capacity(chunk.len());
        for (o, e) in out.iter_mut().zip(&evals) {
            *o = e.value;
            let g = e.gradient;
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let d = if n > 1e-12 { [-g[0] / n, -g[1] / n, -g[2] / n] } else { [0.0, 0.0, 1.0] };
            normals.push(g);
            dirs.push(d);
            features.push(e.feature.clone());
        }
        colours.extend(radiance_eval_batch(chunk, &dirs, &normals, &features, params)?);
    }
    if with_colour {
        grid.colours = Some(colours);
    }
    Ok(grid)
}

/// Indexed triangle mesh with optional per-vertex colour.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub colours: Option<Vec<[f64; 3]>>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|i| *i as usize >= n)) {
            return Err(Error::invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if let Some(c) = &self.colours {
            if c.len() != n {
                return Err(Error::shape(n, c.len()));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unnormalised face normal (length = twice the area).
    pub fn face_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounding_box(&self) -> Option<Bounds> {
        let first = *self.vertices.first()?;
        let mut b = Bounds { min: first, max: first };
        for v in &self.vertices {
            for a in 0..3 {
                b.min[a] = b.min[a].min(v[a]);
                b.max[a] = b.max[a].max(v[a]);
            }
        }
        Some(b)
    }

    pub fn flip_winding(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    pub fn map_vertices(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }

    /// Geodesic sphere from a subdivided icosahedron, outward winding.
    pub fn icosphere(centre: [f64; 3], radius: f64, subdivisions: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<[f64; 3]> = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let unit = |v: [f64; 3]| {
            let n = norm(v);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        verts = verts.into_iter().map(unit).collect();
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<[f64; 3]>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (p, q) = (verts[a as usize], verts[b as usize]);
                    verts.push(unit([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                    (verts.len() - 1) as u32
                })
            };
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Self {
            vertices: verts
                .into_iter()
                .map(|v| [centre[0] + radius * v[0], centre[1] + radius * v[1], centre[2] + radius * v[2]])
                .collect(),
            triangles: faces,
            colours: None,
        }
    }
}

// Cube corners and edges, corner i at offset CORNERS[i].
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Corner cycles of the six faces, counter-clockwise seen from outside.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("adjacent corners")
}

/// Triangles (as cube edge triples) for each of the 256 inside/outside
/// patterns, bit `i` set when corner `i` is below the iso level.
///
/// On every face the walk pairs each outside-to-inside crossing with the
/// next inside-to-outside crossing, so inside corners on an ambiguous face
/// stay separated. Both cubes sharing a face make the same choice, and the
/// segments chain into closed loops that are fanned into triangles.
fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: Vec<Vec<[usize; 3]>> = (0..256).map(triangulate_case).collect();
        // orient so that normals point from inside to outside
        let flip = {
            let tri = table[1][0];
            let mid = |e: usize| {
                let [a, b] = EDGES[e];
                [0, 1, 2].map(|k| 0.5 * (CORNERS[a][k] + CORNERS[b][k]) as f64)
            };
            let n = cross(sub(mid(tri[1]), mid(tri[0])), sub(mid(tri[2]), mid(tri[0])));
            // corner 0 is inside, so the normal should point along +x+y+z
            n[0] + n[1] + n[2] < 0.0
        };
        if flip {
            for tris in &mut table {
                for t in tris.iter_mut() {
                    t.swap(1, 2);
                }
            }
        }
        table
    })
}

fn triangulate_case(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    // next[e] = edge the loop moves to after crossing edge e
    let mut next: [Option<usize>; 12] = [None; 12];
    for face in FACES {
        let mut crossings = Vec::new();
        for s in 0..4 {
            let (a, b) = (face[s], face[(s + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), !inside(a) && inside(b)));
            }
        }
        for (idx, &(edge, entering)) in crossings.iter().enumerate() {
            if entering {
                let (exit, _) = crossings[(idx + 1) % crossings.len()];
                next[edge] = Some(exit);
            }
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut cycle = vec![start];
        seen[start] = true;
        let mut e = next[start].unwrap();
        while e != start {
            seen[e] = true;
            cycle.push(e);
            e = next[e].expect("closed loop");
        }
        for k in 1..cycle.len() - 1 {
            tris.push([cycle[0], cycle[k], cycle[k + 1]]);
        }
    }
    tris
}

/// Extracts the `iso` level set. Values below `iso` count as inside;
/// vertices are shared between cells and degenerate triangles dropped.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Result<TriMesh> {
    if let Some(v) = grid.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("grid holds non-finite value {v}")));
    }
    let table = case_table();
    let [nx, ny, nz] = grid.resolution;
    let mut mesh = TriMesh::default();
    let mut vertex_of_edge: HashMap<usize, u32> = HashMap::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0;
                for c in 0..8 {
                    let (a, b, cc) = corner(c);
                    if grid.value(a, b, cc) < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case] {
                    let ids = tri.map(|e| {
                        let [ca, cb] = EDGES[e];
                        let (a, b) = (corner(ca), corner(cb));
                        // key by the lower grid point and the edge axis
                        let lo = (a.0.min(b.0), a.1.min(b.1), a.2.min(b.2));
                        let axis = if a.0 != b.0 { 0 } else if a.1 != b.1 { 1 } else { 2 };
                        let key = grid.index(lo.0, lo.1, lo.2) * 3 + axis;
                        *vertex_of_edge.entry(key).or_insert_with(|| {
                            let (va, vb) = (grid.value(a.0, a.1, a.2), grid.value(b.0, b.1, b.2));
                            let t = (iso - va) / (vb - va);
                            let pa = grid.centre(a.0, a.1, a.2);
                            let pb = grid.centre(b.0, b.1, b.2);
                            mesh.vertices.push([0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d])));
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                        continue;
                    }
                    mesh.triangles.push(ids);
                    if mesh.triangle_area(mesh.triangles.len() - 1) < 1e-12 {
                        mesh.triangles.pop();
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Raises values outside a centred ball to at least their distance from
/// it, so unobserved corners of the box cannot produce surface.
pub fn clip_to_ball(grid: &mut SdfGrid, radius: f64) {
    let centres = grid.centres();
    for (v, c) in grid.values.iter_mut().zip(&centres) {
        let outside = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() - radius;
        *v = v.max(outside);
    }
}

/// Bakes the networks, optionally clips to a ball, extracts the zero level
/// set and colours it when asked.
pub fn extract_mesh(
    params: &FieldParams,
    coeffs: &[f64],
    resolution: usize,
    bounds: Bounds,
    clip_radius: Option<f64>,
    with_colour: bool,
) -> Result<TriMesh> {
    let mut grid = bake_grid(params, coeffs, [resolution; 3], bounds, with_colour, DEFAULT_MAX_VOXELS)?;
    if let Some(r) = clip_radius {
        clip_to_ball(&mut grid, r);
    }
    let mesh = marching_cubes(&grid, 0.0)?;
    if with_colour && !mesh.is_empty() {
        colour_vertices(&mesh, &grid)
    } else {
        Ok(mesh)
    }
}

/// Vertex colours blended from the eight voxels around each vertex with
/// weights `1 / (|sdf| + COLOUR_EPS)`.
pub fn colour_vertices(mesh: &TriMesh, grid: &SdfGrid) -> Result<TriMesh> {
    let colours = grid
        .colours
        .as_ref()
        .ok_or_else(|| Error::invalid("grid has no colour channel"))?;
    let h = grid.spacing();
    let first = grid.centre(0, 0, 0);
    let cell = |p: [f64; 3], a: usize| {
        let f = ((p[a] - first[a]) / h[a]).floor();
        (f.max(0.0) as usize).min(grid.resolution[a] - 2)
    };
    let mut out = mesh.clone();
    out.colours = Some(
        mesh.vertices
            .iter()
            .map(|p| {
                let (i, j, k) = (cell(*p, 0), cell(*p, 1), cell(*p, 2));
                let mut acc = [0.0; 3];
                let mut total = 0.0;
                for o in CORNERS {
                    let idx = grid.index(i + o[0], j + o[1], k + o[2]);
                    let w = 1.0 / (grid.values[idx].abs() + COLOUR_EPS);
                    for c in 0..3 {
                        acc[c] += w * colours[idx][c];
                    }
                    total += w;
                }
                acc.map(|v| v / total)
            })
            .collect(),
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => Ok(Self::Obj),
            Some("ply") => Ok(Self::Ply),
            _ => Err(Error::invalid(format!("{}: expected a .obj or .ply path", path.display()))),
        }
    }
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn format_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for (n, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        if let Some(c) = &mesh.colours {
            let _ = write!(out, " {:?} {:?} {:?}", c[n][0], c[n][1], c[n][2]);
        }
        out.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn format_ply(mesh: &TriMesh) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.colours.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    let _ = writeln!(out, "element face {}", mesh.triangles.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (n, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(out, "{:?} {:?} {:?}", v[0], v[1], v[2]);
        if let Some(c) = &mesh.colours {
            let _ = write!(out, " {} {} {}", to_byte(c[n][0]), to_byte(c[n][1]), to_byte(c[n][2]));
        }
        out.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

pub fn export_mesh(mesh: &TriMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    mesh.validate()?;
    let path = path.as_ref();
    let text = match format {
        MeshFormat::Obj => format_obj(mesh),
        MeshFormat::Ply => format_ply(mesh),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match format {
        MeshFormat::Obj => parse_obj(&text),
        MeshFormat::Ply => parse_ply(&text),
    };
    let mesh = parsed.map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })?;
    mesh.validate()?;
    Ok(mesh)
}

type ParseResult<T> = std::result::Result<T, (usize, String)>;

fn floats(parts: &[&str], line: usize) -> ParseResult<Vec<f64>> {
    parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| (line, format!("bad number `{p}`"))))
        .collect()
}

pub fn parse_obj(text: &str) -> ParseResult<TriMesh> {
    let mut mesh = TriMesh::default();
    let mut colours = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"v") => {
                let v = floats(&parts[1..], line_no)?;
                match v.len() {
                    3 => mesh.vertices.push([v[0], v[1], v[2]]),
                    6 => {
                        mesh.vertices.push([v[0], v[1], v[2]]);
                        colours.push([v[3], v[4], v[5]]);
                    }
                    _ => return Err((line_no, "vertex needs 3 or 6 values".into())),
                }
            }
            Some(&"f") => {
                let idx: Vec<u32> = parts[1..]
                    .iter()
                    .map(|p| {
                        let head = p.split('/').next().unwrap_or("");
                        head.parse::<u32>()
                            .ok()
                            .filter(|i| *i > 0)
                            .map(|i| i - 1)
                            .ok_or((line_no, format!("bad face index `{p}`")))
                    })
                    .collect::<ParseResult<_>>()?;
                if idx.len() < 3 {
                    return Err((line_no, "face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if !colours.is_empty() {
        if colours.len() != mesh.vertices.len() {
            return Err((0, "some vertices lack colours".into()));
        }
        mesh.colours = Some(colours);
    }
    Ok(mesh)
}

pub fn parse_ply(text: &str) -> ParseResult<TriMesh> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err((1, "missing ply magic".into()));
    }
    let mut n_vertices = 0;
    let mut n_faces = 0;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    loop {
        let (n, line) = lines.next().ok_or((0, "missing end_header".into()))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err((n + 1, "only ascii PLY is supported".into())),
            ["element", "vertex", count] => {
                n_vertices = count.parse().map_err(|_| (n + 1, "bad vertex count".into()))?;
                current = "vertex";
            }
            ["element", "face", count] => {
                n_faces = count.parse().map_err(|_| (n + 1, "bad face count".into()))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", "list", ..] => {}
            ["property", _, name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let pos = |name: &str| vertex_props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err((0, "vertex element lacks x, y or z".into())),
    };
    let rgb = match (pos("red"), pos("green"), pos("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let mut mesh = TriMesh::default();
    let mut colours = Vec::new();
    for _ in 0..n_vertices {
        let (n, line) = lines.next().ok_or((0, "truncated vertex list".into()))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let v = floats(&parts, n + 1)?;
        if v.len() < vertex_props.len() {
            return Err((n + 1, "short vertex line".into()));
        }
        mesh.vertices.push([v[xi], v[yi], v[zi]]);
        if let Some((r, g, b)) = rgb {
            colours.push([v[r] / 255.0, v[g] / 255.0, v[b] / 255.0]);
        }
    }
    for _ in 0..n_faces {
        let (n, line) = lines.next().ok_or((0, "truncated face list".into()))?;
        let idx: Vec<u32> = line
            .split_whitespace()
            .map(|p| p.parse::<u32>().map_err(|_| (n + 1, format!("bad index `{p}`"))))
            .collect::<ParseResult<_>>()?;
        let count = *idx.first().ok_or((n + 1, "empty face line".to_string()))? as usize;
        if count < 3 || idx.len() != count + 1 {
            return Err((n + 1, "face count does not match its indices".into()));
        }
        for k in 2..count {
            mesh.triangles.push([idx[1], idx[k], idx[k + 1]]);
        }
    }
    if rgb.is_some() {
        mesh.colours = Some(colours);
    }
    Ok(mesh)
}
