//! Simplicial 2-D meshes, admissibility metrics and P1 finite-element machinery.
//!
//! Nodes of the P1 space coincide with mesh vertices, so a finite-element function is
//! stored as its vector of vertex values.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::{self, Domain, Point};
use crate::linalg::CsrMatrix;

#[derive(Debug)]
pub struct Mesh {
    domain: Domain,
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    h: f64,
    h_min: f64,
    sigma: f64,
    mass: OnceLock<CsrMatrix>,
    lumped: OnceLock<Vec<f64>>,
}

impl Clone for Mesh {
    fn clone(&self) -> Self {
        Mesh {
            domain: self.domain.clone(),
            vertices: self.vertices.clone(),
            triangles: self.triangles.clone(),
            h: self.h,
            h_min: self.h_min,
            sigma: self.sigma,
            mass: OnceLock::new(),
            lumped: OnceLock::new(),
        }
    }
}

/// Diameter, inscribed-ball diameter and signed doubled area of one triangle.
fn element_shape(p: [Point; 3]) -> (f64, f64, f64) {
    let a = geometry::dist(p[1], p[2]);
    let b = geometry::dist(p[0], p[2]);
    let c = geometry::dist(p[0], p[1]);
    let twice_area = geometry::orient2(p[0], p[1], p[2]);
    let area = 0.5 * twice_area.abs();
    let semi = 0.5 * (a + b + c);
    (a.max(b).max(c), 2.0 * area / semi, twice_area)
}

impl Mesh {
    /// Validate and build a mesh. Clockwise triangles are reoriented.
    pub fn new(domain: Domain, vertices: Vec<Point>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::InvariantViolation("non-finite vertex coordinate".into()));
        }
        let mut used = vec![false; vertices.len()];
        for (k, t) in triangles.iter_mut().enumerate() {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvariantViolation(format!(
                    "triangle {k} references a missing vertex"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::DegenerateElement(k));
            }
            let o = geometry::orient2(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if o == 0.0 {
                return Err(Error::DegenerateElement(k));
            }
            if o < 0.0 {
                t.swap(1, 2);
            }
            for &i in t.iter() {
                used[i] = true;
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::InvariantViolation(format!(
                "vertex {i} belongs to no triangle"
            )));
        }
        check_conformity(&vertices, &triangles)?;
        let mut mesh = Mesh {
            domain,
            vertices,
            triangles,
            h: 0.0,
            h_min: 0.0,
            sigma: 0.0,
            mass: OnceLock::new(),
            lumped: OnceLock::new(),
        };
        let (h, h_min, sigma) = mesh_metrics(&mesh)?;
        mesh.h = h;
        mesh.h_min = h_min;
        mesh.sigma = sigma;
        Ok(mesh)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Minimum element diameter.
    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    /// Worst-case ratio of element diameter to inscribed-ball diameter.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn element_points(&self, k: usize) -> [Point; 3] {
        let t = self.triangles[k];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn element_area(&self, k: usize) -> f64 {
        let p = self.element_points(k);
        0.5 * geometry::orient2(p[0], p[1], p[2])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|k| self.element_area(k)).sum()
    }

    /// Gradients of the three barycentric basis functions on element `k`.
    pub fn basis_gradients(&self, k: usize) -> [Point; 3] {
        let p = self.element_points(k);
        let twice = geometry::orient2(p[0], p[1], p[2]);
        let mut g = [[0.0; 2]; 3];
        for a in 0..3 {
            let b = p[(a + 1) % 3];
            let c = p[(a + 2) % 3];
            g[a] = [(b[1] - c[1]) / twice, (c[0] - b[0]) / twice];
        }
        g
    }

    /// Consistent P1 mass matrix (cached).
    pub fn mass_matrix(&self) -> &CsrMatrix {
        self.mass.get_or_init(|| assemble_mass_matrix(self))
    }

    /// Row-sum lumped mass, one nodal quadrature weight per vertex (cached).
    pub fn lumped_mass(&self) -> &[f64] {
        self.lumped.get_or_init(|| {
            let mut w = vec![0.0; self.n_nodes()];
            for (k, t) in self.triangles.iter().enumerate() {
                let a = self.element_area(k) / 3.0;
                for &i in t {
                    w[i] += a;
                }
            }
            w
        })
    }

    /// P1 stiffness matrix with a per-element coefficient.
    pub fn stiffness_matrix(&self, coeff: impl Fn(usize) -> f64) -> CsrMatrix {
        let mut trip = Vec::with_capacity(9 * self.n_triangles());
        for (k, t) in self.triangles.iter().enumerate() {
            let g = self.basis_gradients(k);
            let scale = coeff(k) * self.element_area(k);
            for a in 0..3 {
                for b in 0..3 {
                    trip.push((t[a], t[b], scale * geometry::dot(g[a], g[b])));
                }
            }
        }
        CsrMatrix::from_triplets(self.n_nodes(), self.n_nodes(), &trip)
    }

    /// Edges that belong to exactly one triangle, as sorted vertex pairs.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let mut out: Vec<[usize; 2]> = count
            .into_iter()
            .filter_map(|(e, c)| (c == 1).then_some(e))
            .collect();
        out.sort_unstable();
        out
    }

    /// Euclidean distance from `p` to the union of the closed elements.
    pub fn distance_to(&self, p: Point) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..self.n_triangles() {
            let q = self.element_points(k);
            let inside = (0..3).all(|a| geometry::orient2(q[a], q[(a + 1) % 3], p) >= 0.0);
            if inside {
                return 0.0;
            }
            for a in 0..3 {
                best = best.min(geometry::point_segment_distance(p, q[a], q[(a + 1) % 3]));
            }
        }
        best
    }

    /// Largest distance between two mesh vertices.
    pub fn node_diameter(&self) -> f64 {
        let mut d2: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                d2 = d2.max(geometry::dist2(*a, *b));
            }
        }
        d2.sqrt()
    }
}

fn check_conformity(vertices: &[Point], triangles: &[[usize; 3]]) -> Result<()> {
    // each undirected edge is shared by at most two elements, lying on opposite sides
    let mut owners: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
    for (k, t) in triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            owners.entry([a.min(b), a.max(b)]).or_default().push(k);
        }
    }
    for (edge, ks) in &owners {
        match ks.len() {
            1 => {}
            2 => {
                let (p, q) = (vertices[edge[0]], vertices[edge[1]]);
                let opposite = |k: usize| {
                    let t = triangles[k];
                    let o = *t.iter().find(|&&i| i != edge[0] && i != edge[1]).unwrap();
                    geometry::orient2(p, q, vertices[o]).signum()
                };
                if opposite(ks[0]) == opposite(ks[1]) {
                    return Err(Error::InvariantViolation(format!(
                        "elements {} and {} overlap across edge {:?}",
                        ks[0], ks[1], edge
                    )));
                }
            }
            _ => {
                return Err(Error::InvariantViolation(format!(
                    "edge {:?} is shared by {} elements",
                    edge,
                    ks.len()
                )))
            }
        }
    }
    Ok(())
}

/// Structured right-triangle grid over the bounding box of `domain` with pitch
/// `target_h / sqrt(2)`, keeping the triangles whose vertices and centroid lie in the
/// closed domain. Cells with one corner outside the domain are split along the other
/// diagonal so that the remaining half is kept.
/// Smallest doubled area of a kept triangle relative to an unperturbed grid triangle.
const SNAP_MIN_AREA_RATIO: f64 = 0.2;

pub fn build_mesh(domain: &Domain, target_h: f64) -> Result<Mesh> {
    if !(target_h > 0.0 && target_h.is_finite()) {
        return Err(Error::InvalidStep(target_h));
    }
    let pitch = target_h / std::f64::consts::SQRT_2;
    let (lo, hi) = domain.bbox();
    let cells = |a: f64, b: f64| (((b - a) / pitch - 1e-9).ceil() as usize).max(1);
    let (nx, ny) = (cells(lo[0], hi[0]), cells(lo[1], hi[1]));
    let x0 = 0.5 * (lo[0] + hi[0]) - 0.5 * nx as f64 * pitch;
    let y0 = 0.5 * (lo[1] + hi[1]) - 0.5 * ny as f64 * pitch;
    let grid = |i: usize, j: usize| -> Point { [x0 + i as f64 * pitch, y0 + j as f64 * pitch] };
    let node = |i: usize, j: usize| j * (nx + 1) + i;

    let nv = (nx + 1) * (ny + 1);
    let mut pos: Vec<Point> = (0..nv).map(|v| grid(v % (nx + 1), v / (nx + 1))).collect();
    let inside: Vec<bool> = pos.iter().map(|&p| domain.contains(p)).collect();

    // Outside vertices next to the domain are pulled onto the nearest boundary point so
    // that thin features (tips, corners) are covered up to the boundary.
    let mut usable = inside.clone();
    for v in 0..nv {
        if inside[v] {
            continue;
        }
        let (i, j) = ((v % (nx + 1)) as isize, (v / (nx + 1)) as isize);
        let near_inside = (-1..=1).any(|dj| {
            (-1..=1).any(|di| {
                let (a, b) = (i + di, j + dj);
                a >= 0
                    && b >= 0
                    && a <= nx as isize
                    && b <= ny as isize
                    && inside[node(a as usize, b as usize)]
            })
        });
        if !near_inside {
            continue;
        }
        if let Some(q) = domain.closest_boundary_point(pos[v]) {
            if geometry::dist(q, pos[v]) <= 0.5 * pitch {
                pos[v] = q;
                usable[v] = true;
            }
        }
    }

    let min_orient = SNAP_MIN_AREA_RATIO * pitch * pitch;
    let valid = |tri: [usize; 3]| -> Option<f64> {
        if !tri.iter().all(|&v| usable[v]) {
            return None;
        }
        let (p0, p1, p2) = (pos[tri[0]], pos[tri[1]], pos[tri[2]]);
        let o = geometry::orient2(p0, p1, p2);
        let centroid = [(p0[0] + p1[0] + p2[0]) / 3.0, (p0[1] + p1[1] + p2[1]) / 3.0];
        (o >= min_orient && domain.contains(centroid)).then_some(o)
    };

    let mut kept = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1));
            let splits = [[[a, b, c], [a, c, d]], [[a, b, d], [b, c, d]]];
            let score = |split: &[[usize; 3]; 2]| {
                let q: Vec<f64> = split.iter().filter_map(|&t| valid(t)).collect();
                (q.len(), q.iter().copied().fold(f64::INFINITY, f64::min))
            };
            let (s0, s1) = (score(&splits[0]), score(&splits[1]));
            let best = if s1.0 > s0.0 || (s1.0 == s0.0 && s1.1 > s0.1) { 1 } else { 0 };
            kept.extend(splits[best].iter().copied().filter(|&t| valid(t).is_some()));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyMesh);
    }

    // compact used vertices in grid order, merging snapped vertices that coincide
    let mut used = vec![false; nv];
    for t in &kept {
        for &v in t {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; nv];
    let mut vertices: Vec<Point> = Vec::new();
    let mut seen = HashMap::new();
    let key = |p: Point| ((p[0] * 1e10).round() as i64, (p[1] * 1e10).round() as i64);
    for v in (0..nv).filter(|&v| used[v]) {
        let id = *seen.entry(key(pos[v])).or_insert_with(|| {
            vertices.push(pos[v]);
            vertices.len() - 1
        });
        remap[v] = id;
    }
    let triangles: Vec<[usize; 3]> = kept
        .iter()
        .map(|t| t.map(|v| remap[v]))
        .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
        .collect();
    Mesh::new(domain.clone(), vertices, triangles)
}

/// `(h, h_min, sigma)` recomputed from the elements.
pub fn mesh_metrics(mesh: &Mesh) -> Result<(f64, f64, f64)> {
    let mut h: f64 = 0.0;
    let mut h_min = f64::INFINITY;
    let mut sigma: f64 = 0.0;
    for k in 0..mesh.n_triangles() {
        let (hk, rk, twice) = element_shape(mesh.element_points(k));
        if twice == 0.0 || rk <= 0.0 {
            return Err(Error::DegenerateElement(k));
        }
        h = h.max(hk);
        h_min = h_min.min(hk);
        sigma = sigma.max(hk / rk);
    }
    Ok((h, h_min, sigma))
}

/// Consistent P1 mass matrix, element block `(area / 12) [[2,1,1],[1,2,1],[1,1,2]]`.
pub fn assemble_mass_matrix(mesh: &Mesh) -> CsrMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    for (k, t) in mesh.triangles().iter().enumerate() {
        let a = mesh.element_area(k) / 12.0;
        for p in 0..3 {
            for q in 0..3 {
                trip.push((t[p], t[q], if p == q { 2.0 * a } else { a }));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &trip)
}

/// A P1 finite-element function identified with its vertex values.
#[derive(Clone, Debug)]
pub struct FeFunction {
    mesh: Arc<Mesh>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(mesh: Arc<Mesh>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.n_nodes() {
            return Err(Error::DimMismatch {
                expected: mesh.n_nodes(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite nodal value".into()));
        }
        Ok(FeFunction { mesh, coeffs })
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(mesh: Arc<Mesh>, f: impl Fn(Point) -> f64) -> Self {
        let coeffs = mesh.vertices().iter().map(|&p| f(p)).collect();
        FeFunction { mesh, coeffs }
    }

    pub fn constant(mesh: Arc<Mesh>, c: f64) -> Self {
        let n = mesh.n_nodes();
        FeFunction {
            mesh,
            coeffs: vec![c; n],
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeFunction {
        FeFunction {
            mesh: self.mesh.clone(),
            coeffs: self.coeffs.iter().map(|&c| f(c)).collect(),
        }
    }
}

/// `sqrt(cᵀ M c)` with the consistent mass matrix.
pub fn l2_norm(f: &FeFunction) -> f64 {
    f.mesh.mass_matrix().quad_form(&f.coeffs).max(0.0).sqrt()
}

/// Exact per-element gradient of the piecewise-linear interpolant.
pub fn p1_gradient(f: &FeFunction) -> Vec<Point> {
    let mesh = &f.mesh;
    (0..mesh.n_triangles())
        .map(|k| {
            let g = mesh.basis_gradients(k);
            let t = mesh.triangles()[k];
            let mut out = [0.0; 2];
            for a in 0..3 {
                out[0] += f.coeffs[t[a]] * g[a][0];
                out[1] += f.coeffs[t[a]] * g[a][1];
            }
            out
        })
        .collect()
}

pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "MESH2D {} {}", mesh.n_nodes(), mesh.n_triangles());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {}", v[0], v[1]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "DOMAIN {}", mesh.domain());
    s
}

pub fn mesh_from_str(text: &str) -> Result<Mesh> {
    parse_mesh(text).map_err(|e| fix_truncation(e, text))
}

fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("MESH2D") {
        return Err(Error::parse(ln, "expected MESH2D header"));
    }
    let mut count = |what: &str| -> Result<usize> {
        tok.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(ln, format!("missing {what} count")))
    };
    let nv = count("vertex")?;
    let nt = count("triangle")?;
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("truncated file: missing {what}")))
    };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = next("vertex")?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(ln, "bad vertex coordinate"))?;
        if v.len() != 2 {
            return Err(Error::parse(ln, "vertex needs two coordinates"));
        }
        vertices.push([v[0], v[1]]);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = next("triangle")?;
        let t: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(ln, "bad triangle index"))?;
        if t.len() != 3 {
            return Err(Error::parse(ln, "triangle needs three indices"));
        }
        triangles.push([t[0], t[1], t[2]]);
    }
    let (ln, l) = next("DOMAIN line")?;
    let desc = l
        .strip_prefix("DOMAIN ")
        .ok_or_else(|| Error::parse(ln, "expected DOMAIN line"))?;
    let domain: Domain = desc
        .parse()
        .map_err(|e: Error| Error::parse(ln, e.to_string()))?;
    Mesh::new(domain, vertices, triangles).map_err(|e| match e {
        Error::InvariantViolation(_) => e,
        other => Error::InvariantViolation(other.to_string()),
    })
}

/// Patch the line number of truncation errors, which are only known after the fact.
fn fix_truncation(err: Error, text: &str) -> Error {
    match err {
        Error::Parse { line: 0, msg } => Error::Parse {
            line: text.lines().count() + 1,
            msg,
        },
        other => other,
    }
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mesh_to_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mesh_from_str(&text)
}
