//! Random vascular networks, the smoothed line source, the oxygen model with Robin
//! boundary conditions, the hypoxic fraction and its Monte Carlo sweep over density.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, dist, dist2, point_segment_distance, Point};
use crate::linalg::{BandedLu, CsrMatrix};
use crate::mesh::{FeFunction, Mesh};

/// Segments shorter than this after clipping are dropped.
const MIN_SEGMENT: f64 = 1e-12;
/// Normal quantile for a two-sided 99% interval.
pub const Z99: f64 = 2.576;

pub type Segment = (Point, Point);

/// Finite union of segments inside the closed unit disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VascularNetwork {
    segments: Vec<Segment>,
    total_length: f64,
}

impl VascularNetwork {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (a, b) in &segments {
            if geometry::norm(*a) > 1.0 + 1e-12 || geometry::norm(*b) > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!("segment {a:?}-{b:?} leaves the unit disk")));
            }
            if dist(*a, *b) < MIN_SEGMENT {
                return Err(Error::InvalidArgument("zero-length segment".into()));
            }
        }
        let total_length: f64 = segments.iter().map(|(a, b)| dist(*a, *b)).sum();
        if !(total_length > 0.0) {
            return Err(Error::EmptyNetwork);
        }
        Ok(Self { segments, total_length })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Distance from `x` to the union of segments.
    pub fn distance(&self, x: Point) -> f64 {
        self.segments
            .iter()
            .map(|(a, b)| point_segment_distance(x, *a, *b))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Poisson process of intensity `10 lambda` on the unit disk.
pub fn sample_poisson_points(lambda: f64, seed: u64) -> Result<Vec<Point>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = Poisson::new(10.0 * lambda * PI)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sample(&mut rng) as usize;
    Ok((0..count)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let t = 2.0 * PI * rng.random::<f64>();
            [r * t.cos(), r * t.sin()]
        })
        .collect())
}

/// Convex polygon whose edge `k` runs from `pts[k]` to `pts[k+1]` and carries the index
/// of the neighboring site that created it (`None` for the initial box).
struct Cell {
    pts: Vec<Point>,
    tags: Vec<Option<usize>>,
}

impl Cell {
    fn square(half: f64) -> Self {
        Self {
            pts: vec![[-half, -half], [half, -half], [half, half], [-half, half]],
            tags: vec![None; 4],
        }
    }

    /// Keeps `{x : n.x <= c}`; the new edge on the line is tagged `tag`.
    fn clip(&mut self, n: Point, c: f64, tag: usize) {
        let m = self.pts.len();
        let side: Vec<f64> = self.pts.iter().map(|p| geometry::dot(n, *p) - c).collect();
        if side.iter().all(|&s| s <= 0.0) {
            return;
        }
        let mut pts = Vec::with_capacity(m + 1);
        let mut tags = Vec::with_capacity(m + 1);
        for k in 0..m {
            let (a, b) = (self.pts[k], self.pts[(k + 1) % m]);
            let (sa, sb) = (side[k], side[(k + 1) % m]);
            let cross = |sa: f64, sb: f64| {
                let t = sa / (sa - sb);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            };
            match (sa <= 0.0, sb <= 0.0) {
                (true, true) => {
                    pts.push(a);
                    tags.push(self.tags[k]);
                }
                (true, false) => {
                    pts.push(a);
                    tags.push(self.tags[k]);
                    pts.push(cross(sa, sb));
                    tags.push(Some(tag));
                }
                (false, true) => {
                    pts.push(cross(sa, sb));
                    tags.push(self.tags[k]);
                }
                (false, false) => {}
            }
        }
        self.pts = pts;
        self.tags = tags;
    }

    fn radius_from(&self, p: Point) -> f64 {
        self.pts.iter().map(|q| dist(*q, p)).fold(0.0, f64::max)
    }
}

/// Part of segment `[a, b]` inside the closed unit disk.
fn clip_to_unit_disk(a: Point, b: Point) -> Option<Segment> {
    let d = geometry::sub(b, a);
    let qa = geometry::dot(d, d);
    if qa == 0.0 {
        return None;
    }
    let qb = 2.0 * geometry::dot(a, d);
    let qc = geometry::dot(a, a) - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = (((-qb - s) / (2.0 * qa)).max(0.0), ((-qb + s) / (2.0 * qa)).min(1.0));
    if t0 >= t1 {
        return None;
    }
    let at = |t: f64| {
        let p = [a[0] + t * d[0], a[1] + t * d[1]];
        // pull rounding excursions back onto the circle
        let n = geometry::norm(p);
        if n > 1.0 {
            [p[0] / n, p[1] / n]
        } else {
            p
        }
    };
    let seg = (at(t0), at(t1));
    (dist(seg.0, seg.1) >= MIN_SEGMENT).then_some(seg)
}

/// Nudges coincident generators apart by 1e-9 so every bisector is defined.
fn separate_duplicates(points: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for (i, &p) in points.iter().enumerate() {
        let mut q = p;
        let mut k = 1.0;
        while out.iter().any(|o| dist2(*o, q) < 1e-24) {
            let t = i as f64 + k;
            q = [p[0] + 1e-9 * t.cos(), p[1] + 1e-9 * t.sin()];
            k += 1.0;
        }
        out.push(q);
    }
    out
}

/// Voronoi edges of `points` clipped to the closed unit disk.
pub fn voronoi_network(points: &[Point]) -> Result<VascularNetwork> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    let sites = separate_duplicates(points);
    let n = sites.len();
    let segments: Vec<Vec<Segment>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = sites[i];
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (dist2(sites[j], p), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut cell = Cell::square(4.0);
            for &(d2, j) in &others {
                // sites beyond twice the cell radius cannot cut the cell
                if d2.sqrt() > 2.0 * cell.radius_from(p) {
                    break;
                }
                let q = sites[j];
                let nrm = geometry::sub(q, p);
                let c = 0.5 * (geometry::dot(q, q) - geometry::dot(p, p));
                cell.clip(nrm, c, j);
            }
            let m = cell.pts.len();
            (0..m)
                .filter_map(|k| match cell.tags[k] {
                    Some(j) if i < j => clip_to_unit_disk(cell.pts[k], cell.pts[(k + 1) % m]),
                    _ => None,
                })
                .collect()
        })
        .collect();
    VascularNetwork::new(segments.into_iter().flatten().collect())
}

/// `(1/eps^2) max(eps - dist(x, network), 0)` at every node.
pub fn phi_lambda(net: &VascularNetwork, eps: f64, mesh: &Arc<Mesh>) -> Result<FeFunction> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let vals = mesh
        .vertices()
        .par_iter()
        .map(|&x| (eps - net.distance(x)).max(0.0) / (eps * eps))
        .collect();
    FeFunction::new(mesh.clone(), vals)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OxygenConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub u_star: f64,
}

impl Default for OxygenConfig {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.01, eps: 0.05, u_star: 0.1 }
    }
}

impl OxygenConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.eps, self.u_star].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("oxygen parameters must be positive: {self:?}")))
        }
    }
}

/// Mesh edges used for the Robin term: edges of exactly one element whose endpoints
/// both satisfy `|x| >= 1 - h`.
pub fn robin_edges(mesh: &Mesh) -> Vec<[usize; 2]> {
    let v = mesh.vertices();
    let cut = 1.0 - mesh.h();
    mesh.boundary_edges()
        .into_iter()
        .filter(|e| geometry::norm(v[e[0]]) >= cut && geometry::norm(v[e[1]]) >= cut)
        .collect()
}

/// Matrix and right-hand side for a given nodal source `phi` and network length.
pub fn assemble_oxygen_system(phi: &FeFunction, total_length: f64, cfg: &OxygenConfig) -> (CsrMatrix, Vec<f64>) {
    let mesh = phi.mesh();
    let p = phi.coeffs();
    let inv_len = 1.0 / total_length;
    let mut trip = Vec::with_capacity(18 * mesh.n_triangles());
    for (k, t) in mesh.triangles().iter().enumerate() {
        let g = mesh.basis_gradients(k);
        let area = mesh.element_area(k);
        let psum = p[t[0]] + p[t[1]] + p[t[2]];
        for a in 0..3 {
            for b in 0..3 {
                let mass = if a == b { area / 6.0 } else { area / 12.0 };
                // integral of phi * phi_a * phi_b with phi linear on the element
                let weighted = if a == b {
                    area / 30.0 * (psum + 2.0 * p[t[a]])
                } else {
                    let c = 3 - a - b;
                    area / 60.0 * (2.0 * p[t[a]] + 2.0 * p[t[b]] + p[t[c]])
                };
                let stiff = cfg.alpha * area * geometry::dot(g[a], g[b]);
                trip.push((t[a], t[b], stiff + mass + inv_len * weighted));
            }
        }
    }
    let v = mesh.vertices();
    for [i, j] in robin_edges(mesh) {
        let len = dist(v[i], v[j]);
        let (d, o) = (cfg.beta * len / 3.0, cfg.beta * len / 6.0);
        trip.extend([(i, i, d), (j, j, d), (i, j, o), (j, i, o)]);
    }
    let a = CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &trip);
    let rhs = mesh.mass_matrix().mul_vec(p).into_iter().map(|x| x * inv_len).collect();
    (a, rhs)
}

/// Oxygen concentration for a smoothed line source `phi` of total length `total_length`.
pub fn solve_oxygen_with_source(phi: &FeFunction, total_length: f64, cfg: &OxygenConfig) -> Result<FeFunction> {
    cfg.validate()?;
    let (a, rhs) = assemble_oxygen_system(phi, total_length, cfg);
    let u = BandedLu::factor(&a)?.solve(&rhs);
    FeFunction::new(phi.mesh().clone(), u)
}

pub fn solve_oxygen(net: &VascularNetwork, cfg: &OxygenConfig, mesh: &Arc<Mesh>) -> Result<FeFunction> {
    let phi = phi_lambda(net, cfg.eps, mesh)?;
    solve_oxygen_with_source(&phi, net.total_length(), cfg)
}

/// Lumped-measure fraction of the domain where `u < u_star`.
pub fn hypoxic_fraction(u: &FeFunction, u_star: f64) -> f64 {
    let w = u.mesh().lumped_mass();
    let total = w.iter().fold(0.0, |a, b| a + b);
    let low = u.coeffs().iter().zip(w).filter(|(v, _)| **v < u_star).fold(0.0, |a, (_, w)| a + w);
    low / total
}

/// Stateless 64-bit mix used to derive replicate seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for replicate `rep` of grid point `lambda_index`.
pub fn replicate_seed(seed: u64, lambda_index: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(lambda_index as u64)) ^ rep as u64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replicate {
    pub q: f64,
    pub n_points: usize,
    pub total_length: f64,
}

/// One network draw, oxygen solve and hypoxic fraction.
pub fn run_replicate(lambda: f64, seed: u64, cfg: &OxygenConfig, mesh: &Arc<Mesh>) -> Result<Replicate> {
    let pts = sample_poisson_points(lambda, seed)?;
    let net = voronoi_network(&pts)?;
    let u = solve_oxygen(&net, cfg, mesh)?;
    Ok(Replicate { q: hypoxic_fraction(&u, cfg.u_star), n_points: pts.len(), total_length: net.total_length() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_q: f64,
    pub ci99_halfwidth: f64,
    pub replicates: Vec<Replicate>,
}

/// Mean and CLT 99% half-width (sample standard deviation).
pub fn mean_ci99(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z99 * (var / n).sqrt())
}

pub fn mc_sweep(
    lambda_grid: &[f64],
    n_per_lambda: usize,
    cfg: &OxygenConfig,
    mesh: &Arc<Mesh>,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if n_per_lambda < 2 {
        return Err(Error::InvalidArgument("at least two replicates per lambda are required".into()));
    }
    cfg.validate()?;
    lambda_grid
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let replicates: Vec<Replicate> = (0..n_per_lambda)
                .into_par_iter()
                .map(|rep| {
                    run_replicate(lambda, replicate_seed(seed, li, rep), cfg, mesh)
                        .map_err(|e| Error::Replicate { lambda, rep, source: Box::new(e) })
                })
                .collect::<Result<_>>()?;
            let qs: Vec<f64> = replicates.iter().map(|r| r.q).collect();
            let (mean_q, ci99_halfwidth) = mean_ci99(&qs);
            log::info!("lambda {lambda}: mean Q {mean_q:.4} +- {ci99_halfwidth:.4}");
            Ok(SweepRow { lambda, mean_q, ci99_halfwidth, replicates })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,mean_q,ci99_halfwidth,n\n");
    for r in rows {
        writeln!(s, "{},{:e},{:e},{}", r.lambda, r.mean_q, r.ci99_halfwidth, r.replicates.len()).unwrap();
    }
    s
}

pub fn replicates_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,rep,q,n_points,total_length\n");
    for r in rows {
        for (k, rep) in r.replicates.iter().enumerate() {
            writeln!(s, "{},{},{:e},{},{:e}", r.lambda, k, rep.q, rep.n_points, rep.total_length).unwrap();
        }
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b, sxy * sxy / (sxx * syy))
}

/// Five-point Gauss-Legendre rule on [-1, 1] (exact for degree 9).
const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// `int_network v ds` by Gauss-Legendre quadrature on each segment.
pub fn line_integral(net: &VascularNetwork, v: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
    net.segments
        .iter()
        .map(|&(a, b)| {
            let half = 0.5 * dist(a, b);
            GAUSS5
                .iter()
                .map(|&(t, w)| {
                    let s = 0.5 * (1.0 + t);
                    w * v([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])])
                })
                .sum::<f64>()
                * half
        })
        .sum()
}

/// `int v(x) (1/eps^2) max(eps - dist(x, network), 0) dx` by the midpoint rule on a grid of
/// pitch `eps / 20` anchored at the first segment's start point.
pub fn smoothed_integral(net: &VascularNetwork, v: &(dyn Fn(Point) -> f64 + Sync), eps: f64) -> f64 {
    let pitch = eps / 20.0;
    let anchor = net.segments[0].0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (a, b) in &net.segments {
        for p in [a, b] {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d] - eps);
                hi[d] = hi[d].max(p[d] + eps);
            }
        }
    }
    let range = |d: usize| {
        let i0 = ((lo[d] - anchor[d]) / pitch).floor() as i64;
        let i1 = ((hi[d] - anchor[d]) / pitch).ceil() as i64;
        i0..i1
    };
    let inv = 1.0 / (eps * eps);
    let rows: Vec<f64> = range(1)
        .into_par_iter()
        .map(|j| {
            let y = anchor[1] + (j as f64 + 0.5) * pitch;
            range(0)
                .map(|i| {
                    let x = [anchor[0] + (i as f64 + 0.5) * pitch, y];
                    let k = (eps - net.distance(x)).max(0.0);
                    if k > 0.0 {
                        v(x) * k * inv
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() * pitch * pitch
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleRow {
    pub eps: f64,
    pub smoothed: f64,
    pub exact: f64,
    pub error: f64,
}

/// Smoothed versus exact line integrals over a list of kernel widths.
pub fn segment_integral_oracle(net: &VascularNetwork, v: &(dyn Fn(Point) -> f64 + Sync), eps_list: &[f64]) -> Vec<OracleRow> {
    let exact = line_integral(net, v);
    eps_list
        .iter()
        .map(|&eps| {
            let smoothed = smoothed_integral(net, v, eps);
            OracleRow { eps, smoothed, exact, error: (smoothed - exact).abs() }
        })
        .collect()
}

/// One table per named test function, stacked with a leading `function` column.
pub fn oracle_to_csv(tables: &[(&str, Vec<OracleRow>)]) -> String {
    let mut s = String::from("function,eps,smoothed,exact,error\n");
    for (name, rows) in tables {
        for r in rows {
            writeln!(s, "{name},{},{:e},{:e},{:e}", r.eps, r.smoothed, r.exact, r.error).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::mesh::build_mesh;

    fn disk(h: f64) -> Arc<Mesh> {
        Arc::new(build_mesh(&Domain::unit_disk(), h).unwrap())
    }

    #[test]
    fn poisson_points_in_disk_and_seeded() {
        let a = sample_poisson_points(1.0, 5).unwrap();
        assert_eq!(a, sample_poisson_points(1.0, 5).unwrap());
        assert!(a.iter().all(|p| geometry::norm(*p) <= 1.0));
        let n = 5000;
        let mean = (0..n).map(|s| sample_poisson_points(1.0, s).unwrap().len()).sum::<usize>() as f64 / n as f64;
        let want = 10.0 * PI;
        assert!((mean - want).abs() <= 3.0 * (want / n as f64).sqrt(), "{mean}");
        assert!(sample_poisson_points(0.0, 1).is_err());
    }

    #[test]
    fn two_point_bisector() {
        let net = voronoi_network(&[[-0.5, 0.0], [0.5, 0.0]]).unwrap();
        assert_eq!(net.segments().len(), 1);
        let (a, b) = net.segments()[0];
        let (lo, hi) = if a[1] < b[1] { (a, b) } else { (b, a) };
        assert!(dist(lo, [0.0, -1.0]) < 1e-12 && dist(hi, [0.0, 1.0]) < 1e-12);
        assert!((net.total_length() - 2.0).abs() < 1e-12);
        assert!(matches!(voronoi_network(&[[0.0, 0.0]]), Err(Error::TooFewPoints(1))));
    }

    #[test]
    fn equilateral_sites_meet_at_origin() {
        let pts: Vec<Point> = (0..3)
            .map(|k| {
                let t = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                [0.5 * t.cos(), 0.5 * t.sin()]
            })
            .collect();
        let net = voronoi_network(&pts).unwrap();
        assert_eq!(net.segments().len(), 3);
        for (a, b) in net.segments() {
            let near = if geometry::norm(*a) < geometry::norm(*b) { a } else { b };
            assert!(geometry::norm(*near) < 1e-12);
            assert!((dist(*a, *b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_and_duplicate_sites() {
        let net = voronoi_network(&[[-0.6, 0.0], [0.0, 0.0], [0.6, 0.0]]).unwrap();
        assert_eq!(net.segments().len(), 2);
        let dup = voronoi_network(&[[0.1, 0.1], [0.1, 0.1], [-0.3, 0.2]]).unwrap();
        assert!(dup.total_length() > 0.0);
    }

    #[test]
    fn voronoi_edges_are_equidistant() {
        let pts = sample_poisson_points(2.0, 17).unwrap();
        let net = voronoi_network(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(a, b) in net.segments() {
            for _ in 0..5 {
                let t: f64 = rng.random();
                let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let mut d: Vec<f64> = pts.iter().map(|p| dist(*p, x)).collect();
                d.sort_by(f64::total_cmp);
                assert!((d[1] - d[0]).abs() <= 1e-8, "{} vs {}", d[0], d[1]);
                assert!(geometry::norm(x) <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn phi_bounds() {
        let mesh = disk(0.2);
        let net = VascularNetwork::new(vec![([-0.5, 0.0], [0.5, 0.0])]).unwrap();
        let phi = phi_lambda(&net, 0.05, &mesh).unwrap();
        for (x, &p) in mesh.vertices().iter().zip(phi.coeffs()) {
            assert!((0.0..=20.0).contains(&p));
            if x[1].abs() >= 0.05 {
                assert_eq!(p, 0.0);
            }
            if x[1] == 0.0 && x[0].abs() <= 0.5 {
                assert!((p - 20.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oxygen_solution_is_bounded_and_exact() {
        let mesh = disk(0.1);
        let net = voronoi_network(&sample_poisson_points(2.0, 4).unwrap()).unwrap();
        let cfg = OxygenConfig::default();
        let phi = phi_lambda(&net, cfg.eps, &mesh).unwrap();
        let (a, rhs) = assemble_oxygen_system(&phi, net.total_length(), &cfg);
        let u = solve_oxygen(&net, &cfg, &mesh).unwrap();
        let res: Vec<f64> = a.mul_vec(u.coeffs()).iter().zip(&rhs).map(|(x, y)| x - y).collect();
        assert!(crate::linalg::norm2(&res) <= 1e-10 * crate::linalg::norm2(&rhs));
        let min = u.coeffs().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = u.coeffs().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= -1e-3 && max <= 1.0 + 1e-8, "{min} {max}");
        assert_eq!(u.coeffs(), solve_oxygen(&net, &cfg, &mesh).unwrap().coeffs());

        let zero = FeFunction::constant(mesh.clone(), 0.0);
        let u0 = solve_oxygen_with_source(&zero, 1.0, &cfg).unwrap();
        assert!(u0.coeffs().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn robin_edges_lie_near_circle() {
        let mesh = disk(0.1);
        let edges = robin_edges(&mesh);
        let v = mesh.vertices();
        let len: f64 = edges.iter().map(|e| dist(v[e[0]], v[e[1]])).sum();
        assert!((len - 2.0 * PI).abs() < 0.05 * 2.0 * PI, "{len}");
    }

    #[test]
    fn source_normalization() {
        let mesh = disk(0.05);
        let net = VascularNetwork::new(vec![([-0.5, 0.1], [0.4, -0.2]), ([0.0, 0.5], [0.2, -0.3])]).unwrap();
        let phi = phi_lambda(&net, 0.05, &mesh).unwrap();
        let mass: f64 = mesh.lumped_mass().iter().zip(phi.coeffs()).map(|(w, p)| w * p).sum();
        let ratio = mass / net.total_length();
        assert!((ratio - 1.0).abs() <= 0.15, "{ratio}");
    }

    #[test]
    fn hypoxic_fraction_values() {
        let mesh = disk(0.3);
        assert_eq!(hypoxic_fraction(&FeFunction::constant(mesh.clone(), 0.05), 0.1), 1.0);
        assert_eq!(hypoxic_fraction(&FeFunction::constant(mesh.clone(), 0.5), 0.1), 0.0);
        let u = FeFunction::interpolate(mesh.clone(), |x| x[0] * 0.3);
        let raised = u.map(|v| v + 0.05);
        assert!(hypoxic_fraction(&raised, 0.1) <= hypoxic_fraction(&u, 0.1));
    }

    #[test]
    fn sweep_is_deterministic() {
        let mesh = disk(0.25);
        let cfg = OxygenConfig::default();
        let a = mc_sweep(&[1.0, 3.0], 4, &cfg, &mesh, 9).unwrap();
        let b = mc_sweep(&[1.0, 3.0], 4, &cfg, &mesh, 9).unwrap();
        assert_eq!(sweep_to_csv(&a), sweep_to_csv(&b));
        assert_eq!(replicates_to_csv(&a), replicates_to_csv(&b));
        assert!(sweep_to_csv(&a).starts_with("lambda,mean_q,ci99_halfwidth,n\n1,"));
        assert!(mc_sweep(&[], 4, &cfg, &mesh, 9).is_err());
        assert!(mc_sweep(&[1.0], 1, &cfg, &mesh, 9).is_err());
    }

    #[test]
    fn ci_and_fit_helpers() {
        let (m, h) = mean_ci99(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        assert!((h - Z99 * (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_segment_quadratures() {
        let net = VascularNetwork::new(vec![([0.0, 0.0], [1.0, 0.0])]).unwrap();
        assert!((line_integral(&net, &|_| 1.0) - 1.0).abs() < 1e-14);
        assert!((line_integral(&net, &|x| x[0]) - 0.5).abs() < 1e-14);
        // straight segment: kernel mass is L plus two half-disc caps of pi eps / 6 each
        for eps in [0.2, 0.1, 0.05, 0.025] {
            let s = smoothed_integral(&net, &|_| 1.0, eps);
            let want = 1.0 + PI * eps / 3.0;
            assert!((s - want).abs() <= 1e-3 * eps, "eps {eps}: {s} vs {want}");
        }
    }
}
