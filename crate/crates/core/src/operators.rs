//! Ground-truth generators for the four benchmark operators and dataset assembly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Domain, Point};
use crate::linalg::{norm2, BandedLu, CsrMatrix};
use crate::mesh::{p1_gradient, FeFunction, Mesh};
use crate::randfield::{discrete_kl, sample_field, square_pushforward, CovKernel, KlBasis};
use crate::train::Dataset;

/// Bounds of the parameter box for the distance family: `mu1, mu2, mu3`.
pub const THETA: [(f64, f64); 3] = [(0.0, 1.0), (-1.0, 1.0), (1.0, 2.0)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceFamilyParams {
    pub mu: [f64; 3],
}

impl DistanceFamilyParams {
    pub fn new(mu: [f64; 3]) -> Result<Self> {
        for (k, (&m, &(lo, hi))) in mu.iter().zip(&THETA).enumerate() {
            if !(lo..=hi).contains(&m) {
                return Err(Error::InvalidArgument(format!("mu{} = {m} outside [{lo}, {hi}]", k + 1)));
            }
        }
        Ok(Self { mu })
    }

    /// Uniform draw from the parameter box.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self { mu: THETA.map(|(lo, hi)| rng.random_range(lo..=hi)) }
    }
}

/// `min_{y in boundary, y2 > mu1} |y - diag(1, mu3) x| * exp(x1 mu2)` at every node, with
/// the boundary replaced by samples at spacing `h/10`.
pub fn distance_family(params: &DistanceFamilyParams, mesh: &Arc<Mesh>) -> Result<FeFunction> {
    distance_family_with_spacing(params, mesh, mesh.h() / 10.0)
}

pub fn distance_family_with_spacing(
    params: &DistanceFamilyParams,
    mesh: &Arc<Mesh>,
    spacing: f64,
) -> Result<FeFunction> {
    let [mu1, mu2, mu3] = params.mu;
    let kept: Vec<Point> = mesh
        .domain()
        .boundary_samples(spacing)
        .into_iter()
        .filter(|y| y[1] > mu1)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyBoundary(mu1));
    }
    let values = mesh
        .vertices()
        .iter()
        .map(|x| {
            let ax = [x[0], mu3 * x[1]];
            let d2 = kept.iter().map(|&y| geometry::dist2(y, ax)).fold(f64::INFINITY, f64::min);
            d2.sqrt() * (x[0] * mu2).exp()
        })
        .collect();
    FeFunction::new(mesh.clone(), values)
}

/// `sqrt(1 + |grad u|^2)` per element, averaged onto nodes with area weights.
pub fn area_operator(u: &FeFunction) -> FeFunction {
    let mesh = u.mesh();
    let elementwise = area_elementwise(u);
    let mut num = vec![0.0; mesh.n_nodes()];
    let mut den = vec![0.0; mesh.n_nodes()];
    for (k, t) in mesh.triangles().iter().enumerate() {
        let a = mesh.element_area(k);
        for &i in t {
            num[i] += a * elementwise[k];
            den[i] += a;
        }
    }
    let vals = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    FeFunction::new(mesh.clone(), vals).expect("finite area values")
}

/// Per-element values `sqrt(1 + |g_K|^2)` before nodal projection.
pub fn area_elementwise(u: &FeFunction) -> Vec<f64> {
    p1_gradient(u).iter().map(|g| (1.0 + g[0] * g[0] + g[1] * g[1]).sqrt()).collect()
}

/// Discrete maximal operator on a fixed mesh: neighbor orderings are precomputed once.
pub struct HlMaximal {
    mesh: Arc<Mesh>,
    radii: Vec<f64>,
    /// For each node, all nodes sorted by distance.
    order: Vec<Vec<u32>>,
    /// For each node and radius, number of nodes within that radius.
    cuts: Vec<Vec<u32>>,
}

impl HlMaximal {
    /// Radii equispaced in `[h, r_max]`.
    pub fn new(mesh: Arc<Mesh>, radii_count: usize, r_max: f64) -> Result<Self> {
        if radii_count == 0 {
            return Err(Error::InvalidArgument("radii_count must be positive".into()));
        }
        let h = mesh.h();
        let radii: Vec<f64> = if radii_count == 1 {
            vec![h]
        } else {
            (0..radii_count).map(|k| h + (r_max - h) * k as f64 / (radii_count - 1) as f64).collect()
        };
        let v = mesh.vertices();
        let (order, cuts): (Vec<Vec<u32>>, Vec<Vec<u32>>) = (0..v.len())
            .into_par_iter()
            .map(|i| {
                let mut by_dist: Vec<(f64, u32)> =
                    v.iter().enumerate().map(|(j, &p)| (geometry::dist2(p, v[i]), j as u32)).collect();
                by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let cuts = radii
                    .iter()
                    .map(|r| by_dist.partition_point(|&(d2, _)| d2 <= r * r) as u32)
                    .collect();
                (by_dist.into_iter().map(|(_, j)| j).collect(), cuts)
            })
            .unzip();
        Ok(Self { mesh, radii, order, cuts })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn apply(&self, f: &FeFunction) -> FeFunction {
        let w = self.mesh.lumped_mass();
        let c = f.coeffs();
        let vals = (0..self.order.len())
            .map(|i| {
                let (mut num, mut den, mut pos) = (0.0, 0.0, 0usize);
                let mut best = 0.0_f64;
                for &cut in &self.cuts[i] {
                    for &j in &self.order[i][pos..cut as usize] {
                        num += w[j as usize] * c[j as usize].abs();
                        den += w[j as usize];
                    }
                    pos = cut as usize;
                    if den > 0.0 {
                        best = best.max(num / den);
                    }
                }
                best
            })
            .collect();
        FeFunction::new(self.mesh.clone(), vals).expect("finite averages")
    }
}

/// Maximum over equispaced radii in `[h, r_max]` of lumped ball averages of `|f|`.
pub fn hl_maximal(f: &FeFunction, radii_count: usize, r_max: f64) -> Result<FeFunction> {
    Ok(HlMaximal::new(f.mesh().clone(), radii_count, r_max)?.apply(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PorousMediaConfig {
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    /// Added to `u^2` in the diffusion coefficient.
    pub delta_reg: f64,
}

impl Default for PorousMediaConfig {
    fn default() -> Self {
        Self { newton_tol: 1e-9, max_newton: 30, max_halvings: 8, delta_reg: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    /// Euclidean residual norms, starting with the initial guess.
    pub residuals: Vec<f64>,
}

struct PorousProblem<'a> {
    mesh: &'a Mesh,
    grads: Vec<[Point; 3]>,
    areas: Vec<f64>,
    load: Vec<f64>,
    delta: f64,
}

impl PorousProblem<'_> {
    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut r = self.mesh.mass_matrix().mul_vec(u);
        r.iter_mut().zip(&self.load).for_each(|(a, b)| *a -= b);
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let g = &self.grads[k];
            let gu = grad_of(u, t, g);
            let coef = self.areas[k] * (mean_square(u, t) + self.delta);
            for a in 0..3 {
                r[t[a]] += coef * geometry::dot(gu, g[a]);
            }
        }
        r
    }

    fn jacobian(&self, u: &[f64]) -> CsrMatrix {
        let m = self.mesh.mass_matrix();
        let mut trip = Vec::with_capacity(m.nnz() + 9 * self.mesh.n_triangles());
        for i in 0..m.nrows() {
            trip.extend(m.row(i).map(|(j, v)| (i, j, v)));
        }
        for (k, t) in self.mesh.triangles().iter().enumerate() {
            let g = &self.grads[k];
            let gu = grad_of(u, t, g);
            let area = self.areas[k];
            let kappa = mean_square(u, t) + self.delta;
            let sum = u[t[0]] + u[t[1]] + u[t[2]];
            for a in 0..3 {
                let gu_ga = geometry::dot(gu, g[a]);
                for b in 0..3 {
                    // d(mean u^2)/du_b = (sum + u_b) / 6
                    let v = area * (kappa * geometry::dot(g[b], g[a]) + (sum + u[t[b]]) / 6.0 * gu_ga);
                    trip.push((t[a], t[b], v));
                }
            }
        }
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), &trip)
    }
}

/// Exact element mean of `u^2` for a linear `u`.
fn mean_square(u: &[f64], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (u[t[0]], u[t[1]], u[t[2]]);
    ((a + b + c).powi(2) + a * a + b * b + c * c) / 12.0
}

fn grad_of(u: &[f64], t: &[usize; 3], g: &[Point; 3]) -> Point {
    let mut out = [0.0; 2];
    for a in 0..3 {
        out[0] += u[t[a]] * g[a][0];
        out[1] += u[t[a]] * g[a][1];
    }
    out
}

/// Galerkin solution of `-div((u^2 + delta) grad u) + u = f` with natural boundary
/// conditions by damped Newton, starting from the lumped projection of `f`.
///
/// The diffusion coefficient on each element is the exact element mean of `u^2`, so the
/// nonlinear term is integrated exactly for P1 functions.
pub fn porous_media_solve(f: &FeFunction, cfg: &PorousMediaConfig) -> Result<(FeFunction, NewtonReport)> {
    if !(cfg.newton_tol > 0.0) {
        return Err(Error::InvalidArgument("newton_tol must be positive".into()));
    }
    let mesh = f.mesh();
    let load = mesh.mass_matrix().mul_vec(f.coeffs());
    let problem = PorousProblem {
        mesh,
        grads: (0..mesh.n_triangles()).map(|k| mesh.basis_gradients(k)).collect(),
        areas: (0..mesh.n_triangles()).map(|k| mesh.element_area(k)).collect(),
        delta: cfg.delta_reg,
        load,
    };
    let w = mesh.lumped_mass();
    let mut u: Vec<f64> = problem.load.iter().zip(w).map(|(l, w)| l / w).collect();
    let tol = cfg.newton_tol * (1.0 + norm2(f.coeffs()));
    let mut r = problem.residual(&u);
    let mut rn = norm2(&r);
    let mut residuals = vec![rn];
    let mut it = 0;
    while rn > tol {
        if it == cfg.max_newton {
            return Err(Error::NewtonDiverged { iters: it, residual: rn });
        }
        it += 1;
        let lu = BandedLu::factor(&problem.jacobian(&u))?;
        let du = lu.solve(&r);
        // halve on residual increase; if every trial increases it, keep the best one
        let mut t = 1.0;
        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=cfg.max_halvings {
            let cand: Vec<f64> = u.iter().zip(&du).map(|(a, d)| a - t * d).collect();
            let rc = problem.residual(&cand);
            let rcn = norm2(&rc);
            if rcn.is_finite() && best.as_ref().is_none_or(|b| rcn < b.2) {
                best = Some((cand, rc, rcn));
            }
            if rcn < rn {
                break;
            }
            t *= 0.5;
        }
        let Some((cand, rc, rcn)) = best else {
            return Err(Error::NewtonDiverged { iters: it, residual: rn });
        };
        u = cand;
        r = rc;
        rn = rcn;
        residuals.push(rn);
        log::trace!("newton {it}: residual {rn:e}, step {t}");
    }
    Ok((FeFunction::new(mesh.clone(), u)?, NewtonReport { iterations: it, residuals }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorId {
    DistFamily,
    Area,
    HlMax,
    Porous,
}

impl OperatorId {
    pub const ALL: [OperatorId; 4] = [OperatorId::DistFamily, OperatorId::Area, OperatorId::HlMax, OperatorId::Porous];

    pub fn as_str(&self) -> &'static str {
        match self {
            OperatorId::DistFamily => "dist_family",
            OperatorId::Area => "area",
            OperatorId::HlMax => "hl_max",
            OperatorId::Porous => "porous",
        }
    }

    /// Domain on which the operator is posed.
    pub fn domain(&self) -> Domain {
        match self {
            OperatorId::DistFamily => Domain::crescent(),
            OperatorId::Area => Domain::slotted_rectangle(),
            OperatorId::HlMax => Domain::unit_disk(),
            OperatorId::Porous => Domain::holed_disk(),
        }
    }

    /// Covariance of the Gaussian input field and its default truncation.
    pub fn input_law(&self, domain: &Domain) -> Option<(CovKernel, usize)> {
        match self {
            OperatorId::DistFamily => None,
            OperatorId::Area => Some((CovKernel::ScaledGauss { area: domain.area() }, 100)),
            OperatorId::HlMax => Some((CovKernel::Gauss, 100)),
            OperatorId::Porous => Some((CovKernel::Cauchy, 20)),
        }
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OperatorId::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }
}

/// Settings for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub operator: OperatorId,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// KL truncation; defaults to the operator's own value, capped at the node count.
    #[serde(default)]
    pub kl_modes: Option<usize>,
    #[serde(default)]
    pub radii_count: Option<usize>,
    #[serde(default)]
    pub porous: PorousMediaConfig,
}

/// Input/target matrices (one row per sample) with generation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub operator: OperatorId,
    pub seed: u64,
    pub in_dim: usize,
    pub out_dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub kernel: Option<CovKernel>,
    pub kl_modes: usize,
}

impl GeneratedData {
    pub fn into_dataset(self, output_mesh: Arc<Mesh>) -> Result<Dataset> {
        Dataset::new(self.inputs, self.targets, output_mesh)
    }
}

/// Draws `spec.n_samples` inputs from the operator's input law and evaluates the
/// operator on each; sample `s` uses seed `spec.seed + s`.
pub fn make_dataset(spec: &DatasetSpec, mesh: &Arc<Mesh>) -> Result<GeneratedData> {
    let op = spec.operator;
    if *mesh.domain() != op.domain() {
        log::warn!("{op} is posed on {} but the mesh domain is {}", op.domain(), mesh.domain());
    }
    let law = op.input_law(mesh.domain());
    let basis: Option<KlBasis> = match law {
        Some((kernel, k)) => {
            let k = spec.kl_modes.unwrap_or(k).min(mesh.n_nodes());
            Some(discrete_kl(kernel, mesh.clone(), k)?)
        }
        None => None,
    };
    let hl = match op {
        OperatorId::HlMax => Some(HlMaximal::new(mesh.clone(), spec.radii_count.unwrap_or(50), 2.0)?),
        _ => None,
    };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_samples)
        .into_par_iter()
        .map(|s| {
            let seed = spec.seed.wrapping_add(s as u64);
            let run = || -> Result<(Vec<f64>, Vec<f64>)> {
                match op {
                    OperatorId::DistFamily => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let p = DistanceFamilyParams::sample(&mut rng);
                        Ok((p.mu.to_vec(), distance_family(&p, mesh)?.into_coeffs()))
                    }
                    OperatorId::Area => {
                        let u = sample_field(basis.as_ref().unwrap(), seed);
                        let t = area_operator(&u).into_coeffs();
                        Ok((u.into_coeffs(), t))
                    }
                    OperatorId::HlMax => {
                        let f = sample_field(basis.as_ref().unwrap(), seed);
                        let t = hl.as_ref().unwrap().apply(&f).into_coeffs();
                        Ok((f.into_coeffs(), t))
                    }
                    OperatorId::Porous => {
                        let f = square_pushforward(&sample_field(basis.as_ref().unwrap(), seed));
                        let (u, _) = porous_media_solve(&f, &spec.porous)?;
                        Ok((f.into_coeffs(), u.into_coeffs()))
                    }
                }
            };
            run().map_err(|e| Error::Sample { index: s, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let in_dim = match op {
        OperatorId::DistFamily => 3,
        _ => mesh.n_nodes(),
    };
    let (inputs, targets) = pairs.into_iter().unzip();
    Ok(GeneratedData {
        operator: op,
        seed: spec.seed,
        in_dim,
        out_dim: mesh.n_nodes(),
        inputs,
        targets,
        kernel: law.map(|(k, _)| k),
        kl_modes: basis.map_or(0, |b| b.k()),
    })
}

const MATRIX_MAGIC: &[u8; 8] = b"MINNMAT1";

/// Row-major little-endian matrix preceded by a magic tag and `rows`, `cols`.
pub fn write_matrix(path: &Path, cols: usize, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 8 * rows.len() * cols);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for r in rows {
        assert_eq!(r.len(), cols, "ragged matrix");
        for v in r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::InvalidArgument(format!("{}: not a matrix file", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let (n, c) = (word(8), word(16));
    if bytes.len() != 24 + 8 * n * c {
        return Err(bad());
    }
    Ok((0..n)
        .map(|r| {
            (0..c)
                .map(|j| f64::from_le_bytes(bytes[24 + 8 * (r * c + j)..][..8].try_into().unwrap()))
                .collect()
        })
        .collect())
}

/// Writes `inputs.bin`, `targets.bin` and the `meta` sidecar into `dir`.
pub fn write_dataset(dir: &Path, data: &GeneratedData, mesh_file: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&dir.join("inputs.bin"), data.in_dim, &data.inputs)?;
    write_matrix(&dir.join("targets.bin"), data.out_dim, &data.targets)?;
    let kernel = match data.kernel {
        None => "none".to_string(),
        Some(CovKernel::ScaledGauss { area }) => format!("scaled_gauss area={area}"),
        Some(CovKernel::Gauss) => "gauss".to_string(),
        Some(CovKernel::Cauchy) => "cauchy".to_string(),
    };
    let meta = format!(
        "operator = {}\nn = {}\nin_dim = {}\nout_dim = {}\nmesh = {}\nseed = {}\nkernel = {}\nkl_modes = {}\n",
        data.operator,
        data.inputs.len(),
        data.in_dim,
        data.out_dim,
        mesh_file,
        data.seed,
        kernel,
        data.kl_modes
    );
    let path = dir.join("meta");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

/// Dataset directory contents: matrices plus the `meta` key/value pairs.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub meta: Vec<(String, String)>,
}

impl StoredDataset {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let meta_path: PathBuf = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::parse(n + 1, "expected `key = value`"))
        })
        .collect::<Result<_>>()?;
    Ok(StoredDataset {
        inputs: read_matrix(&dir.join("inputs.bin"))?,
        targets: read_matrix(&dir.join("targets.bin"))?,
        meta,
    })
}
