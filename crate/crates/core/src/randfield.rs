//! Gaussian random fields on meshes by truncated discrete Karhunen-Loeve expansion.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};
use crate::mesh::{FeFunction, Mesh};

/// Largest node count handled by the dense symmetric eigensolver.
pub const DENSE_EIG_LIMIT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovKernel {
    /// `exp(-|x-y|^2 / 2) / area`.
    ScaledGauss { area: f64 },
    /// `exp(-|x-y|^2)`.
    Gauss,
    /// `1 / (1 + |x-y|^2)`.
    Cauchy,
}

impl CovKernel {
    pub fn eval(&self, x: Point, y: Point) -> f64 {
        let d2 = dist2(x, y);
        match self {
            CovKernel::ScaledGauss { area } => (-0.5 * d2).exp() / area,
            CovKernel::Gauss => (-d2).exp(),
            CovKernel::Cauchy => 1.0 / (1.0 + d2),
        }
    }

    fn id(&self) -> (u8, f64) {
        match self {
            CovKernel::ScaledGauss { area } => (0, *area),
            CovKernel::Gauss => (1, 0.0),
            CovKernel::Cauchy => (2, 0.0),
        }
    }

    fn from_id(id: u8, param: f64) -> Result<Self> {
        match id {
            0 => Ok(CovKernel::ScaledGauss { area: param }),
            1 => Ok(CovKernel::Gauss),
            2 => Ok(CovKernel::Cauchy),
            _ => Err(Error::InvalidArgument(format!("unknown kernel id {id}"))),
        }
    }
}

/// Leading eigenpairs of the covariance operator, with modes orthonormal in the lumped
/// mass inner product.
#[derive(Clone, Debug)]
pub struct KlBasis {
    mesh: Arc<Mesh>,
    kernel: CovKernel,
    eigenvalues: Vec<f64>,
    /// `N_h x k`, one mode per column.
    modes: DMatrix<f64>,
}

impl KlBasis {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn kernel(&self) -> CovKernel {
        self.kernel
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// Keeps only the first `k` modes.
    pub fn truncate(&self, k: usize) -> Result<KlBasis> {
        if k > self.k() {
            return Err(Error::Truncation { k, n: self.k() });
        }
        Ok(KlBasis {
            mesh: self.mesh.clone(),
            kernel: self.kernel,
            eigenvalues: self.eigenvalues[..k].to_vec(),
            modes: self.modes.columns(0, k).into_owned(),
        })
    }
}

/// Covariance matrix `C_ij = Cov(x_i, x_j)` over the mesh vertices.
pub fn covariance_matrix(kernel: &CovKernel, mesh: &Mesh) -> DMatrix<f64> {
    let v = mesh.vertices();
    DMatrix::from_fn(v.len(), v.len(), |i, j| kernel.eval(v[i], v[j]))
}

/// Solves `C W v = lambda v` (W the lumped mass) through the symmetric form
/// `W^{1/2} C W^{1/2}` and returns the `k` largest eigenpairs.
pub fn discrete_kl(kernel: CovKernel, mesh: Arc<Mesh>, k: usize) -> Result<KlBasis> {
    let n = mesh.n_nodes();
    if k > n {
        return Err(Error::Truncation { k, n });
    }
    let sw: Vec<f64> = mesh.lumped_mass().iter().map(|w| w.sqrt()).collect();
    let mut b = covariance_matrix(&kernel, &mesh);
    for j in 0..n {
        for i in 0..n {
            b[(i, j)] *= sw[i] * sw[j];
        }
    }
    let (vals, vecs) = if n <= DENSE_EIG_LIMIT || k + 10 >= n {
        dense_top_k(b, k)
    } else {
        subspace_top_k(&b, k)?
    };
    let mut modes = vecs;
    for j in 0..k {
        for i in 0..n {
            modes[(i, j)] /= sw[i];
        }
    }
    let eigenvalues = vals
        .into_iter()
        .map(|l| {
            if l < -1e-10 {
                log::warn!("clipping negative covariance eigenvalue {l:e}");
            }
            l.max(0.0)
        })
        .collect();
    Ok(KlBasis { mesh, kernel, eigenvalues, modes })
}

fn sorted_pairs(eig: SymmetricEigen<f64, nalgebra::Dyn>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn dense_top_k(b: DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    sorted_pairs(SymmetricEigen::new(b), k)
}

/// Orthogonal iteration with Rayleigh-Ritz extraction for the leading `k` pairs.
fn subspace_top_k(b: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    const MAX_ITERS: usize = 1000;
    let n = b.nrows();
    let p = (k + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6c);
    let mut q = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng)).qr().q();
    let mut prev = vec![f64::INFINITY; k];
    for _ in 0..MAX_ITERS {
        let z = b * &q;
        q = z.qr().q();
        let t = q.transpose() * b * &q;
        let (vals, y) = sorted_pairs(SymmetricEigen::new(t), p);
        let scale = vals[0].abs().max(f64::MIN_POSITIVE);
        let done = vals[..k].iter().zip(&prev).all(|(a, b)| (a - b).abs() <= 1e-12 * scale);
        prev = vals[..k].to_vec();
        if done {
            let v = &q * y.columns(0, k);
            return Ok((prev, v));
        }
    }
    Err(Error::EigFailure(format!("subspace iteration did not converge in {MAX_ITERS} steps")))
}

/// `sum_m sqrt(lambda_m) xi_m mode_m` with the `xi_m` drawn from `seed`.
pub fn sample_field(basis: &KlBasis, seed: u64) -> FeFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi: Vec<f64> = (0..basis.k()).map(|_| StandardNormal.sample(&mut rng)).collect();
    field_from_coefficients(basis, &xi)
}

/// Field for given standard-normal coefficients.
pub fn field_from_coefficients(basis: &KlBasis, xi: &[f64]) -> FeFunction {
    let n = basis.mesh.n_nodes();
    let mut f = vec![0.0; n];
    for (m, (&lam, &x)) in basis.eigenvalues.iter().zip(xi).enumerate() {
        let a = lam.sqrt() * x;
        let col = basis.modes.column(m);
        f.iter_mut().zip(col.iter()).for_each(|(fi, v)| *fi += a * v);
    }
    FeFunction::new(basis.mesh.clone(), f).expect("finite field")
}

/// Nodal square `f -> f^2`.
pub fn square_pushforward(f: &FeFunction) -> FeFunction {
    f.map(|v| v * v)
}

const KL_MAGIC: &[u8; 8] = b"KLBASIS1";

pub fn kl_to_bytes(basis: &KlBasis) -> Vec<u8> {
    let (id, param) = basis.kernel.id();
    let mut out = Vec::new();
    out.extend_from_slice(KL_MAGIC);
    out.push(id);
    out.extend_from_slice(&param.to_le_bytes());
    out.extend_from_slice(&(basis.k() as u64).to_le_bytes());
    out.extend_from_slice(&(basis.mesh.n_nodes() as u64).to_le_bytes());
    for v in basis.eigenvalues.iter().chain(basis.modes.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn kl_from_bytes(bytes: &[u8], mesh: Arc<Mesh>) -> Result<KlBasis> {
    let bad = |m: &str| Error::InvalidArgument(format!("KL cache: {m}"));
    if bytes.len() < 33 || &bytes[..8] != KL_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let kernel = CovKernel::from_id(bytes[8], f64::from_bits(word(9)))?;
    let (k, n) = (word(17) as usize, word(25) as usize);
    if n != mesh.n_nodes() {
        return Err(Error::DimMismatch { expected: mesh.n_nodes(), got: n });
    }
    let body = &bytes[33..];
    if body.len() != 8 * k * (n + 1) {
        return Err(bad("wrong payload length"));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(KlBasis {
        mesh,
        kernel,
        eigenvalues: vals[..k].to_vec(),
        modes: DMatrix::from_column_slice(n, k, &vals[k..]),
    })
}

pub fn save_kl(basis: &KlBasis, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, kl_to_bytes(basis)).map_err(|e| Error::io(path, e))
}

pub fn load_kl(path: impl AsRef<Path>, mesh: Arc<Mesh>) -> Result<KlBasis> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    kl_from_bytes(&bytes, mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::mesh::build_mesh;

    fn disk_mesh(h: f64) -> Arc<Mesh> {
        Arc::new(build_mesh(&Domain::unit_disk(), h).unwrap())
    }

    fn w_gram(basis: &KlBasis) -> DMatrix<f64> {
        let w = basis.mesh().lumped_mass();
        let m = basis.modes();
        DMatrix::from_fn(m.ncols(), m.ncols(), |a, b| (0..m.nrows()).map(|i| m[(i, a)] * w[i] * m[(i, b)]).sum())
    }

    #[test]
    fn spectrum_sorted_nonnegative_and_trace() {
        let mesh = disk_mesh(0.25);
        let n = mesh.n_nodes();
        assert!(n <= 300);
        let basis = discrete_kl(CovKernel::Cauchy, mesh.clone(), n).unwrap();
        let ev = basis.eigenvalues();
        assert!(ev.iter().all(|&l| l >= 0.0));
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        let want: f64 = mesh.lumped_mass().iter().sum::<f64>(); // Cov(x,x) = 1
        let got: f64 = ev.iter().sum();
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
        let g = w_gram(&basis.truncate(20).unwrap());
        assert!((g - DMatrix::identity(20, 20)).amax() < 1e-8);
    }

    #[test]
    fn eigen_relation_holds() {
        let mesh = disk_mesh(0.3);
        let basis = discrete_kl(CovKernel::Gauss, mesh.clone(), 5).unwrap();
        let c = covariance_matrix(&CovKernel::Gauss, &mesh);
        let w = mesh.lumped_mass();
        for m in 0..5 {
            let v = basis.modes().column(m);
            let wv = DMatrix::from_fn(v.len(), 1, |i, _| w[i] * v[i]);
            let cwv = &c * wv;
            for i in 0..v.len() {
                assert!((cwv[(i, 0)] - basis.eigenvalues()[m] * v[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn subspace_iteration_agrees_with_dense() {
        let mesh = disk_mesh(0.2);
        let sw: Vec<f64> = mesh.lumped_mass().iter().map(|w| w.sqrt()).collect();
        let n = mesh.n_nodes();
        let b = DMatrix::from_fn(n, n, |i, j| CovKernel::Cauchy.eval(mesh.vertices()[i], mesh.vertices()[j]) * sw[i] * sw[j]);
        let (d, _) = dense_top_k(b.clone(), 6);
        let (s, v) = subspace_top_k(&b, 6).unwrap();
        for (a, b) in d.iter().zip(&s) {
            assert!((a - b).abs() <= 1e-9 * d[0]);
        }
        assert!((v.transpose() * &v - DMatrix::identity(6, 6)).amax() < 1e-10);
    }

    #[test]
    fn modes_localize_on_separated_clusters() {
        let d = Domain::disk([-5.0, 0.0], 0.5).union(Domain::disk([5.0, 0.0], 0.4));
        let mesh = Arc::new(build_mesh(&d, 0.2).unwrap());
        let basis = discrete_kl(CovKernel::Gauss, mesh.clone(), 4).unwrap();
        let w = mesh.lumped_mass();
        for m in 0..4 {
            let v = basis.modes().column(m);
            let (mut left, mut right) = (0.0, 0.0);
            for (i, p) in mesh.vertices().iter().enumerate() {
                let e = w[i] * v[i] * v[i];
                if p[0] < 0.0 {
                    left += e
                } else {
                    right += e
                }
            }
            assert!(left.min(right) <= 0.05 * (left + right), "mode {m}: {left} / {right}");
        }
    }

    #[test]
    fn sampling_statistics() {
        let mesh = disk_mesh(0.4);
        let n = mesh.n_nodes();
        let basis = discrete_kl(CovKernel::Gauss, mesh.clone(), n).unwrap();
        let ns = 2000;
        let samples: Vec<FeFunction> = (0..ns).map(|s| sample_field(&basis, s as u64)).collect();
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mean: f64 = samples.iter().map(|f| f.coeffs()[i]).sum::<f64>() / ns as f64;
            assert!(mean.abs() <= 4.0 * (1.0 / ns as f64).sqrt());
        }
        for f in &samples {
            let c = f.coeffs();
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += c[i] * c[j] / ns as f64;
                }
            }
        }
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(basis.eigenvalues()));
        let truth = basis.modes() * lam * basis.modes().transpose();
        let rel = (&cov - &truth).norm() / truth.norm();
        assert!(rel <= 0.15, "relative covariance error {rel}");
    }

    #[test]
    fn zero_modes_and_linearity() {
        let mesh = disk_mesh(0.5);
        let basis = discrete_kl(CovKernel::Cauchy, mesh.clone(), 4).unwrap();
        let empty = basis.truncate(0).unwrap();
        assert!(sample_field(&empty, 3).coeffs().iter().all(|&v| v == 0.0));
        let xi = [0.3, -1.2, 0.5, 2.0];
        let xi2: Vec<f64> = xi.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (field_from_coefficients(&basis, &xi), field_from_coefficients(&basis, &xi2));
        assert!(a.coeffs().iter().zip(b.coeffs()).all(|(p, q)| (2.0 * p - q).abs() < 1e-14));
        assert!(matches!(discrete_kl(CovKernel::Gauss, mesh.clone(), 10_000), Err(Error::Truncation { .. })));
    }

    #[test]
    fn square_map() {
        let mesh = disk_mesh(0.5);
        let f = FeFunction::constant(mesh.clone(), -2.0);
        assert!(square_pushforward(&f).coeffs().iter().all(|&v| v == 4.0));
        let basis = discrete_kl(CovKernel::Cauchy, mesh, 3).unwrap();
        let g = sample_field(&basis, 1);
        let sq = square_pushforward(&g);
        assert!(sq.coeffs().iter().zip(g.coeffs()).all(|(s, v)| *s == v * v && *s >= 0.0));
    }

    #[test]
    fn cache_round_trip() {
        let mesh = disk_mesh(0.5);
        let basis = discrete_kl(CovKernel::ScaledGauss { area: 2.5 }, mesh.clone(), 3).unwrap();
        let back = kl_from_bytes(&kl_to_bytes(&basis), mesh.clone()).unwrap();
        assert_eq!(back.eigenvalues(), basis.eigenvalues());
        assert_eq!(back.modes(), basis.modes());
        assert_eq!(back.kernel(), basis.kernel());
        assert!(kl_from_bytes(b"nonsense", mesh).is_err());
    }
}
