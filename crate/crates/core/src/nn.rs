//! Dense and mesh-informed layers, initialization, forward pass and model files.
//!
//! Layer inputs and outputs are nodal value vectors: a mesh-informed layer maps the
//! coefficients of a P1 function on one mesh to the coefficients on another.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparsity::{support_pattern, SparsityPattern};

pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => leaky_relu(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at a pre-activation value; the slope at exactly 0 is taken as 1.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu if x < 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Identity => "identity",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "leaky_relu" => Some(Activation::LeakyRelu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    MeshInformed,
}

/// Affine map followed by a componentwise activation.
///
/// Weights are stored as one value per pattern entry in row-major order; a dense layer
/// carries the full pattern so both kinds share the same parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    pattern: SparsityPattern,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.pattern.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.pattern.rows()
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_activation(&mut self, activation: Activation) {
        self.activation = activation;
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// Trainable weights plus biases.
    pub fn param_count(&self) -> usize {
        self.nnz() + self.out_dim()
    }

    /// Weight matrix with zeros off the pattern.
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        self.pattern.scatter(&self.weights)
    }

    /// Replaces the weights of a dense layer with `w` (shape `out x in`).
    pub fn set_dense_weights(&mut self, w: &DMatrix<f64>) -> Result<()> {
        if self.kind != LayerKind::Dense {
            return Err(Error::InvalidArgument("set_dense_weights on a mesh-informed layer".into()));
        }
        if w.nrows() != self.out_dim() || w.ncols() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.nnz(), got: w.len() });
        }
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                self.weights[i * w.ncols() + j] = w[(i, j)];
            }
        }
        Ok(())
    }

    /// `z = W x + b` without the activation.
    pub fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let (rp, ci) = (self.pattern.row_ptr(), self.pattern.col_idx());
        (0..self.out_dim())
            .map(|i| {
                let range = rp[i]..rp[i + 1];
                let w = &self.weights[range.clone()];
                let acc: f64 = if self.kind == LayerKind::Dense {
                    w.iter().zip(x).map(|(a, b)| a * b).sum()
                } else {
                    w.iter().zip(&ci[range]).map(|(a, &j)| a * x[j]).sum()
                };
                acc + self.bias[i]
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch { expected: self.in_dim(), got: x.len() });
        }
        let mut z = self.pre_activation(x);
        z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        Ok(z)
    }

    /// Accumulates `dW += delta x^T` on the pattern and returns `W^T delta`.
    pub(crate) fn backward(&self, x: &[f64], delta: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let (rp, ci) = (self.pattern.row_ptr(), self.pattern.col_idx());
        let mut gx = vec![0.0; self.in_dim()];
        for i in 0..self.out_dim() {
            let d = delta[i];
            gb[i] += d;
            if d == 0.0 {
                continue;
            }
            for k in rp[i]..rp[i + 1] {
                let j = ci[k];
                gw[k] += d * x[j];
                gx[j] += d * self.weights[k];
            }
        }
        gx
    }
}

fn check_dims(in_dim: usize, out_dim: usize) -> Result<()> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::InvalidDim(format!("{in_dim} -> {out_dim}")));
    }
    Ok(())
}

fn he_normal(nnz: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / nnz as f64).sqrt()).expect("positive variance");
    (0..nnz).map(|_| normal.sample(&mut rng)).collect()
}

/// Dense layer with zero bias and weights drawn with variance `1/(in*out)` from `seed`.
pub fn make_dense_seeded(in_dim: usize, out_dim: usize, activation: Activation, seed: u64) -> Result<Layer> {
    check_dims(in_dim, out_dim)?;
    let pattern = SparsityPattern::full(out_dim, in_dim);
    let mut layer = Layer {
        kind: LayerKind::Dense,
        weights: vec![0.0; pattern.nnz()],
        pattern,
        bias: vec![0.0; out_dim],
        activation,
    };
    init_params(&mut layer, seed);
    Ok(layer)
}

pub fn make_dense(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Layer> {
    make_dense_seeded(in_dim, out_dim, activation, 0)
}

/// Layer from an explicit pattern, zero bias, initialized from `seed`.
pub fn make_from_pattern(pattern: SparsityPattern, activation: Activation, seed: u64) -> Result<Layer> {
    check_dims(pattern.cols(), pattern.rows())?;
    if pattern.nnz() == 0 {
        return Err(Error::EmptyPattern {
            rows: pattern.rows(),
            cols: pattern.cols(),
            r: pattern.support_r(),
        });
    }
    let mut layer = Layer {
        kind: LayerKind::MeshInformed,
        weights: vec![0.0; pattern.nnz()],
        bias: vec![0.0; pattern.rows()],
        pattern,
        activation,
    };
    init_params(&mut layer, seed);
    Ok(layer)
}

/// Mesh-informed layer from the vertices of `mesh_in` to the vertices of `mesh_out`.
pub fn make_mesh_informed(mesh_in: &Mesh, mesh_out: &Mesh, r: f64, activation: Activation) -> Result<Layer> {
    make_mesh_informed_seeded(mesh_in, mesh_out, r, activation, 0)
}

pub fn make_mesh_informed_seeded(
    mesh_in: &Mesh,
    mesh_out: &Mesh,
    r: f64,
    activation: Activation,
    seed: u64,
) -> Result<Layer> {
    let pattern = support_pattern(mesh_in.vertices(), mesh_out.vertices(), r)?;
    make_from_pattern(pattern, activation, seed)
}

/// Draws every stored weight i.i.d. from N(0, 1/nnz) and zeroes the bias.
pub fn init_params(layer: &mut Layer, seed: u64) {
    layer.weights = he_normal(layer.nnz(), seed);
    layer.bias.iter_mut().for_each(|b| *b = 0.0);
}

/// Stack of layers applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct MinnModel {
    layers: Vec<Layer>,
    arch: String,
    seed: u64,
}

impl MinnModel {
    /// Checks that consecutive dimensions agree and forces an identity output activation.
    pub fn new(mut layers: Vec<Layer>, arch: impl Into<String>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidDim("model without layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimMismatch { expected: w[0].out_dim(), got: w[1].in_dim() });
            }
        }
        layers.last_mut().unwrap().activation = Activation::Identity;
        Ok(Self { layers, arch: arch.into(), seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn nnz_total(&self) -> usize {
        self.layers.iter().map(Layer::nnz).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// All weights and biases, layer by layer (`w_0, b_0, w_1, b_1, ...`).
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimMismatch { expected: self.param_count(), got: p.len() });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (nw, nb) = (l.weights.len(), l.bias.len());
            l.weights.copy_from_slice(&p[off..off + nw]);
            l.bias.copy_from_slice(&p[off + nw..off + nw + nb]);
            off += nw + nb;
        }
        Ok(())
    }

    /// Reinitializes layer `k` from `seed + k`.
    pub fn reinit(&mut self, seed: u64) {
        self.seed = seed;
        for (k, l) in self.layers.iter_mut().enumerate() {
            init_params(l, seed.wrapping_add(k as u64));
        }
    }

    /// Same dimensions and activations with every sparsity constraint removed.
    pub fn dense_counterpart(&self) -> MinnModel {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                make_dense_seeded(l.in_dim(), l.out_dim(), l.activation, self.seed.wrapping_add(k as u64))
                    .expect("dimensions already validated")
            })
            .collect();
        MinnModel { layers, arch: dense_arch(&self.arch), seed: self.seed }
    }
}

fn dense_arch(arch: &str) -> String {
    format!("dense_counterpart[{arch}]")
}

/// Named meshes that architecture descriptions refer to.
pub type MeshRegistry = HashMap<String, Arc<Mesh>>;

#[derive(Clone, Debug, PartialEq)]
enum Stanza {
    Input(Dim),
    Dense(Dim),
    MeshInformed { from: String, to: String, r: f64 },
}

#[derive(Clone, Debug, PartialEq)]
enum Dim {
    Fixed(usize),
    Mesh(String),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(n) => write!(f, "{n}"),
            Dim::Mesh(id) => f.write_str(id),
        }
    }
}

fn parse_stanza(index: usize, s: &str) -> Result<Stanza> {
    let err = |msg: String| Error::Spec { index, msg };
    let s = s.trim();
    let open = s.find('(').ok_or_else(|| err(format!("expected `name(args)`, got {s:?}")))?;
    if !s.ends_with(')') {
        return Err(err(format!("missing `)` in {s:?}")));
    }
    let name = s[..open].trim();
    let args: Vec<&str> = s[open + 1..s.len() - 1].split(',').map(str::trim).collect();
    let dim = |a: &str| -> Result<Dim> {
        if a.is_empty() {
            return Err(err("empty dimension".into()));
        }
        match a.parse::<usize>() {
            Ok(0) => Err(err("dimension must be positive".into())),
            Ok(n) => Ok(Dim::Fixed(n)),
            Err(_) => Ok(Dim::Mesh(a.to_string())),
        }
    };
    match (name, args.as_slice()) {
        ("input", [a]) => Ok(Stanza::Input(dim(a)?)),
        ("dense", [a]) => Ok(Stanza::Dense(dim(a)?)),
        ("mi", [from, to, r]) => {
            let r: f64 = r.parse().map_err(|_| err(format!("bad radius {r:?}")))?;
            if !(r > 0.0) {
                return Err(err("support radius must be positive".into()));
            }
            Ok(Stanza::MeshInformed { from: from.to_string(), to: to.to_string(), r })
        }
        _ => Err(err(format!("unknown stanza {s:?}"))),
    }
}

/// Builds a model from a description such as
/// `input(3) > dense(100) > dense(m9) > mi(m9, m3, 0.4) > mi(m3, m1, 0.2)`.
///
/// The first stanza fixes the input dimension; `dense(n)` takes a width or a mesh id
/// (meaning its node count). Hidden layers use leaky ReLU, the output layer none. Layer
/// `k` is initialized from `seed + k`.
pub fn parse_architecture(spec: &str, meshes: &MeshRegistry, seed: u64) -> Result<MinnModel> {
    let stanzas: Vec<Stanza> = spec
        .split('>')
        .enumerate()
        .filter(|(_, s)| !s.trim().is_empty())
        .map(|(i, s)| parse_stanza(i, s))
        .collect::<Result<_>>()?;
    if stanzas.len() < 2 {
        return Err(Error::Spec { index: stanzas.len(), msg: "need an input stanza and at least one layer".into() });
    }
    let resolve = |index: usize, d: &Dim| -> Result<usize> {
        match d {
            Dim::Fixed(n) => Ok(*n),
            Dim::Mesh(id) => meshes
                .get(id)
                .map(|m| m.n_nodes())
                .ok_or_else(|| Error::Spec { index, msg: format!("unknown mesh id {id:?}") }),
        }
    };
    let mut width = match &stanzas[0] {
        Stanza::Input(d) => resolve(0, d)?,
        _ => return Err(Error::Spec { index: 0, msg: "first stanza must be input(n)".into() }),
    };
    let n_layers = stanzas.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (index, st) in stanzas.iter().enumerate().skip(1) {
        let k = (index - 1) as u64;
        let act = if index == n_layers { Activation::Identity } else { Activation::LeakyRelu };
        let layer = match st {
            Stanza::Input(_) => {
                return Err(Error::Spec { index, msg: "input stanza only allowed first".into() })
            }
            Stanza::Dense(d) => make_dense_seeded(width, resolve(index, d)?, act, seed.wrapping_add(k))?,
            Stanza::MeshInformed { from, to, r } => {
                let lookup = |id: &String| {
                    meshes
                        .get(id)
                        .ok_or_else(|| Error::Spec { index, msg: format!("unknown mesh id {id:?}") })
                };
                let (mi, mo) = (lookup(from)?, lookup(to)?);
                if mi.n_nodes() != width {
                    return Err(Error::Spec {
                        index,
                        msg: format!("input mesh {from:?} has {} nodes but the previous layer yields {width}", mi.n_nodes()),
                    });
                }
                make_mesh_informed_seeded(mi, mo, *r, act, seed.wrapping_add(k))
                    .map_err(|e| Error::Spec { index, msg: e.to_string() })?
            }
        };
        width = layer.out_dim();
        layers.push(layer);
    }
    MinnModel::new(layers, spec.trim(), seed)
}

const MODEL_MAGIC: &str = "MINNMODEL 1";

/// Serializes a model: text header lines followed by little-endian binary blocks.
pub fn model_to_bytes(model: &MinnModel) -> Vec<u8> {
    let mut out = Vec::new();
    let mut line = |s: String| {
        out.extend_from_slice(s.as_bytes());
        out.push(b'\n');
    };
    line(MODEL_MAGIC.to_string());
    line(format!("seed {}", model.seed));
    line(format!("arch {}", model.arch.replace('\n', " ")));
    line(format!("layers {}", model.layers.len()));
    for l in &model.layers {
        let kind = match l.kind {
            LayerKind::Dense => "dense",
            LayerKind::MeshInformed => "mi",
        };
        out.extend_from_slice(
            format!(
                "{kind} {} {} {} {} {}\n",
                l.in_dim(),
                l.out_dim(),
                l.activation.tag(),
                l.pattern.support_r(),
                l.nnz()
            )
            .as_bytes(),
        );
        if l.kind == LayerKind::MeshInformed {
            for &p in l.pattern.row_ptr() {
                out.extend_from_slice(&(p as u64).to_le_bytes());
            }
            for &c in l.pattern.col_idx() {
                out.extend_from_slice(&(c as u64).to_le_bytes());
            }
        }
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::ModelFormat("header is not UTF-8".into()))
    }

    fn chunk(&mut self) -> Result<[u8; 8]> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::ModelFormat("truncated binary block".into()))?;
        self.pos += 8;
        Ok(bytes.try_into().unwrap())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.chunk().map(f64::from_le_bytes)).collect()
    }

    fn usizes(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.chunk().map(|b| u64::from_le_bytes(b) as usize)).collect()
    }
}

pub fn model_from_bytes(buf: &[u8]) -> Result<MinnModel> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    let mut r = Reader { buf, pos: 0 };
    if r.line()? != MODEL_MAGIC {
        return Err(bad("missing MINNMODEL header"));
    }
    let seed = r
        .line()?
        .strip_prefix("seed ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad seed line"))?;
    let arch = r.line()?.strip_prefix("arch ").ok_or_else(|| bad("bad arch line"))?.to_string();
    let n: usize = r
        .line()?
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad layer count"))?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let f: Vec<&str> = r.line()?.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("bad layer header"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad layer dimension"));
        let (in_dim, out_dim, nnz) = (num(f[1])?, num(f[2])?, num(f[5])?);
        check_dims(in_dim, out_dim)?;
        let activation = Activation::from_tag(f[3]).ok_or_else(|| bad("unknown activation"))?;
        let support_r: f64 = f[4].parse().map_err(|_| bad("bad support radius"))?;
        let (kind, pattern) = match f[0] {
            "dense" => {
                if nnz != in_dim * out_dim {
                    return Err(bad("dense layer weight count mismatch"));
                }
                (LayerKind::Dense, SparsityPattern::full(out_dim, in_dim))
            }
            "mi" => {
                let row_ptr = r.usizes(out_dim + 1)?;
                let col_idx = r.usizes(nnz)?;
                if row_ptr[0] != 0 || row_ptr[out_dim] != nnz || row_ptr.windows(2).any(|w| w[0] > w[1]) {
                    return Err(bad("inconsistent row pointers"));
                }
                let entries: Vec<(usize, usize)> = (0..out_dim)
                    .flat_map(|i| (row_ptr[i]..row_ptr[i + 1]).map(move |k| (i, k)))
                    .map(|(i, k)| (i, col_idx[k]))
                    .collect();
                let p = SparsityPattern::from_entries(out_dim, in_dim, support_r, &entries)
                    .map_err(|e| Error::ModelFormat(e.to_string()))?;
                (LayerKind::MeshInformed, p)
            }
            other => return Err(Error::ModelFormat(format!("unknown layer kind {other:?}"))),
        };
        let weights = r.f64s(nnz)?;
        let bias = r.f64s(out_dim)?;
        layers.push(Layer { kind, pattern, weights, bias, activation });
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after last layer"));
    }
    MinnModel::new(layers, arch, seed)
}

pub fn save_model(model: &MinnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MinnModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use crate::mesh::build_mesh;
    use rand::Rng;

    fn registry() -> MeshRegistry {
        let d = Domain::crescent();
        let mut reg = MeshRegistry::new();
        reg.insert("m9".into(), Arc::new(build_mesh(&d, 0.9).unwrap()));
        reg.insert("m3".into(), Arc::new(build_mesh(&d, 0.3).unwrap()));
        reg
    }

    #[test]
    fn leaky_values() {
        assert_eq!(leaky_relu(-2.0), -0.2);
        assert_eq!(leaky_relu(3.0), 3.0);
        assert_eq!(Activation::LeakyRelu.derivative(0.0), 1.0);
        assert_eq!(Activation::LeakyRelu.derivative(-1e-9), 0.1);
    }

    #[test]
    fn dense_counts_and_identity() {
        let l = make_dense(3, 5, Activation::LeakyRelu).unwrap();
        assert_eq!((l.nnz(), l.bias().len()), (15, 5));
        assert!(make_dense(0, 5, Activation::Identity).is_err());

        let mut id = make_dense(4, 4, Activation::Identity).unwrap();
        id.set_dense_weights(&DMatrix::identity(4, 4)).unwrap();
        let x = [1.5, -2.0, 0.0, 7.0];
        assert_eq!(id.forward(&x).unwrap(), x.to_vec());
        assert!(matches!(id.forward(&x[..3]), Err(Error::DimMismatch { expected: 4, got: 3 })));
    }

    #[test]
    fn toy_pattern_with_nine_entries() {
        // three input nodes on a line, five output nodes placed so nine pairs are close
        let input = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let output = [[0.5, 0.2], [0.5, -0.2], [1.5, 0.2], [1.5, -0.2], [2.0, 0.5]];
        let p = support_pattern(&input, &output, 0.75).unwrap();
        assert_eq!(p.nnz(), 9);
    }

    #[test]
    fn scatter_equivalence() {
        let reg = registry();
        let l = make_mesh_informed_seeded(&reg["m9"], &reg["m3"], 0.4, Activation::LeakyRelu, 7).unwrap();
        let mut dense = make_dense(l.in_dim(), l.out_dim(), Activation::LeakyRelu).unwrap();
        let w = l.weight_matrix();
        dense.set_dense_weights(&w).unwrap();
        assert_eq!(w.iter().filter(|v| **v != 0.0).count(), l.nnz());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..l.in_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a, b) = (l.forward(&x).unwrap(), dense.forward(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
    }

    #[test]
    fn self_pattern_contains_diagonal() {
        let m = build_mesh(&Domain::unit_disk(), 0.5).unwrap();
        let l = make_mesh_informed(&m, &m, 1e-9, Activation::Identity).unwrap();
        assert!((0..m.n_nodes()).all(|i| l.pattern().contains(i, i)));
    }

    #[test]
    fn init_is_deterministic_and_zero_bias() {
        let reg = registry();
        let a = make_mesh_informed_seeded(&reg["m3"], &reg["m3"], 0.5, Activation::LeakyRelu, 11).unwrap();
        let b = make_mesh_informed_seeded(&reg["m3"], &reg["m3"], 0.5, Activation::LeakyRelu, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.bias().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_large_layer() {
        let mut l = make_dense(400, 300, Activation::Identity).unwrap();
        init_params(&mut l, 42);
        let n = l.nnz() as f64;
        let mean = l.weights().iter().sum::<f64>() / n;
        let var = l.weights().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(var >= 0.9 / n && var <= 1.1 / n, "variance {var}");
        assert!(mean.abs() <= 4.0 / n);
    }

    #[test]
    fn architecture_parsing() {
        let reg = registry();
        let m = parse_architecture("input(3) > dense(100) > dense(m9) > mi(m9, m3, 0.4)", &reg, 1).unwrap();
        assert_eq!(m.depth(), 2);
        assert_eq!(m.in_dim(), 3);
        assert_eq!(m.out_dim(), reg["m3"].n_nodes());
        assert_eq!(m.layers()[2].kind(), LayerKind::MeshInformed);
        assert_eq!(m.layers()[2].activation(), Activation::Identity);
        assert_eq!(m.layers()[0].activation(), Activation::LeakyRelu);

        let e = |s: &str| parse_architecture(s, &reg, 1).unwrap_err();
        assert!(matches!(e(""), Error::Spec { .. }));
        assert!(matches!(e("input(3) > dense(10) > mi(m9, m3, 0.4)"), Error::Spec { index: 2, .. }));
        assert!(matches!(e("input(3) > conv(3)"), Error::Spec { index: 1, .. }));
        assert!(matches!(e("input(3) > dense(m7)"), Error::Spec { index: 1, .. }));
    }

    #[test]
    fn dense_counterpart_counts() {
        let reg = registry();
        let m = parse_architecture("input(3) > dense(m9) > mi(m9, m3, 0.4)", &reg, 5).unwrap();
        let d = m.dense_counterpart();
        let (n9, n3) = (reg["m9"].n_nodes(), reg["m3"].n_nodes());
        assert_eq!(d.param_count(), 3 * n9 + n9 + n9 * n3 + n3);
        assert_eq!(m.param_count(), 3 * n9 + n9 + m.layers()[1].nnz() + n3);
    }

    #[test]
    fn model_round_trip() {
        let reg = registry();
        let m = parse_architecture("input(2) > dense(m9) > mi(m9, m3, 0.4)", &reg, 9).unwrap();
        let bytes = model_to_bytes(&m);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
        assert!(model_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(model_from_bytes(b"garbage\n").is_err());
    }

    #[test]
    fn params_round_trip() {
        let reg = registry();
        let mut m = parse_architecture("input(2) > dense(4) > mi(m9, m9, 1.0)", &reg, 1);
        assert!(m.is_err());
        m = parse_architecture("input(2) > dense(m9) > mi(m9, m9, 1.0)", &reg, 1);
        let mut m = m.unwrap();
        let p: Vec<f64> = (0..m.param_count()).map(|i| i as f64).collect();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
    }
}
