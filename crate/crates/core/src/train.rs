//! L2 loss, relative error, reverse-mode gradients and full-batch optimizers.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, CsrMatrix};
use crate::mesh::Mesh;
use crate::nn::MinnModel;

/// Samples are evaluated in fixed chunks so the reduction order never depends on threads.
const CHUNK: usize = 8;

/// Paired input and target vectors; targets live on `output_mesh`.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    output_mesh: Arc<Mesh>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, output_mesh: Arc<Mesh>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimMismatch { expected: inputs.len(), got: targets.len() });
        }
        let n_out = output_mesh.n_nodes();
        if let Some(t) = targets.iter().find(|t| t.len() != n_out) {
            return Err(Error::DimMismatch { expected: n_out, got: t.len() });
        }
        if let Some(first) = inputs.first() {
            if let Some(x) = inputs.iter().find(|x| x.len() != first.len()) {
                return Err(Error::DimMismatch { expected: first.len(), got: x.len() });
            }
        }
        Ok(Self { inputs, targets, output_mesh })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn output_mesh(&self) -> &Arc<Mesh> {
        &self.output_mesh
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            output_mesh: self.output_mesh.clone(),
        }
    }

    fn check(&self, model: &MinnModel) -> Result<()> {
        if model.out_dim() != self.output_mesh.n_nodes() {
            return Err(Error::DimMismatch { expected: self.output_mesh.n_nodes(), got: model.out_dim() });
        }
        if let Some(x) = self.inputs.first() {
            if x.len() != model.in_dim() {
                return Err(Error::DimMismatch { expected: model.in_dim(), got: x.len() });
            }
        }
        Ok(())
    }
}

fn residual(model: &MinnModel, x: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let y = model.forward(x)?;
    Ok(t.iter().zip(&y).map(|(a, b)| a - b).collect())
}

/// `(1/n) sum_s e_s^T M e_s` with `e_s = target_s - model(input_s)`.
pub fn loss_l2_mse(model: &MinnModel, data: &Dataset) -> Result<f64> {
    data.check(model)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let m = data.output_mesh.mass_matrix();
    let parts: Vec<f64> = chunked(data.len())
        .into_par_iter()
        .map(|range| -> Result<f64> {
            let mut acc = 0.0;
            for s in range {
                acc += m.quad_form(&residual(model, &data.inputs[s], &data.targets[s])?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64)
}

/// Mean over samples of `||e_s|| / ||target_s||` in the L2 norm of the output mesh.
pub fn relative_l2_error(model: &MinnModel, data: &Dataset) -> Result<f64> {
    data.check(model)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let m = data.output_mesh.mass_matrix();
    let parts: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let denom = m.quad_form(&data.targets[s]).max(0.0).sqrt();
            if denom == 0.0 {
                return Err(Error::ZeroTarget(s));
            }
            let e = residual(model, &data.inputs[s], &data.targets[s])?;
            Ok(m.quad_form(&e).max(0.0).sqrt() / denom)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64)
}

/// `test error - train error`.
pub fn generalization_gap(model: &MinnModel, train: &Dataset, test: &Dataset) -> Result<f64> {
    Ok(relative_l2_error(model, test)? - relative_l2_error(model, train)?)
}

fn chunked(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect()
}

/// Adds the gradient of `e^T M e` (scaled by `scale`) for one sample into `grad`.
fn accumulate_sample(
    model: &MinnModel,
    m: &CsrMatrix,
    x: &[f64],
    t: &[f64],
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let layers = model.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pre = Vec::with_capacity(layers.len());
    acts.push(x.to_vec());
    for l in layers {
        let z = l.pre_activation(acts.last().unwrap());
        acts.push(z.iter().map(|&v| l.activation().apply(v)).collect());
        pre.push(z);
    }
    let y = acts.last().unwrap();
    let e: Vec<f64> = t.iter().zip(y).map(|(a, b)| a - b).collect();
    let me = m.mul_vec(&e);
    let loss = dot(&e, &me);
    // d(e^T M e)/dy = -2 M e
    let mut delta: Vec<f64> = me.iter().map(|v| -2.0 * scale * v).collect();

    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offsets.push(off);
        off += l.param_count();
    }
    for k in (0..layers.len()).rev() {
        let l = &layers[k];
        let act = l.activation();
        delta.iter_mut().zip(&pre[k]).for_each(|(d, &z)| *d *= act.derivative(z));
        let (gw, gb) = grad[offsets[k]..offsets[k] + l.param_count()].split_at_mut(l.nnz());
        let gx = l.backward(&acts[k], &delta, gw, gb);
        delta = gx;
    }
    Ok(loss)
}

/// Loss and its gradient with respect to `model.params()`.
pub fn loss_and_gradient(model: &MinnModel, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    data.check(model)?;
    let np = model.param_count();
    if data.is_empty() {
        return Ok((0.0, vec![0.0; np]));
    }
    let m = data.output_mesh.mass_matrix();
    let scale = 1.0 / data.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = chunked(data.len())
        .into_par_iter()
        .map(|range| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; np];
            let mut loss = 0.0;
            for s in range {
                loss += accumulate_sample(model, m, &data.inputs[s], &data.targets[s], scale, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; np];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * scale, grad))
}

pub fn gradient(model: &MinnModel, data: &Dataset) -> Result<Vec<f64>> {
    loss_and_gradient(model, data).map(|(_, g)| g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Lbfgs {
        #[serde(default = "default_memory")]
        memory: usize,
        #[serde(default = "default_line_search")]
        max_line_search: usize,
        /// Take the full step `lr * d` without a line search.
        #[serde(default)]
        fixed_step: bool,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
    },
}

fn default_memory() -> usize {
    10
}
fn default_line_search() -> usize {
    25
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Lbfgs { memory: 10, max_line_search: 25, fixed_step: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Optimizer iterations per reported epoch.
    #[serde(default = "default_inner")]
    pub iterations_per_epoch: usize,
}

fn default_lr() -> f64 {
    1.0
}
fn default_inner() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, optimizer: Optimizer::default(), lr: 1.0, seed: 0, iterations_per_epoch: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::TrainConfig("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::TrainConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iterations_per_epoch == 0 {
            return Err(Error::TrainConfig("iterations_per_epoch must be at least 1".into()));
        }
        match self.optimizer {
            Optimizer::Lbfgs { memory, max_line_search, .. } if memory == 0 || max_line_search == 0 => {
                Err(Error::TrainConfig("lbfgs memory and max_line_search must be positive".into()))
            }
            Optimizer::Adam { beta1, beta2 }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) =>
            {
                Err(Error::TrainConfig("adam betas must lie in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_rel_err: f64,
}

/// Objective used by the optimizers: value and gradient at a parameter vector.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

struct ModelObjective<'a> {
    model: MinnModel,
    data: &'a Dataset,
}

impl Objective for ModelObjective<'_> {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.set_params(x)?;
        loss_and_gradient(&self.model, self.data)
    }
}

const ARMIJO_C: f64 = 1e-4;

/// Limited-memory BFGS state with two-loop recursion.
pub struct Lbfgs {
    memory: usize,
    max_line_search: usize,
    fixed_step: bool,
    lr: f64,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    first: bool,
}

impl Lbfgs {
    pub fn new(memory: usize, max_line_search: usize, fixed_step: bool, lr: f64) -> Self {
        Self { memory, max_line_search, fixed_step, lr, pairs: VecDeque::new(), first: true }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `(x, f, g)`; returns the new point, value and gradient.
    /// Returns `None` when no descent step could be found.
    pub fn step(
        &mut self,
        obj: &mut dyn Objective,
        x: &[f64],
        f: f64,
        g: &[f64],
    ) -> Result<Option<(Vec<f64>, f64, Vec<f64>)>> {
        let mut d = self.direction(g);
        let mut slope = dot(g, &d);
        if !(slope < 0.0) {
            self.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(g, g);
            if slope == 0.0 {
                return Ok(None);
            }
        }
        let mut t = self.lr;
        if self.pairs.is_empty() && self.first {
            let g1: f64 = g.iter().map(|v| v.abs()).sum();
            t = self.lr * (1.0 / g1).min(1.0);
        }
        self.first = false;
        let trial = |t: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + t * b).collect() };

        let accepted = if self.fixed_step {
            let xn = trial(t);
            let (fnew, gnew) = obj.eval(&xn)?;
            Some((xn, fnew, gnew))
        } else {
            let mut found = None;
            for _ in 0..self.max_line_search {
                let xn = trial(t);
                let (fnew, gnew) = obj.eval(&xn)?;
                if fnew.is_finite() && fnew <= f + ARMIJO_C * t * slope {
                    found = Some((xn, fnew, gnew));
                    break;
                }
                t *= 0.5;
            }
            found
        };
        let Some((xn, fnew, gnew)) = accepted else {
            // restart from steepest descent next time, or give up if already there
            if self.pairs.is_empty() {
                return Ok(None);
            }
            self.pairs.clear();
            return Ok(Some((x.to_vec(), f, g.to_vec())));
        };
        let s: Vec<f64> = xn.iter().zip(x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if self.pairs.len() == self.memory {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, 1.0 / sy));
        }
        Ok(Some((xn, fnew, gnew)))
    }
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn update(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Runs the configured optimizer on `obj`; `on_epoch` receives the epoch index, the
/// current point and its objective value after each epoch.
pub fn minimize(
    obj: &mut dyn Objective,
    x0: Vec<f64>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &[f64], f64) -> Result<()>,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut x = x0;
    let (mut f, mut g) = obj.eval(&x)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    match config.optimizer {
        Optimizer::Lbfgs { memory, max_line_search, fixed_step } => {
            let mut opt = Lbfgs::new(memory, max_line_search, fixed_step, config.lr);
            let mut stalled = false;
            for epoch in 1..=config.epochs {
                for _ in 0..config.iterations_per_epoch {
                    if stalled {
                        break;
                    }
                    match opt.step(obj, &x, f, &g)? {
                        Some((xn, fnew, gnew)) => {
                            x = xn;
                            f = fnew;
                            g = gnew;
                        }
                        None => stalled = true,
                    }
                    if !f.is_finite() {
                        return Err(Error::NonFiniteLoss(epoch));
                    }
                }
                on_epoch(epoch, &x, f)?;
            }
        }
        Optimizer::Adam { beta1, beta2 } => {
            let mut opt = Adam::new(x.len(), config.lr, beta1, beta2);
            for epoch in 1..=config.epochs {
                for _ in 0..config.iterations_per_epoch {
                    opt.update(&mut x, &g);
                    (f, g) = obj.eval(&x)?;
                    if !f.is_finite() {
                        return Err(Error::NonFiniteLoss(epoch));
                    }
                }
                on_epoch(epoch, &x, f)?;
            }
        }
    }
    Ok(x)
}

/// Full-batch training; returns the trained model and one record per epoch.
pub fn train(model: &MinnModel, data: &Dataset, config: &TrainConfig) -> Result<(MinnModel, Vec<EpochRecord>)> {
    data.check(model)?;
    let mut obj = ModelObjective { model: model.clone(), data };
    let mut eval_model = model.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let x = minimize(&mut obj, model.params(), config, |epoch, x, loss| {
        eval_model.set_params(x)?;
        let rel = relative_l2_error(&eval_model, data)?;
        log::debug!("epoch {epoch}: loss {loss:.6e}, train rel err {rel:.4}");
        trace.push(EpochRecord { epoch, loss, train_rel_err: rel });
        Ok(())
    })?;
    let mut trained = model.clone();
    trained.set_params(&x)?;
    Ok((trained, trace))
}

pub fn trace_to_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,train_rel_err\n");
    for r in trace {
        writeln!(s, "{},{:e},{:e}", r.epoch, r.loss, r.train_rel_err).unwrap();
    }
    s
}

pub fn write_trace(trace: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Final metrics of a trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub test_rel_err: f64,
    pub gen_gap: f64,
    pub param_count: usize,
    pub nnz_total: usize,
}

impl Summary {
    pub fn evaluate(model: &MinnModel, train: &Dataset, test: &Dataset) -> Result<Self> {
        let test_rel_err = relative_l2_error(model, test)?;
        let train_rel_err = relative_l2_error(model, train)?;
        Ok(Self {
            test_rel_err,
            gen_gap: test_rel_err - train_rel_err,
            param_count: model.param_count(),
            nnz_total: model.nnz_total(),
        })
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"test_rel_err\": {:e}, \"gen_gap\": {:e}, \"param_count\": {}, \"nnz_total\": {}}}\n",
            self.test_rel_err, self.gen_gap, self.param_count, self.nnz_total
        )
    }
}
