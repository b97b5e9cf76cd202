//! Batch front end: config parsing and the `mesh`, `dataset`, `train`, `eval`, `uq` and
//! `oracle` commands.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::geometry::Domain;
use crate::mesh::{build_mesh, load_mesh, save_mesh, Mesh};
use crate::nn::{load_model, parse_architecture, save_model, MeshRegistry};
use crate::operators::{make_dataset, read_dataset, write_dataset, DatasetSpec, OperatorId, PorousMediaConfig};
use crate::train::{train, write_trace, Dataset, Summary, TrainConfig};
use crate::vascular::{self, OxygenConfig, VascularNetwork};

/// Offset between the training and test sample seeds.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Parser)]
#[command(name = "minn", version, about = "Mesh-informed neural networks and the oxygenation UQ pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build every configured mesh.
    Mesh,
    /// Generate training and test samples on the output mesh.
    Dataset,
    /// Train the configured architecture.
    Train,
    /// Report test error and generalization gap of the trained model.
    Eval,
    /// Monte Carlo hypoxia sweep over the vascular density.
    Uq,
    /// Smoothed versus exact line-integral convergence table.
    Oracle,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Mesh => Stage::Mesh,
            Command::Dataset => Stage::Dataset,
            Command::Train => Stage::Train,
            Command::Eval => Stage::Eval,
            Command::Uq => Stage::Uq,
            Command::Oracle => Stage::Oracle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Mesh,
    Dataset,
    Train,
    Eval,
    Uq,
    Oracle,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Mesh => "mesh",
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Uq => "uq",
            Stage::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    MissingFile,
    Module,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Config => "config",
            ErrorKind::MissingFile => "missing_file",
            ErrorKind::Module => "module",
        })
    }
}

/// Failure of one pipeline stage; displays as a single `key=value` line.
#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::MissingFile => 3,
            ErrorKind::Module => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = format!("{:#}", self.source).replace('\n', " ");
        write!(f, "error stage={} kind={} message={msg:?}", self.stage, self.kind)
    }
}

impl std::error::Error for CliError {}

type CliResult<T> = std::result::Result<T, CliError>;

fn fail(stage: Stage, kind: ErrorKind) -> impl FnOnce(anyhow::Error) -> CliError {
    move |source| CliError { stage, kind, source }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub mesh: Option<MeshSection>,
    pub dataset: Option<DatasetSection>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainConfig>,
    pub uq: Option<UqSection>,
    pub oracle: Option<OracleSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Domain descriptor; defaults to the dataset operator's domain.
    pub domain: Option<String>,
    /// Mesh id to target stepsize.
    pub sizes: BTreeMap<String, f64>,
    /// Id of the mesh carrying the data.
    pub output: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub operator: OperatorId,
    pub n_train: usize,
    pub n_test: usize,
    pub kl_modes: Option<usize>,
    pub radii_count: Option<usize>,
    #[serde(default)]
    pub porous: PorousMediaConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    /// Train the dense counterpart instead of the mesh-informed model.
    #[serde(default)]
    pub dense: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqSection {
    pub lambdas: Vec<f64>,
    pub replicates: usize,
    /// Target stepsize of the disk mesh.
    pub h: f64,
    #[serde(default)]
    pub per_replicate: bool,
    #[serde(default)]
    pub oxygen: OxygenConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub eps: Vec<f64>,
    /// Segments as `[x1, y1, x2, y2]`.
    pub segments: Vec<[f64; 4]>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(fail(Stage::Config, ErrorKind::MissingFile))?;
        Self::parse(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(fail(Stage::Config, ErrorKind::Config))
    }

    fn validate(&self) -> anyhow::Result<()> {
        if let Some(m) = &self.mesh {
            if m.sizes.is_empty() {
                bail!("mesh.sizes is empty");
            }
            for (id, h) in &m.sizes {
                if !(*h > 0.0 && h.is_finite()) {
                    bail!("mesh.sizes.{id} must be positive, got {h}");
                }
            }
            if !m.sizes.contains_key(&m.output) {
                bail!("mesh.output {:?} is not listed in mesh.sizes", m.output);
            }
            if let Some(d) = &m.domain {
                d.parse::<Domain>()?;
            }
        }
        if let Some(d) = &self.dataset {
            if d.n_train == 0 || d.n_test == 0 {
                bail!("dataset.n_train and dataset.n_test must be positive");
            }
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(u) = &self.uq {
            if u.lambdas.is_empty() || u.lambdas.iter().any(|l| !(*l > 0.0)) {
                bail!("uq.lambdas must be a nonempty list of positive values");
            }
            if u.replicates < 2 {
                bail!("uq.replicates must be at least 2");
            }
            if !(u.h > 0.0) {
                bail!("uq.h must be positive, got {}", u.h);
            }
            u.oxygen.validate()?;
        }
        if let Some(o) = &self.oracle {
            if o.eps.is_empty() || o.eps.iter().any(|e| !(*e > 0.0)) {
                bail!("oracle.eps must be a nonempty list of positive values");
            }
            if o.segments.is_empty() {
                bail!("oracle.segments is empty");
            }
        }
        Ok(())
    }

    fn section<'a, T>(&self, field: &'a Option<T>, name: &str, stage: Stage) -> CliResult<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| anyhow!("config has no [{name}] section"))
            .map_err(fail(stage, ErrorKind::Config))
    }

    fn domain(&self, stage: Stage) -> CliResult<Domain> {
        let mesh = self.section(&self.mesh, "mesh", stage)?;
        match (&mesh.domain, &self.dataset) {
            (Some(d), _) => d.parse().map_err(|e: crate::Error| fail(stage, ErrorKind::Config)(e.into())),
            (None, Some(ds)) => Ok(ds.operator.domain()),
            (None, None) => Err(fail(stage, ErrorKind::Config)(anyhow!("mesh.domain is required without [dataset]"))),
        }
    }
}

/// Resolved run context shared by every command.
struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

pub fn mesh_path(out: &Path, id: &str) -> PathBuf {
    out.join("meshes").join(format!("{id}.mesh"))
}

fn require(stage: Stage, paths: &[PathBuf]) -> CliResult<()> {
    for p in paths {
        if !p.exists() {
            return Err(fail(stage, ErrorKind::MissingFile)(anyhow!("required file {} not found", p.display())));
        }
    }
    Ok(())
}

fn module<T, E: Into<anyhow::Error>>(stage: Stage, r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| fail(stage, ErrorKind::Module)(e.into()))
}

fn write(stage: Stage, path: &Path, text: &str) -> CliResult<()> {
    module(stage, fs::write(path, text).with_context(|| format!("cannot write {}", path.display())))
}

/// Parses the config, applies flag overrides and runs the command; returns the text
/// report for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    let stage = cli.command.stage();
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| fail(Stage::Config, ErrorKind::Config)(anyhow!("--config <path> is required")))?;
    let cfg = RunConfig::load(path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| fail(Stage::Config, ErrorKind::Config)(anyhow!("no output directory (set `out` or --out)")))?;
    module(stage, fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display())))?;
    let ctx = Run { cfg, seed, out };
    let body = || match cli.command {
        Command::Mesh => cmd_mesh(&ctx),
        Command::Dataset => cmd_dataset(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Uq => cmd_uq(&ctx),
        Command::Oracle => cmd_oracle(&ctx),
    };
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| fail(Stage::Config, ErrorKind::Config)(e.into()))?;
            pool.install(body)
        }
        None => body(),
    }
}

fn cmd_mesh(ctx: &Run) -> CliResult<String> {
    let st = Stage::Mesh;
    let sec = ctx.cfg.section(&ctx.cfg.mesh, "mesh", st)?;
    let domain = ctx.cfg.domain(st)?;
    let dir = ctx.out.join("meshes");
    module(st, fs::create_dir_all(&dir))?;
    let mut csv = String::from("id,target_h,nodes,triangles,h,h_min,sigma\n");
    for (id, &h) in &sec.sizes {
        let mesh = module(st, build_mesh(&domain, h).with_context(|| format!("mesh {id}")))?;
        module(st, save_mesh(&mesh, mesh_path(&ctx.out, id)))?;
        log::info!("mesh {id}: {} nodes, h = {:.4}", mesh.n_nodes(), mesh.h());
        csv += &format!(
            "{id},{h},{},{},{:e},{:e},{:e}\n",
            mesh.n_nodes(),
            mesh.n_triangles(),
            mesh.h(),
            mesh.h_min(),
            mesh.sigma()
        );
    }
    write(st, &ctx.out.join("mesh_metrics.csv"), &csv)?;
    Ok(csv)
}

fn load_output_mesh(ctx: &Run, st: Stage) -> CliResult<Arc<Mesh>> {
    let sec = ctx.cfg.section(&ctx.cfg.mesh, "mesh", st)?;
    let path = mesh_path(&ctx.out, &sec.output);
    require(st, std::slice::from_ref(&path))?;
    Ok(Arc::new(module(st, load_mesh(&path))?))
}

fn cmd_dataset(ctx: &Run) -> CliResult<String> {
    let st = Stage::Dataset;
    let ds = ctx.cfg.section(&ctx.cfg.dataset, "dataset", st)?;
    let sec = ctx.cfg.section(&ctx.cfg.mesh, "mesh", st)?;
    let mesh = load_output_mesh(ctx, st)?;
    let mesh_file = format!("meshes/{}.mesh", sec.output);
    let mut report = String::new();
    for (name, n, seed) in
        [("train", ds.n_train, ctx.seed), ("test", ds.n_test, ctx.seed.wrapping_add(TEST_SEED_OFFSET))]
    {
        let spec = DatasetSpec {
            operator: ds.operator,
            n_samples: n,
            seed,
            kl_modes: ds.kl_modes,
            radii_count: ds.radii_count,
            porous: ds.porous,
        };
        let data = module(st, make_dataset(&spec, &mesh).with_context(|| format!("{name} split")))?;
        module(st, write_dataset(&ctx.out.join("data").join(name), &data, &mesh_file))?;
        report += &format!("{name}: {n} samples of {}\n", ds.operator);
    }
    Ok(report)
}

fn load_split(ctx: &Run, st: Stage, name: &str, mesh: &Arc<Mesh>) -> CliResult<Dataset> {
    let dir = ctx.out.join("data").join(name);
    require(st, &[dir.join("meta"), dir.join("inputs.bin"), dir.join("targets.bin")])?;
    let stored = module(st, read_dataset(&dir))?;
    module(st, Dataset::new(stored.inputs, stored.targets, mesh.clone()).with_context(|| format!("{name} split")))
}

fn cmd_train(ctx: &Run) -> CliResult<String> {
    let st = Stage::Train;
    let sec = ctx.cfg.section(&ctx.cfg.mesh, "mesh", st)?;
    let model_sec = ctx.cfg.section(&ctx.cfg.model, "model", st)?;
    let mut tcfg = ctx.cfg.section(&ctx.cfg.train, "train", st)?.clone();
    tcfg.seed = ctx.seed;
    let paths: Vec<PathBuf> = sec.sizes.keys().map(|id| mesh_path(&ctx.out, id)).collect();
    require(st, &paths)?;
    let mut registry = MeshRegistry::new();
    for (id, p) in sec.sizes.keys().zip(&paths) {
        registry.insert(id.clone(), Arc::new(module(st, load_mesh(p))?));
    }
    let mesh = registry[&sec.output].clone();
    let data = load_split(ctx, st, "train", &mesh)?;
    let mut model = module(st, parse_architecture(&model_sec.arch, &registry, ctx.seed))?;
    if model_sec.dense {
        model = model.dense_counterpart();
    }
    log::info!("training {} ({} parameters) on {} samples", model.arch(), model.param_count(), data.len());
    let (trained, trace) = module(st, train(&model, &data, &tcfg))?;
    module(st, save_model(&trained, ctx.out.join("model.bin")))?;
    module(st, write_trace(&trace, ctx.out.join("trace.csv")))?;
    Ok(trace
        .last()
        .map(|r| format!("epoch {} loss {:e} train_rel_err {:e}\n", r.epoch, r.loss, r.train_rel_err))
        .unwrap_or_default())
}

fn cmd_eval(ctx: &Run) -> CliResult<String> {
    let st = Stage::Eval;
    let model_path = ctx.out.join("model.bin");
    require(st, std::slice::from_ref(&model_path))?;
    let mesh = load_output_mesh(ctx, st)?;
    let model = module(st, load_model(&model_path))?;
    let train_set = load_split(ctx, st, "train", &mesh)?;
    let test_set = load_split(ctx, st, "test", &mesh)?;
    let summary = module(st, Summary::evaluate(&model, &train_set, &test_set))?;
    let json = summary.to_json();
    write(st, &ctx.out.join("summary.json"), &json)?;
    Ok(json)
}

fn cmd_uq(ctx: &Run) -> CliResult<String> {
    let st = Stage::Uq;
    let uq = ctx.cfg.section(&ctx.cfg.uq, "uq", st)?;
    let mesh = Arc::new(module(st, build_mesh(&Domain::unit_disk(), uq.h))?);
    log::info!("uq mesh: {} nodes", mesh.n_nodes());
    let rows = module(st, vascular::mc_sweep(&uq.lambdas, uq.replicates, &uq.oxygen, &mesh, ctx.seed))?;
    let csv = vascular::sweep_to_csv(&rows);
    write(st, &ctx.out.join("sweep.csv"), &csv)?;
    if uq.per_replicate {
        write(st, &ctx.out.join("replicates.csv"), &vascular::replicates_to_csv(&rows))?;
    }
    Ok(csv)
}

fn cmd_oracle(ctx: &Run) -> CliResult<String> {
    let st = Stage::Oracle;
    let sec = ctx.cfg.section(&ctx.cfg.oracle, "oracle", st)?;
    let segs = sec.segments.iter().map(|s| ([s[0], s[1]], [s[2], s[3]])).collect();
    let net: VascularNetwork = module(st, VascularNetwork::new(segs))?;
    let one = vascular::segment_integral_oracle(&net, &|_| 1.0, &sec.eps);
    let x1 = vascular::segment_integral_oracle(&net, &|x| x[0], &sec.eps);
    let csv = vascular::oracle_to_csv(&[("one", one), ("x1", x1)]);
    write(st, &ctx.out.join("oracle.csv"), &csv)?;
    Ok(csv)
}
