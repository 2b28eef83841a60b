//! The frozen toy generator: an affine mapping network, a chain of affine+tanh
//! synthesis stages, Gaussian identity clusters in latent space, and the
//! adapters that can be slotted in after any stage.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{
    gaussian_matrix, kaiming_uniform_init, l2_dist, matvec, matvec_t, orthonormal_rows,
    sample_gaussian, Matrix, Rng, Vector,
};
use crate::odeflow::{
    adjoint_from_final, backprop_recorded, integrate, integrate_recorded, RecordedFlow,
    SolverSpec, Trajectory,
};
use crate::vecfield::{init_adapter_params, VectorFieldParams};

/// Width of the identity and perceptual embeddings.
pub const EMBED_DIM: usize = 16;
/// Draws used to estimate the mean latent and the latent scale.
pub const W_BAR_SAMPLES: usize = 10_000;
/// Minimum center separation in units of `cluster_std`.
pub const SEPARATION_SIGMAS: f64 = 6.0;
/// Build-time gate on nearest-center accuracy of the frozen generator.
pub const WELL_POSED_ACCURACY: f64 = 0.99;
const GATE_SAMPLES_PER_ID: usize = 200;
/// Separation the builder actually spreads centers to; twice the invariant
/// keeps the frozen generator's classification gate comfortably met.
const BUILD_SEPARATION_SIGMAS: f64 = 2.0 * SEPARATION_SIGMAS;
const STAGE_GAIN: f64 = 1.0;
/// Candidate draws spent on rejection-sampling separated centers.
const CENTER_CANDIDATES: usize = 100_000;

/// Seeded description of a world; worlds are rebuilt from this, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub k: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub cluster_std: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            k: 8,
            latent_dim: 8,
            obs_dim: 32,
            cluster_std: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.latent_dim < 2 || self.obs_dim < 2 {
            return Err(Error::Config("latent_dim and obs_dim must be >= 2".into()));
        }
        if !(self.cluster_std >= 0.0) || !self.cluster_std.is_finite() {
            return Err(Error::Config(format!(
                "cluster_std must be finite and >= 0, got {}",
                self.cluster_std
            )));
        }
        Ok(())
    }

    /// Output widths of the synthesis stages.
    pub fn stage_dims(&self) -> Vec<usize> {
        vec![(self.obs_dim / 2).max(2), self.obs_dim]
    }
}

/// One frozen synthesis stage `x -> tanh(W x + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStage {
    pub weight: Matrix,
    pub bias: Vector,
}

impl SynthStage {
    pub fn forward(&self, x: &[f64]) -> Vector {
        let mut pre = matvec(&self.weight, x);
        pre.axpy(1.0, &self.bias);
        pre.iter().map(|v| v.tanh()).collect()
    }

    /// Pulls `ybar` back through the stage given its output `y`.
    fn backward(&self, y: &[f64], ybar: &[f64]) -> Vector {
        let s: Vector = ybar.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
        matvec_t(&self.weight, &s)
    }
}

/// Everything that defines a world apart from the derived statistics.
#[derive(Debug, Clone)]
pub struct WorldParts {
    pub map_weight: Matrix,
    pub map_bias: Vector,
    pub stages: Vec<SynthStage>,
    pub identity_centers: Vec<Vector>,
    pub cluster_std: f64,
    pub id_embed: Matrix,
    pub per_embed: Matrix,
}

/// Immutable generator world.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    config: WorldConfig,
    parts: WorldParts,
    w_bar: Vector,
    latent_scale: f64,
    center_embeddings: Vec<Vector>,
}

impl ToyWorld {
    /// Assembles a world from explicit parts, estimating the mean latent and
    /// per-coordinate latent scale from `W_BAR_SAMPLES` draws of `Map(z)`.
    pub fn from_parts(parts: WorldParts, seed: u64) -> Result<Self> {
        let latent_dim = parts.map_weight.cols();
        if parts.map_weight.rows() != latent_dim || parts.map_bias.len() != latent_dim {
            return Err(Error::Config("mapping network must be square latent->latent".into()));
        }
        let mut width = latent_dim;
        for (i, s) in parts.stages.iter().enumerate() {
            if s.weight.cols() != width || s.bias.len() != s.weight.rows() {
                return Err(Error::Config(format!("stage {i} has inconsistent shape")));
            }
            width = s.weight.rows();
        }
        if parts.stages.is_empty() {
            return Err(Error::Config("world needs at least one stage".into()));
        }
        if parts.id_embed.cols() != width || parts.per_embed.cols() != width {
            return Err(Error::Config("embeddings must act on the observation".into()));
        }
        if parts.identity_centers.iter().any(|c| c.len() != latent_dim) {
            return Err(Error::Config("identity centers must live in latent space".into()));
        }
        let config = WorldConfig {
            seed,
            k: parts.identity_centers.len(),
            latent_dim,
            obs_dim: width,
            cluster_std: parts.cluster_std,
        };

        let mut rng = Rng::new(seed).derive(STREAM_W_BAR);
        let mut sum = Vector::zeros(latent_dim);
        let mut sumsq = Vector::zeros(latent_dim);
        for _ in 0..W_BAR_SAMPLES {
            let z = sample_gaussian(&mut rng, latent_dim, 0.0, 1.0)?;
            let w = affine(&parts.map_weight, &parts.map_bias, &z);
            for i in 0..latent_dim {
                sum[i] += w[i];
                sumsq[i] += w[i] * w[i];
            }
        }
        let n = W_BAR_SAMPLES as f64;
        let w_bar = sum.scale(1.0 / n);
        let latent_scale = (0..latent_dim)
            .map(|i| (sumsq[i] / n - w_bar[i] * w_bar[i]).max(0.0).sqrt())
            .sum::<f64>()
            / latent_dim as f64;

        let mut world = ToyWorld {
            config,
            parts,
            w_bar,
            latent_scale,
            center_embeddings: Vec::new(),
        };
        world.center_embeddings = world
            .parts
            .identity_centers
            .iter()
            .map(|c| world.id_embedding(&world.frozen(c)))
            .collect();
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn parts(&self) -> &WorldParts {
        &self.parts
    }

    pub fn k(&self) -> usize {
        self.parts.identity_centers.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.parts.map_weight.cols()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    pub fn stages(&self) -> &[SynthStage] {
        &self.parts.stages
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.parts.stages[stage].weight.rows()
    }

    pub fn identity_centers(&self) -> &[Vector] {
        &self.parts.identity_centers
    }

    pub fn cluster_std(&self) -> f64 {
        self.parts.cluster_std
    }

    /// Mean of `Map(z)` over Gaussian `z`.
    pub fn w_bar(&self) -> &Vector {
        &self.w_bar
    }

    /// Average per-coordinate standard deviation of `Map(z)`; the unit in
    /// which target offsets are expressed.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn center_embeddings(&self) -> &[Vector] {
        &self.center_embeddings
    }

    /// Fixed identity embedding of an observation.
    pub fn id_embedding(&self, x: &[f64]) -> Vector {
        matvec(&self.parts.id_embed, x)
    }

    /// Fixed perceptual embedding of an observation.
    pub fn per_embedding(&self, x: &[f64]) -> Vector {
        matvec(&self.parts.per_embed, x)
    }

    /// The frozen generator's output.
    pub fn frozen(&self, w: &[f64]) -> Vector {
        let mut x = Vector::from(w);
        for s in &self.parts.stages {
            x = s.forward(&x);
        }
        x
    }

    /// Nearest identity center in identity-embedding space.
    pub fn classify(&self, x: &[f64]) -> usize {
        let e = self.id_embedding(x);
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.center_embeddings.iter().enumerate() {
            let d = l2_dist(&e, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// SHA-256 over every frozen quantity, for immutability checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_bits().to_le_bytes());
            }
        };
        feed(self.parts.map_weight.data());
        feed(&self.parts.map_bias);
        for s in &self.parts.stages {
            feed(s.weight.data());
            feed(&s.bias);
        }
        for c in &self.parts.identity_centers {
            feed(c);
        }
        feed(&[self.parts.cluster_std]);
        feed(self.parts.id_embed.data());
        feed(self.parts.per_embed.data());
        feed(&self.w_bar);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

const STREAM_MAP: u64 = 1;
const STREAM_STAGES: u64 = 2;
const STREAM_CENTERS: u64 = 3;
const STREAM_EMBED: u64 = 4;
const STREAM_W_BAR: u64 = 5;
const STREAM_GATE: u64 = 6;

fn affine(m: &Matrix, b: &[f64], x: &[f64]) -> Vector {
    let mut y = matvec(m, x);
    y.axpy(1.0, b);
    y
}

/// Builds the default-shaped world (two synthesis stages) from a seed.
///
/// The first stage is centered on the mapping network's bias so the frozen
/// generator is odd about the mean latent. Centers are `Map(z)` draws kept
/// only when at least `2 * SEPARATION_SIGMAS * cluster_std` from every
/// earlier center, so identities sit inside the bulk of the latent
/// distribution. If that runs out of candidates, the remaining centers are
/// plain draws and the whole set is pushed apart about the mean latent.
pub fn build_toy_world(seed: u64, k: usize, latent_dim: usize, obs_dim: usize) -> Result<ToyWorld> {
    build_world(&WorldConfig {
        seed,
        k,
        latent_dim,
        obs_dim,
        ..WorldConfig::default()
    })
}

pub fn build_world(cfg: &WorldConfig) -> Result<ToyWorld> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let d = cfg.latent_dim;

    let mut rng = root.derive(STREAM_MAP);
    let map_weight = gaussian_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt())?;
    let map_bias = sample_gaussian(&mut rng, d, 0.0, 0.5)?;

    let mut rng = root.derive(STREAM_STAGES);
    let mut stages = Vec::new();
    let mut width = d;
    for (i, &out) in cfg.stage_dims().iter().enumerate() {
        let weight = gaussian_matrix(&mut rng, out, width, STAGE_GAIN / (width as f64).sqrt())?;
        let bias = if i == 0 {
            matvec(&weight, &map_bias).scale(-1.0)
        } else {
            Vector::zeros(out)
        };
        stages.push(SynthStage { weight, bias });
        width = out;
    }

    let mut rng = root.derive(STREAM_CENTERS);
    let min_sep = BUILD_SEPARATION_SIGMAS * cfg.cluster_std;
    let mut centers: Vec<Vector> = Vec::with_capacity(cfg.k);
    for _ in 0..CENTER_CANDIDATES {
        if centers.len() == cfg.k {
            break;
        }
        let z = sample_gaussian(&mut rng, d, 0.0, 1.0)?;
        let c = affine(&map_weight, &map_bias, &z);
        if centers.iter().all(|o| l2_dist(o, &c) >= min_sep) {
            centers.push(c);
        }
    }
    while centers.len() < cfg.k {
        let z = sample_gaussian(&mut rng, d, 0.0, 1.0)?;
        centers.push(affine(&map_weight, &map_bias, &z));
    }
    let closest = min_pairwise_distance(&centers);
    if closest < min_sep {
        if closest < 1e-9 {
            return Err(Error::Config(
                "identity centers coincide; separation unachievable".into(),
            ));
        }
        let factor = min_sep / closest * (1.0 + 1e-9);
        for c in &mut centers {
            let offset = c.sub(&map_bias).scale(factor);
            *c = map_bias.add(&offset);
        }
        if min_pairwise_distance(&centers) < min_sep {
            return Err(Error::Config("rescaling failed to separate identity centers".into()));
        }
    }

    let mut rng = root.derive(STREAM_EMBED);
    let e = EMBED_DIM.min(width);
    let id_embed = orthonormal_rows(&mut rng, e, width)?;
    let per_embed = orthonormal_rows(&mut rng, e, width)?;

    let world = ToyWorld::from_parts(
        WorldParts {
            map_weight,
            map_bias,
            stages,
            identity_centers: centers,
            cluster_std: cfg.cluster_std,
            id_embed,
            per_embed,
        },
        cfg.seed,
    )?;

    let acc = frozen_accuracy(&world, &mut root.derive(STREAM_GATE), GATE_SAMPLES_PER_ID)?;
    if acc < WELL_POSED_ACCURACY {
        return Err(Error::Config(format!(
            "world is not well posed: frozen nearest-center accuracy {acc:.4} < {WELL_POSED_ACCURACY}"
        )));
    }
    Ok(world)
}

fn min_pairwise_distance(points: &[Vector]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(l2_dist(&points[i], &points[j]));
        }
    }
    best
}

/// Fraction of identity samples the frozen generator maps closest to their
/// own center.
pub fn frozen_accuracy(world: &ToyWorld, rng: &mut Rng, per_id: usize) -> Result<f64> {
    let mut hits = 0usize;
    for id in 0..world.k() {
        for _ in 0..per_id {
            let w = sample_identity(world, rng, id)?;
            if world.classify(&world.frozen(&w)) == id {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (world.k() * per_id) as f64)
}

/// `w = Map(z)`
pub fn map_latent(world: &ToyWorld, z: &[f64]) -> Vector {
    assert_eq!(z.len(), world.latent_dim(), "map_latent: wrong latent dimension");
    affine(&world.parts.map_weight, &world.parts.map_bias, z)
}

/// A fresh latent from identity `id`'s cluster.
pub fn sample_identity(world: &ToyWorld, rng: &mut Rng, id: usize) -> Result<Vector> {
    if id >= world.k() {
        return Err(Error::invalid(format!(
            "identity {id} out of range (k = {})",
            world.k()
        )));
    }
    let noise = sample_gaussian(rng, world.latent_dim(), 0.0, world.cluster_std())?;
    Ok(world.parts.identity_centers[id].add(&noise))
}

/// A generic latent `Map(z)` with Gaussian `z`.
pub fn sample_latent(world: &ToyWorld, rng: &mut Rng) -> Result<Vector> {
    let z = sample_gaussian(rng, world.latent_dim(), 0.0, 1.0)?;
    Ok(map_latent(world, &z))
}

/// Low-rank residual `h -> h + A (B h)` with `A: dim x r`, `B: r x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankAdapter {
    /// Kaiming-uniform `A`, zero `B`: identity at init.
    pub fn init(rng: &mut Rng, dim: usize, rank: usize) -> Result<Self> {
        Ok(LowRankAdapter {
            a: kaiming_uniform_init(rng, dim, rank)?,
            b: Matrix::zeros(rank, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn forward(&self, h: &[f64]) -> (Vector, Vector) {
        let bh = matvec(&self.b, h);
        let mut y = Vector::from(h);
        y.axpy(1.0, &matvec(&self.a, &bh));
        (y, bh)
    }

    /// `lowrank v1`, `dim`, `rank`, then blocks `a` and `b`, row-major.
    pub fn to_text(&self) -> String {
        let mut s = format!("lowrank v1\ndim {}\nrank {}\n", self.dim(), self.a.cols());
        for (name, m) in [("a", &self.a), ("b", &self.b)] {
            s.push_str(name);
            for x in m.data() {
                s.push_str(&format!(" {x:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some("lowrank v1") {
            return Err(bad("missing `lowrank v1` header".into()));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(key) {
                return Err(bad(format!("expected `{key}` line, found `{line}`")));
            }
            Ok(toks.map(String::from).collect())
        };
        let count = |v: Vec<String>, key: &str| -> Result<usize> {
            match v.as_slice() {
                [x] => x.parse().ok().filter(|&n| n > 0).ok_or_else(|| bad(format!("bad `{key}` value `{x}`"))),
                _ => Err(bad(format!("`{key}` takes one value"))),
            }
        };
        let dim = count(field("dim")?, "dim")?;
        let rank = count(field("rank")?, "rank")?;
        let mut block = |key: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let vals = field(key)?
                .iter()
                .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("block `{key}` has a bad value")))?;
            if vals.len() != rows * cols {
                return Err(bad(format!("block `{key}` has {} values, expected {}", vals.len(), rows * cols)));
            }
            Matrix::new(rows, cols, vals)
        };
        let a = block("a", dim, rank)?;
        let b = block("b", rank, dim)?;
        if lines.next().is_some() {
            return Err(bad("trailing content after `b`".into()));
        }
        Ok(LowRankAdapter { a, b })
    }
}

/// What sits after a stage.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterModule {
    /// Neural ODE flow of the stage output.
    Flow {
        params: VectorFieldParams,
        solver: SolverSpec,
    },
    /// Discrete low-rank residual layer.
    LowRank(LowRankAdapter),
}

impl AdapterModule {
    pub fn param_count(&self) -> usize {
        match self {
            AdapterModule::Flow { params, .. } => params.param_count(),
            AdapterModule::LowRank(l) => l.a.data().len() + l.b.data().len(),
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            AdapterModule::Flow { params, .. } => out.extend(params.to_flat()),
            AdapterModule::LowRank(l) => {
                out.extend_from_slice(l.a.data());
                out.extend_from_slice(l.b.data());
            }
        }
    }

    fn read_flat(&mut self, flat: &[f64]) {
        match self {
            AdapterModule::Flow { params, .. } => params.set_flat(flat),
            AdapterModule::LowRank(l) => {
                let na = l.a.data().len();
                l.a.data_mut().copy_from_slice(&flat[..na]);
                l.b.data_mut().copy_from_slice(&flat[na..]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageAdapter {
    pub stage: usize,
    pub module: AdapterModule,
}

/// Adapters keyed by stage, at most one per stage, in stage order.
///
/// A stack of `Flow` adapters is the Neural ODE configuration; a stack of
/// `LowRank` adapters is the discrete baseline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterStack {
    adapters: Vec<StageAdapter>,
}

impl AdapterStack {
    pub fn new(mut adapters: Vec<StageAdapter>, world: &ToyWorld) -> Result<Self> {
        adapters.sort_by_key(|a| a.stage);
        for w in adapters.windows(2) {
            if w[0].stage == w[1].stage {
                return Err(Error::invalid(format!("two adapters on stage {}", w[0].stage)));
            }
        }
        for a in &adapters {
            if a.stage >= world.stages().len() {
                return Err(Error::invalid(format!("no stage {}", a.stage)));
            }
            let dim = match &a.module {
                AdapterModule::Flow { params, solver } => {
                    solver.validate()?;
                    params.dim()
                }
                AdapterModule::LowRank(l) => l.dim(),
            };
            if dim != world.stage_dim(a.stage) {
                return Err(Error::invalid(format!(
                    "adapter on stage {} has dim {dim}, stage output is {}",
                    a.stage,
                    world.stage_dim(a.stage)
                )));
            }
        }
        Ok(AdapterStack { adapters })
    }

    /// Freshly initialized Neural ODE adapters after every stage.
    pub fn neural_ode(world: &ToyWorld, rng: &mut Rng, hidden: usize, solver: SolverSpec) -> Result<Self> {
        let adapters = (0..world.stages().len())
            .map(|s| {
                Ok(StageAdapter {
                    stage: s,
                    module: AdapterModule::Flow {
                        params: init_adapter_params(rng, world.stage_dim(s), hidden)?,
                        solver,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterStack::new(adapters, world)
    }

    /// Freshly initialized low-rank adapters after every stage.
    pub fn low_rank(world: &ToyWorld, rng: &mut Rng, rank: usize) -> Result<Self> {
        let adapters = (0..world.stages().len())
            .map(|s| {
                Ok(StageAdapter {
                    stage: s,
                    module: AdapterModule::LowRank(LowRankAdapter::init(rng, world.stage_dim(s), rank)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterStack::new(adapters, world)
    }

    pub fn adapters(&self) -> &[StageAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [StageAdapter] {
        &mut self.adapters
    }

    pub fn get(&self, stage: usize) -> Option<&StageAdapter> {
        self.adapters.iter().find(|a| a.stage == stage)
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.module.param_count()).sum()
    }

    /// Concatenated trainable parameters, adapters in stage order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for a in &self.adapters {
            a.module.write_flat(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "set_flat: length mismatch");
        let mut off = 0;
        for a in &mut self.adapters {
            let n = a.module.param_count();
            a.module.read_flat(&flat[off..off + n]);
            off += n;
        }
    }

    /// Offset of each adapter's block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.adapters
            .iter()
            .map(|a| {
                let o = off;
                off += a.module.param_count();
                o
            })
            .collect()
    }

    /// Writes `adapter_<stage>.params` per adapter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for a in &self.adapters {
            let path = dir.join(format!("adapter_{}.params", a.stage));
            let text = match &a.module {
                AdapterModule::Flow { params, .. } => params.to_text(),
                AdapterModule::LowRank(l) => l.to_text(),
            };
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads every `adapter_<stage>.params` in `dir` for the world's stages.
    /// Flow adapters get `solver`, which checkpoints do not store.
    pub fn load(dir: &Path, world: &ToyWorld, solver: SolverSpec) -> Result<Self> {
        let mut adapters = Vec::new();
        for stage in 0..world.stages().len() {
            let path = dir.join(format!("adapter_{stage}.params"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let module = if text.trim_start().starts_with("lowrank") {
                AdapterModule::LowRank(LowRankAdapter::from_text(&text)?)
            } else {
                AdapterModule::Flow {
                    params: VectorFieldParams::from_text(&text)?,
                    solver,
                }
            };
            adapters.push(StageAdapter { stage, module });
        }
        if adapters.is_empty() {
            return Err(Error::Format(format!("no adapter_<stage>.params files in {}", dir.display())));
        }
        AdapterStack::new(adapters, world)
    }

    /// Replaces every flow adapter's solver.
    pub fn set_solver(&mut self, solver: SolverSpec) {
        for a in &mut self.adapters {
            if let AdapterModule::Flow { solver: s, .. } = &mut a.module {
                *s = solver;
            }
        }
    }

    /// Index (into `adapters()`) of the last-stage flow adapter, if any.
    pub fn last_flow_index(&self) -> Option<usize> {
        self.adapters
            .iter()
            .rposition(|a| matches!(a.module, AdapterModule::Flow { .. }))
    }
}

/// How gradients are taken through flow adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Exact reverse mode through the discrete solver.
    #[default]
    Unrolled,
    /// Continuous adjoint on the forward grid.
    Adjoint,
}

#[derive(Debug, Clone)]
pub(crate) enum AdapterRecord {
    Flow(RecordedFlow),
    FlowEndpoint(Trajectory),
    LowRank { input: Vector, bh: Vector },
}

/// Forward pass with everything needed for reverse mode.
#[derive(Debug, Clone)]
pub struct GenerateTrace {
    /// Output of each frozen stage (before its adapter).
    stage_outputs: Vec<Vector>,
    /// Per stage, the adapter record if an adapter sits there.
    records: Vec<Option<(usize, AdapterRecord)>>,
    pub output: Vector,
}

impl GenerateTrace {
    /// Trajectory of the adapter at `adapters()[index]`, if it is a flow.
    pub fn flow_trajectory(&self, index: usize) -> Option<&Trajectory> {
        self.records.iter().flatten().find_map(|(i, r)| match r {
            AdapterRecord::Flow(f) if *i == index => Some(&f.trajectory),
            AdapterRecord::FlowEndpoint(t) if *i == index => Some(t),
            _ => None,
        })
    }
}

/// Passes `w` through the frozen stages, applying each stage's adapter to
/// the stage output. With `None` (or identity-initialized adapters) this is
/// exactly the frozen generator.
pub fn generate(world: &ToyWorld, stack: Option<&AdapterStack>, w: &[f64]) -> Result<Vector> {
    assert_eq!(w.len(), world.latent_dim(), "generate: wrong latent dimension");
    let mut x = Vector::from(w);
    let mut next = 0;
    let adapters = stack.map_or(&[][..], |s| s.adapters());
    for (s, stage) in world.stages().iter().enumerate() {
        x = stage.forward(&x);
        if let Some(a) = adapters.get(next).filter(|a| a.stage == s) {
            next += 1;
            x = match &a.module {
                AdapterModule::Flow { params, solver } => integrate(&x, params, solver, 0.0)?.last().clone(),
                AdapterModule::LowRank(l) => l.forward(&x).0,
            };
        }
    }
    Ok(x)
}

/// [`generate`] keeping the records needed by [`backward`].
pub fn generate_traced(
    world: &ToyWorld,
    stack: &AdapterStack,
    w: &[f64],
    mode: GradientMode,
) -> Result<GenerateTrace> {
    assert_eq!(w.len(), world.latent_dim(), "generate: wrong latent dimension");
    let mut x = Vector::from(w);
    let mut stage_outputs = Vec::with_capacity(world.stages().len());
    let mut records = Vec::with_capacity(world.stages().len());
    let mut next = 0;
    for (s, stage) in world.stages().iter().enumerate() {
        x = stage.forward(&x);
        stage_outputs.push(x.clone());
        let Some(a) = stack.adapters().get(next).filter(|a| a.stage == s) else {
            records.push(None);
            continue;
        };
        let idx = next;
        next += 1;
        let rec = match (&a.module, mode) {
            (AdapterModule::Flow { params, solver }, GradientMode::Unrolled) => {
                let flow = integrate_recorded(&x, params, solver, 0.0)?;
                x = flow.trajectory.last().clone();
                AdapterRecord::Flow(flow)
            }
            (AdapterModule::Flow { params, solver }, GradientMode::Adjoint) => {
                let traj = integrate(&x, params, solver, 0.0)?;
                x = traj.last().clone();
                AdapterRecord::FlowEndpoint(traj)
            }
            (AdapterModule::LowRank(l), _) => {
                let (y, bh) = l.forward(&x);
                let input = std::mem::replace(&mut x, y);
                AdapterRecord::LowRank { input, bh }
            }
        };
        records.push(Some((idx, rec)));
    }
    Ok(GenerateTrace {
        stage_outputs,
        records,
        output: x,
    })
}

/// Extra cotangents on the trajectory nodes of one flow adapter.
pub struct NodeCotangents<'a> {
    pub adapter_index: usize,
    pub cotangents: &'a [Vector],
}

/// Reverse pass: gradient over the stack's flat parameters of a loss whose
/// cotangent on the output is `dl_dx` (plus optional node cotangents).
pub fn backward(
    world: &ToyWorld,
    stack: &AdapterStack,
    trace: &GenerateTrace,
    dl_dx: &[f64],
    nodes: Option<NodeCotangents<'_>>,
) -> Result<Vec<f64>> {
    let offsets = stack.offsets();
    let mut grad = vec![0.0; stack.param_count()];
    let mut xbar = Vector::from(dl_dx);
    for s in (0..world.stages().len()).rev() {
        if let Some((idx, rec)) = &trace.records[s] {
            let adapter = &stack.adapters()[*idx];
            let off = offsets[*idx];
            match (rec, &adapter.module) {
                (AdapterRecord::Flow(flow), AdapterModule::Flow { params, .. }) => {
                    let extra = nodes
                        .as_ref()
                        .filter(|n| n.adapter_index == *idx)
                        .map(|n| n.cotangents);
                    let g = backprop_recorded(flow, params, &xbar, extra);
                    add_into(&mut grad[off..], &g.d_params.to_flat());
                    xbar = g.d_initial;
                }
                (AdapterRecord::FlowEndpoint(traj), AdapterModule::Flow { params, solver }) => {
                    let g = adjoint_from_final(traj.last(), params, solver, 0.0, &xbar)?;
                    add_into(&mut grad[off..], &g.d_params.to_flat());
                    xbar = g.d_initial;
                }
                (AdapterRecord::LowRank { input, bh }, AdapterModule::LowRank(l)) => {
                    let at_y = matvec_t(&l.a, &xbar);
                    let na = l.a.data().len();
                    let mut da = Matrix::zeros(l.a.rows(), l.a.cols());
                    da.add_outer(1.0, &xbar, bh);
                    let mut db = Matrix::zeros(l.b.rows(), l.b.cols());
                    db.add_outer(1.0, &at_y, input);
                    add_into(&mut grad[off..off + na], da.data());
                    add_into(&mut grad[off + na..], db.data());
                    xbar.axpy(1.0, &matvec_t(&l.b, &at_y));
                }
                _ => unreachable!("trace does not match stack"),
            }
        }
        if s > 0 {
            xbar = world.stages()[s].backward(&trace.stage_outputs[s], &xbar);
        }
    }
    Ok(grad)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeflow::Method;

    fn small_world() -> ToyWorld {
        build_world(&WorldConfig {
            seed: 3,
            k: 3,
            latent_dim: 3,
            obs_dim: 6,
            cluster_std: 0.1,
        })
        .unwrap()
    }


    #[test]
    fn checkpoints_round_trip_for_both_adapter_kinds() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let solver = SolverSpec::new(crate::odeflow::Method::Rk4, 3, 0.2).unwrap();
        let mut rng = Rng::new(4);
        for mut stack in [
            AdapterStack::neural_ode(&world, &mut rng, 5, solver).unwrap(),
            AdapterStack::low_rank(&world, &mut rng, 2).unwrap(),
        ] {
            let flat: Vec<f64> = stack.to_flat().iter().map(|x| x + rng.next_normal()).collect();
            stack.set_flat(&flat);
            let dir = tempfile::tempdir().unwrap();
            stack.save(dir.path()).unwrap();
            assert_eq!(AdapterStack::load(dir.path(), &world, solver).unwrap(), stack);
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(AdapterStack::load(empty.path(), &world, solver).is_err());
        assert!(LowRankAdapter::from_text("lowrank v1\ndim 2\nrank 1\na 1 2\nb 1\n").is_err());
    }
    #[test]
    fn worlds_are_deterministic() {
        let a = build_toy_world(5, 2, 4, 8).unwrap();
        let b = build_toy_world(5, 2, 4, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_toy_world(6, 2, 4, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn default_world_is_well_posed_and_separated() {
        let w = build_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.k(), 8);
        assert_eq!(w.stages().len(), 2);
        assert_eq!(w.obs_dim(), 32);
        let min = min_pairwise_distance(w.identity_centers());
        assert!(min >= SEPARATION_SIGMAS * w.cluster_std());
        let acc = frozen_accuracy(&w, &mut Rng::new(99), 300).unwrap();
        assert!(acc >= WELL_POSED_ACCURACY, "{acc}");
    }

    #[test]
    fn config_errors() {
        assert!(build_toy_world(0, 1, 4, 8).is_err());
        assert!(build_toy_world(0, 3, 1, 8).is_err());
    }

    fn identity_parts(d: usize) -> WorldParts {
        WorldParts {
            map_weight: Matrix::identity(d),
            map_bias: Vector::zeros(d),
            stages: vec![SynthStage {
                weight: Matrix::identity(d),
                bias: Vector::zeros(d),
            }],
            identity_centers: vec![Vector::basis(d, 0), Vector::basis(d, 1)],
            cluster_std: 0.0,
            id_embed: Matrix::identity(d),
            per_embed: Matrix::identity(d),
        }
    }

    #[test]
    fn w_bar_of_identity_map_is_near_zero() {
        let w = ToyWorld::from_parts(identity_parts(4), 12).unwrap();
        for x in w.w_bar().iter() {
            assert!(x.abs() < 4.0 / 100.0, "{x}");
        }
        assert!((w.latent_scale() - 1.0).abs() < 0.05);
        let z = [0.3, -0.2, 1.0, 0.0];
        assert_eq!(map_latent(&w, &z).as_slice(), &z);
    }

    #[test]
    fn affine_map_and_hand_generated_output() {
        let mut parts = identity_parts(2);
        parts.map_weight = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]).unwrap();
        parts.map_bias = Vector::new(vec![0.5, 0.25]);
        parts.stages[0] = SynthStage {
            weight: Matrix::from_rows(&[&[1.0, 1.0], &[2.0, -1.0]]).unwrap(),
            bias: Vector::new(vec![0.0, 0.5]),
        };
        let w = ToyWorld::from_parts(parts, 1).unwrap();
        assert_eq!(map_latent(&w, &[1.0, 1.0]).as_slice(), &[3.5, -0.75]);
        // w = (1, 0): pre = (1, 2.5)
        let x = generate(&w, None, &[1.0, 0.0]).unwrap();
        assert_eq!(x.as_slice(), &[1.0f64.tanh(), 2.5f64.tanh()]);
    }

    #[test]
    fn zero_initialized_stacks_are_bitwise_identity() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let mut rng = Rng::new(1);
        for method in Method::ALL {
            let node = AdapterStack::neural_ode(&world, &mut rng, 16, SolverSpec::new(method, 4, 0.4).unwrap()).unwrap();
            let lora = AdapterStack::low_rank(&world, &mut rng, 4).unwrap();
            for _ in 0..100 {
                let w = sample_latent(&world, &mut rng).unwrap();
                let base = generate(&world, None, &w).unwrap();
                let bits = |v: &Vector| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&generate(&world, Some(&node), &w).unwrap()), bits(&base));
                assert_eq!(bits(&generate(&world, Some(&lora), &w).unwrap()), bits(&base));
            }
        }
    }

    #[test]
    fn outputs_are_bounded() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let mut w = sample_gaussian(&mut rng, 8, 0.0, 1.0).unwrap();
            let n = crate::numkit::l2_norm(&w);
            w = w.scale(10.0 * rng.next_f64() / n);
            assert!(generate(&world, None, &w).unwrap().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn identity_sampling() {
        let mut parts = identity_parts(3);
        parts.cluster_std = 0.0;
        let w = ToyWorld::from_parts(parts, 0).unwrap();
        assert_eq!(sample_identity(&w, &mut Rng::new(1), 1).unwrap(), Vector::basis(3, 1));
        assert!(sample_identity(&w, &mut Rng::new(1), 2).is_err());

        let world = build_world(&WorldConfig::default()).unwrap();
        let a = sample_identity(&world, &mut Rng::new(4), 3).unwrap();
        let b = sample_identity(&world, &mut Rng::new(4), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_are_nearest_their_own_center() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let mut rng = Rng::new(8);
        let mut misses = 0;
        for i in 0..100_000 {
            let id = i % world.k();
            let w = sample_identity(&world, &mut rng, id).unwrap();
            let nearest = (0..world.k())
                .min_by(|&a, &b| {
                    l2_dist(&w, &world.identity_centers()[a])
                        .total_cmp(&l2_dist(&w, &world.identity_centers()[b]))
                })
                .unwrap();
            misses += usize::from(nearest != id);
        }
        assert_eq!(misses, 0);
    }

    fn perturbed(stack: &AdapterStack, rng: &mut Rng, scale: f64) -> AdapterStack {
        let mut s = stack.clone();
        let flat: Vec<f64> = s.to_flat().iter().map(|x| x + scale * rng.next_normal()).collect();
        s.set_flat(&flat);
        s
    }

    fn check_backward(stack: &AdapterStack, world: &ToyWorld, mode: GradientMode, tol: f64) {
        let mut rng = Rng::new(77);
        let w = sample_latent(world, &mut rng).unwrap();
        let c = sample_gaussian(&mut rng, world.obs_dim(), 0.0, 1.0).unwrap();
        let trace = generate_traced(world, stack, &w, mode).unwrap();
        let g = backward(world, stack, &trace, &c, None).unwrap();
        let base = stack.to_flat();
        let mut s = stack.clone();
        let mut fd = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut x = base.clone();
            x[i] += 1e-5;
            s.set_flat(&x);
            let lp = generate(world, Some(&s), &w).unwrap().dot(&c);
            x[i] -= 2e-5;
            s.set_flat(&x);
            let lm = generate(world, Some(&s), &w).unwrap().dot(&c);
            fd.push((lp - lm) / 2e-5);
        }
        let err = l2_dist(&g, &fd) / crate::numkit::l2_norm(&fd);
        assert!(err < tol, "{mode:?} err {err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let world = small_world();
        let mut rng = Rng::new(5);
        for method in Method::ALL {
            let node = AdapterStack::neural_ode(&world, &mut rng, 5, SolverSpec::new(method, 3, 0.3).unwrap()).unwrap();
            let node = perturbed(&node, &mut rng, 0.3);
            check_backward(&node, &world, GradientMode::Unrolled, 1e-6);
        }
        let lora = AdapterStack::low_rank(&world, &mut rng, 2).unwrap();
        let lora = perturbed(&lora, &mut rng, 0.3);
        check_backward(&lora, &world, GradientMode::Unrolled, 1e-6);
        // the adjoint is only consistent to O(dt)
        let fine = AdapterStack::neural_ode(&world, &mut rng, 5, SolverSpec::new(Method::Rk4, 32, 0.05).unwrap()).unwrap();
        let fine = perturbed(&fine, &mut rng, 0.3);
        check_backward(&fine, &world, GradientMode::Adjoint, 1e-4);
    }

    #[test]
    fn stack_validation() {
        let world = small_world();
        let mut rng = Rng::new(1);
        let a = StageAdapter {
            stage: 0,
            module: AdapterModule::LowRank(LowRankAdapter::init(&mut rng, world.stage_dim(0), 1).unwrap()),
        };
        assert!(AdapterStack::new(vec![a.clone(), a.clone()], &world).is_err());
        let wrong = StageAdapter { stage: 1, ..a.clone() };
        assert!(AdapterStack::new(vec![wrong], &world).is_err());
        assert!(AdapterStack::new(vec![a], &world).is_ok());
    }
}

