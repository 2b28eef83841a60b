//! Identity unlearning: target selection, adjacency sampling, the forget,
//! retain and trajectory-consistency losses, and the Adam loop that trains
//! only the adapter parameters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::{dot, l2_norm, matvec_t, sample_uniform, Rng, Vector};
use crate::odeflow::{Method, SolverSpec};
use crate::toygen::{
    backward, generate, generate_traced, map_latent, AdapterModule, AdapterStack,
    GenerateTrace, GradientMode, NodeCotangents, ToyWorld,
};
use crate::vecfield::{accumulate_vjp_params, field_eval, vjp_state};

/// Which kind of adapter a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    NeuralOde,
    LowRank,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::NeuralOde => "node",
            AdapterKind::LowRank => "lowrank",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(AdapterKind::NeuralOde),
            "lowrank" => Ok(AdapterKind::LowRank),
            other => Err(Error::invalid(format!(
                "unknown adapter `{other}` (expected node or lowrank)"
            ))),
        }
    }
}

impl FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrolled" => Ok(GradientMode::Unrolled),
            "adjoint" => Ok(GradientMode::Adjoint),
            other => Err(Error::invalid(format!(
                "unknown gradient mode `{other}` (expected unrolled or adjoint)"
            ))),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientMode::Unrolled => "unrolled",
            GradientMode::Adjoint => "adjoint",
        })
    }
}

/// Training hyperparameters. `d` and `a_max` are in units of the world's
/// latent scale (per-coordinate std of `Map(z)`).
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnConfig {
    pub d: f64,
    pub a_max: f64,
    pub n_a: usize,
    pub n_r: usize,
    pub lambda_l2: f64,
    pub lambda_per: f64,
    pub lambda_id: f64,
    pub lambda_u: f64,
    pub lambda_tc: f64,
    pub lambda_r: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adapter: AdapterKind,
    pub solver: SolverSpec,
    pub hidden: usize,
    pub rank: usize,
    pub gradient: GradientMode,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            d: 3.0,
            a_max: 1.5,
            n_a: 2,
            n_r: 2,
            lambda_l2: 0.01,
            lambda_per: 1.0,
            lambda_id: 0.1,
            lambda_u: 1.0,
            lambda_tc: 1.0,
            lambda_r: 1.0,
            epochs: 1000,
            learning_rate: 1e-3,
            seed: 0,
            adapter: AdapterKind::NeuralOde,
            solver: SolverSpec {
                method: Method::Euler,
                steps: 4,
                step_size: 0.4,
            },
            hidden: 32,
            rank: 4,
            gradient: GradientMode::Unrolled,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_l2", self.lambda_l2),
            ("lambda_per", self.lambda_per),
            ("lambda_id", self.lambda_id),
            ("lambda_u", self.lambda_u),
            ("lambda_tc", self.lambda_tc),
            ("lambda_r", self.lambda_r),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.n_a == 0 || self.n_r == 0 {
            return Err(Error::Config("n_a and n_r must be >= 1".into()));
        }
        if !(self.a_max >= 0.0) || !self.d.is_finite() {
            return Err(Error::Config("a_max must be >= 0 and d finite".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.hidden == 0 || self.rank == 0 {
            return Err(Error::Config("hidden and rank must be >= 1".into()));
        }
        self.solver
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Fresh identity-initialized stack of the configured kind.
    pub fn init_stack(&self, world: &ToyWorld, rng: &mut Rng) -> Result<AdapterStack> {
        match self.adapter {
            AdapterKind::NeuralOde => AdapterStack::neural_ode(world, rng, self.hidden, self.solver),
            AdapterKind::LowRank => AdapterStack::low_rank(world, rng, self.rank),
        }
    }
}

/// Latents for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetBatch {
    pub w_u: Vector,
    pub w_t: Vector,
    pub adjacent_pairs: Vec<(Vector, Vector)>,
    pub retain_latents: Vec<Vector>,
    /// Source model the targets and retain references come from; `None` is
    /// the frozen generator.
    pub reference: Option<Arc<AdapterStack>>,
}

/// Reflects the source through the mean latent: `w̄ - d · (w_u - w̄)/‖w_u - w̄‖`.
pub fn unidentify_target(w_u: &[f64], w_bar: &[f64], d: f64) -> Result<Vector> {
    let id_dir = Vector::from(w_u).sub(w_bar);
    let n = l2_norm(&id_dir);
    if n <= 1e-9 {
        return Err(Error::DegenerateSource);
    }
    let mut w_t = Vector::from(w_bar);
    w_t.axpy(-d / n, &id_dir);
    Ok(w_t)
}

const MAX_DIRECTION_REDRAWS: usize = 10;

/// Draws retain latents and shared-offset neighbours of `(w_u, w_t)`.
///
/// Each offset points from `w_u` toward a fresh retain-distribution sample
/// and has length `α ~ U(0, a_max)` (in latent-scale units).
pub fn sample_adjacency(
    rng: &mut Rng,
    world: &ToyWorld,
    w_u: &[f64],
    w_t: &[f64],
    cfg: &UnlearnConfig,
) -> Result<ForgetBatch> {
    let dim = world.latent_dim();
    let gaussian_latent = |rng: &mut Rng| -> Result<Vector> {
        let z = crate::numkit::sample_gaussian(rng, dim, 0.0, 1.0)?;
        Ok(map_latent(world, &z))
    };
    let retain_latents = (0..cfg.n_r)
        .map(|_| gaussian_latent(rng))
        .collect::<Result<Vec<_>>>()?;
    let a_max = cfg.a_max * world.latent_scale();
    let mut adjacent_pairs = Vec::with_capacity(cfg.n_a);
    for _ in 0..cfg.n_a {
        let alpha = sample_uniform(rng, 0.0, a_max)?;
        let mut attempts = 0;
        let direction = loop {
            let w_ra = gaussian_latent(rng)?;
            let dir = w_ra.sub(w_u);
            let n = l2_norm(&dir);
            if n > 1e-9 {
                break dir.scale(1.0 / n);
            }
            attempts += 1;
            if attempts >= MAX_DIRECTION_REDRAWS {
                return Err(Error::Degenerate(
                    "retain sample coincides with the source latent".into(),
                ));
            }
        };
        let delta = direction.scale(alpha);
        adjacent_pairs.push((Vector::from(w_u).add(&delta), Vector::from(w_t).add(&delta)));
    }
    Ok(ForgetBatch {
        w_u: Vector::from(w_u),
        w_t: Vector::from(w_t),
        adjacent_pairs,
        retain_latents,
        reference: None,
    })
}

/// A loss value with its gradient over the stack's flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn zero(n: usize) -> Self {
        LossValue {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    fn add_scaled(&mut self, s: f64, other: &LossValue) {
        self.value += s * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += s * o;
        }
    }
}

/// Forward pass of the source latent kept from the latest forget loss, for
/// the trajectory-consistency term.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    trace: GenerateTrace,
}

/// Squared-distance loss on a fixed linear embedding, returning the
/// cotangent on `x`.
fn embedded_sq_dist(embed: impl Fn(&[f64]) -> Vector, pullback: impl Fn(&[f64]) -> Vector, x: &[f64], y: &[f64]) -> (f64, Vector) {
    let diff = embed(x).sub(&embed(y));
    let value = diff.dot(&diff);
    (value, pullback(&diff).scale(2.0))
}

/// `1 - cos(Qx, Qy)` and its cotangent on `x`.
fn cosine_distance(world: &ToyWorld, x: &[f64], y: &[f64]) -> Result<(f64, Vector)> {
    let u = world.id_embedding(x);
    let v = world.id_embedding(y);
    let nu = l2_norm(&u);
    let nv = l2_norm(&v);
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::Degenerate("zero-norm identity embedding".into()));
    }
    let c = dot(&u, &v) / (nu * nv);
    // d(1 - c)/du = -(v/(|u||v|) - c u/|u|²)
    let mut du = v.scale(-1.0 / (nu * nv));
    du.axpy(c / (nu * nu), &u);
    Ok((1.0 - c, matvec_t(&world.parts().id_embed, &du)))
}

/// Weighted Euclidean + perceptual + identity distance between an adapted
/// output `x` and a frozen target `y`, with the cotangent on `x`.
fn local_loss(world: &ToyWorld, cfg: &UnlearnConfig, x: &[f64], y: &[f64]) -> Result<(f64, Vector)> {
    let mut value = 0.0;
    let mut cot = Vector::zeros(x.len());
    if cfg.lambda_l2 != 0.0 {
        let (v, g) = embedded_sq_dist(|v| Vector::from(v), |v| Vector::from(v), x, y);
        value += cfg.lambda_l2 * v;
        cot.axpy(cfg.lambda_l2, &g);
    }
    if cfg.lambda_per != 0.0 {
        let (v, g) = perceptual(world, x, y);
        value += cfg.lambda_per * v;
        cot.axpy(cfg.lambda_per, &g);
    }
    if cfg.lambda_id != 0.0 {
        let (v, g) = cosine_distance(world, x, y)?;
        value += cfg.lambda_id * v;
        cot.axpy(cfg.lambda_id, &g);
    }
    Ok((value, cot))
}

fn perceptual(world: &ToyWorld, x: &[f64], y: &[f64]) -> (f64, Vector) {
    embedded_sq_dist(
        |v| world.per_embedding(v),
        |g| matvec_t(&world.parts().per_embed, g),
        x,
        y,
    )
}

/// Perceptual-stand-in distance between two observations.
pub fn perceptual_distance(world: &ToyWorld, x: &[f64], y: &[f64]) -> f64 {
    perceptual(world, x, y).0
}

/// Forget loss `L_local(w_u, w_t) + mean_i L_local(w_u,a^i, w_t,a^i)`, where
/// targets come from the batch's reference model.
pub fn loss_forget(
    world: &ToyWorld,
    stack: &AdapterStack,
    batch: &ForgetBatch,
    cfg: &UnlearnConfig,
) -> Result<(LossValue, ForwardCache)> {
    let n = stack.param_count();
    let mut total = LossValue::zero(n);
    let mut cache = None;
    let weight_adj = 1.0 / batch.adjacent_pairs.len().max(1) as f64;
    let pairs = std::iter::once((&batch.w_u, &batch.w_t, 1.0)).chain(
        batch
            .adjacent_pairs
            .iter()
            .map(|(u, t)| (u, t, weight_adj)),
    );
    for (w_u, w_t, weight) in pairs {
        let trace = generate_traced(world, stack, w_u, cfg.gradient)?;
        let target = generate(world, batch.reference.as_deref(), w_t)?;
        let (v, cot) = local_loss(world, cfg, &trace.output, &target)?;
        total.value += weight * v;
        if v != 0.0 || cot.iter().any(|&c| c != 0.0) {
            let g = backward(world, stack, &trace, &cot.scale(weight), None)?;
            for (t, gi) in total.grad.iter_mut().zip(&g) {
                *t += gi;
            }
        }
        if cache.is_none() {
            cache = Some(ForwardCache { trace });
        }
    }
    Ok((total, cache.expect("source pass always runs")))
}

/// Retain loss: mean perceptual distance between adapted and reference
/// outputs on the batch's retain latents.
pub fn loss_retain(world: &ToyWorld, stack: &AdapterStack, batch: &ForgetBatch, cfg: &UnlearnConfig) -> Result<LossValue> {
    let n = stack.param_count();
    let mut total = LossValue::zero(n);
    let scale = 1.0 / batch.retain_latents.len().max(1) as f64;
    for w in &batch.retain_latents {
        let trace = generate_traced(world, stack, w, cfg.gradient)?;
        let reference = generate(world, batch.reference.as_deref(), w)?;
        let (v, cot) = perceptual(world, &trace.output, &reference);
        total.value += scale * v;
        if v != 0.0 {
            let g = backward(world, stack, &trace, &cot.scale(scale), None)?;
            for (t, gi) in total.grad.iter_mut().zip(&g) {
                *t += gi;
            }
        }
    }
    Ok(total)
}

/// Trajectory consistency `Σ_k ‖f(h_{k+1}, t_{k+1}) - f(h_k, t_k)‖²` along the
/// last-stage flow adapter's trajectory from the cached source pass.
///
/// In unrolled mode the gradient includes the dependence of the states on
/// the parameters; in adjoint mode only the direct parameter dependence of
/// `f` is kept.
pub fn loss_tc(
    world: &ToyWorld,
    stack: &AdapterStack,
    cache: Option<&ForwardCache>,
    mode: GradientMode,
) -> Result<LossValue> {
    let cache = cache.ok_or(Error::MissingTrajectory)?;
    let n = stack.param_count();
    let Some(idx) = stack.last_flow_index() else {
        return Ok(LossValue::zero(n));
    };
    let AdapterModule::Flow { params, .. } = &stack.adapters()[idx].module else {
        unreachable!("last_flow_index points at a flow adapter")
    };
    let traj = cache
        .trace
        .flow_trajectory(idx)
        .ok_or(Error::MissingTrajectory)?;
    let evals: Vec<_> = traj
        .states
        .iter()
        .zip(&traj.times)
        .map(|(h, &t)| field_eval(h, t, params))
        .collect();
    let diffs: Vec<Vector> = evals
        .windows(2)
        .map(|w| w[1].value.sub(&w[0].value))
        .collect();
    let value: f64 = diffs.iter().map(|d| d.dot(d)).sum();

    let nodes = evals.len();
    let zero = Vector::zeros(params.dim());
    let mut d_params = params.zeros_like();
    let mut node_cot = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let prev = if k > 0 { &diffs[k - 1] } else { &zero };
        let next = if k < nodes - 1 { &diffs[k] } else { &zero };
        let c = prev.sub(next).scale(2.0);
        let (h, t) = (&traj.states[k], traj.times[k]);
        accumulate_vjp_params(&mut d_params, 1.0, &evals[k], h, t, params, &c);
        if mode == GradientMode::Unrolled {
            node_cot.push(vjp_state(&evals[k], h, t, params, &c));
        }
    }
    let mut grad = vec![0.0; n];
    let off = stack.offsets()[idx];
    for (g, d) in grad[off..].iter_mut().zip(d_params.to_flat()) {
        *g += d;
    }
    if mode == GradientMode::Unrolled {
        let through_states = backward(
            world,
            stack,
            &cache.trace,
            &vec![0.0; world.obs_dim()],
            Some(NodeCotangents {
                adapter_index: idx,
                cotangents: &node_cot,
            }),
        )?;
        for (g, d) in grad.iter_mut().zip(&through_states) {
            *g += d;
        }
    }
    Ok(LossValue { value, grad })
}

/// Components of one evaluation of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub forget: f64,
    pub tc: f64,
    pub retain: f64,
    pub total: LossValue,
}

/// `λ_u · L_u + λ_tc · L_TC + λ_r · L_r` and its gradient.
pub fn total_loss(world: &ToyWorld, stack: &AdapterStack, batch: &ForgetBatch, cfg: &UnlearnConfig) -> Result<TotalLoss> {
    let n = stack.param_count();
    let (forget, cache) = loss_forget(world, stack, batch, cfg)?;
    let tc = if cfg.lambda_tc != 0.0 {
        loss_tc(world, stack, Some(&cache), cfg.gradient)?
    } else {
        LossValue::zero(n)
    };
    let retain = loss_retain(world, stack, batch, cfg)?;
    let mut total = LossValue::zero(n);
    total.add_scaled(cfg.lambda_u, &forget);
    total.add_scaled(cfg.lambda_tc, &tc);
    total.add_scaled(cfg.lambda_r, &retain);
    Ok(TotalLoss {
        forget: forget.value,
        tc: tc.value,
        retain: retain.value,
        total,
    })
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    assert_eq!(params.len(), grad.len(), "adam: gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state shape mismatch");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Per-epoch loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub forget: f64,
    pub tc: f64,
    pub retain: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory(pub Vec<EpochLosses>);

impl LossHistory {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,L_u,L_TC,L_r,total")?;
        for e in &self.0 {
            writeln!(out, "{},{:?},{:?},{:?},{:?}", e.epoch, e.forget, e.tc, e.retain, e.total)?;
        }
        Ok(())
    }
}

/// Trains `stack` in place to forget `w_u`. Only adapter parameters move.
///
/// The stack as passed in is the source model of this step: forget targets
/// and retain references are its outputs, so earlier unlearning is part of
/// what gets retained. A fresh stack reproduces the frozen generator.
pub fn unlearn_into(
    world: &ToyWorld,
    stack: &mut AdapterStack,
    w_u: &[f64],
    cfg: &UnlearnConfig,
    rng: &mut Rng,
) -> Result<LossHistory> {
    cfg.validate()?;
    let w_t = unidentify_target(w_u, world.w_bar(), cfg.d * world.latent_scale())?;
    let mut params = stack.to_flat();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let reference = Arc::new(stack.clone());
    for epoch in 0..cfg.epochs {
        let wrap = |e: Error| Error::TrainingDivergence {
            epoch,
            source: Box::new(e),
        };
        let mut batch = sample_adjacency(rng, world, w_u, &w_t, cfg)?;
        batch.reference = Some(Arc::clone(&reference));
        let loss = total_loss(world, stack, &batch, cfg).map_err(wrap)?;
        history.push(EpochLosses {
            epoch,
            forget: loss.forget,
            tc: loss.tc,
            retain: loss.retain,
            total: loss.total.value,
        });
        adam_step(&mut params, &loss.total.grad, &mut adam, cfg.learning_rate).map_err(wrap)?;
        stack.set_flat(&params);
    }
    Ok(LossHistory(history))
}

/// Fresh stack, then sequential unlearning of each source latent on top of
/// the previous result.
pub fn run_unlearning(world: &ToyWorld, sources: &[Vector], cfg: &UnlearnConfig) -> Result<(AdapterStack, LossHistory)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut stack = cfg.init_stack(world, &mut root.derive(STREAM_INIT))?;
    let mut rng = root.derive(STREAM_TRAIN);
    let mut history = LossHistory::default();
    for w_u in sources {
        let h = unlearn_into(world, &mut stack, w_u, cfg, &mut rng)?;
        let offset = history.0.len();
        history.0.extend(h.0.into_iter().map(|mut e| {
            e.epoch += offset;
            e
        }));
    }
    Ok((stack, history))
}

const STREAM_INIT: u64 = 101;
const STREAM_TRAIN: u64 = 102;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::l2_dist;
    use crate::toygen::{build_world, sample_identity, WorldConfig};

    fn tiny_world() -> ToyWorld {
        build_world(&WorldConfig {
            seed: 2,
            k: 2,
            latent_dim: 2,
            obs_dim: 4,
            cluster_std: 0.1,
        })
        .unwrap()
    }

    fn tiny_cfg() -> UnlearnConfig {
        UnlearnConfig {
            hidden: 4,
            solver: SolverSpec::new(Method::Euler, 3, 0.4).unwrap(),
            ..UnlearnConfig::default()
        }
    }

    #[test]
    fn unidentify_examples() {
        let w_bar = [0.0, 0.0];
        assert_eq!(unidentify_target(&[3.0, 4.0], &w_bar, 5.0).unwrap().as_slice(), &[-3.0, -4.0]);
        assert_eq!(unidentify_target(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap().as_slice(), &[1.0, 1.0]);
        let t = unidentify_target(&[0.3, -2.0], &[1.0, 1.0], 2.5).unwrap();
        assert!((l2_dist(&t, &[1.0, 1.0]) - 2.5).abs() < 1e-12);
        assert!(matches!(unidentify_target(&w_bar, &w_bar, 1.0), Err(Error::DegenerateSource)));
    }

    #[test]
    fn adjacency_invariants() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let mut rng = Rng::new(4);
        let w_u = sample_identity(&world, &mut rng, 0).unwrap();
        let w_t = unidentify_target(&w_u, world.w_bar(), 3.0).unwrap();
        let cfg = UnlearnConfig::default();
        for _ in 0..50 {
            let b = sample_adjacency(&mut rng, &world, &w_u, &w_t, &cfg).unwrap();
            assert_eq!(b.adjacent_pairs.len(), cfg.n_a);
            assert_eq!(b.retain_latents.len(), cfg.n_r);
            for (u, t) in &b.adjacent_pairs {
                let du = u.sub(&w_u);
                let dt = t.sub(&w_t);
                for (a, c) in du.iter().zip(dt.iter()) {
                    assert!((a - c).abs() < 1e-12);
                }
                assert!(l2_norm(&du) <= cfg.a_max * world.latent_scale() + 1e-12);
            }
        }
        let flat = UnlearnConfig { a_max: 0.0, ..cfg };
        let b = sample_adjacency(&mut rng, &world, &w_u, &w_t, &flat).unwrap();
        for (u, t) in &b.adjacent_pairs {
            assert_eq!(u, &w_u);
            assert_eq!(t, &w_t);
        }
    }

    fn batch_for(world: &ToyWorld, cfg: &UnlearnConfig, seed: u64) -> ForgetBatch {
        let mut rng = Rng::new(seed);
        let w_u = sample_identity(world, &mut rng, 0).unwrap();
        let w_t = unidentify_target(&w_u, world.w_bar(), cfg.d * world.latent_scale()).unwrap();
        sample_adjacency(&mut rng, world, &w_u, &w_t, cfg).unwrap()
    }

    fn perturbed_stack(world: &ToyWorld, cfg: &UnlearnConfig, seed: u64) -> AdapterStack {
        let mut rng = Rng::new(seed);
        let mut stack = cfg.init_stack(world, &mut rng).unwrap();
        let flat: Vec<f64> = stack.to_flat().iter().map(|x| x + 0.3 * rng.next_normal()).collect();
        stack.set_flat(&flat);
        stack
    }

    fn fd_check(stack: &AdapterStack, f: impl Fn(&AdapterStack) -> LossValue, tol: f64) {
        let analytic = f(stack);
        let base = stack.to_flat();
        let mut s = stack.clone();
        let fd: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut x = base.clone();
                x[i] += 1e-5;
                s.set_flat(&x);
                let lp = f(&s).value;
                x[i] -= 2e-5;
                s.set_flat(&x);
                let lm = f(&s).value;
                (lp - lm) / 2e-5
            })
            .collect();
        let err = l2_dist(&analytic.grad, &fd) / l2_norm(&fd).max(1e-12);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn reference_model_replaces_frozen_targets() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let cfg = UnlearnConfig { hidden: 6, ..UnlearnConfig::default() };
        let stack = perturbed_stack(&world, &cfg, 8);
        let mut batch = batch_for(&world, &cfg, 9);
        assert!(loss_retain(&world, &stack, &batch, &cfg).unwrap().value > 0.0);
        batch.reference = Some(Arc::new(stack.clone()));
        let same = loss_retain(&world, &stack, &batch, &cfg).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.grad.iter().all(|&g| g == 0.0));
        batch.reference = Some(Arc::new(perturbed_stack(&world, &cfg, 10)));
        fd_check(&stack, |s| total_loss(&world, s, &batch, &cfg).unwrap().total, 1e-5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let world = tiny_world();
        for method in Method::ALL {
            let cfg = UnlearnConfig {
                solver: SolverSpec::new(method, 3, 0.4).unwrap(),
                ..tiny_cfg()
            };
            let batch = batch_for(&world, &cfg, 1);
            let stack = perturbed_stack(&world, &cfg, 2);
            fd_check(&stack, |s| loss_forget(&world, s, &batch, &cfg).unwrap().0, 1e-4);
            fd_check(&stack, |s| loss_retain(&world, s, &batch, &cfg).unwrap(), 1e-4);
            fd_check(&stack,
                |s| {
                    let (_, cache) = loss_forget(&world, s, &batch, &cfg).unwrap();
                    loss_tc(&world, s, Some(&cache), GradientMode::Unrolled).unwrap()
                },
                1e-4,
            );
            fd_check(&stack, |s| total_loss(&world, s, &batch, &cfg).unwrap().total, 1e-4);
        }
        let lr_cfg = UnlearnConfig {
            adapter: AdapterKind::LowRank,
            rank: 2,
            ..tiny_cfg()
        };
        let batch = batch_for(&world, &lr_cfg, 3);
        let stack = perturbed_stack(&world, &lr_cfg, 4);
        fd_check(&stack, |s| total_loss(&world, s, &batch, &lr_cfg).unwrap().total, 1e-4);
    }

    #[test]
    fn zero_cases() {
        let world = tiny_world();
        let cfg = tiny_cfg();
        let stack = cfg.init_stack(&world, &mut Rng::new(0)).unwrap();
        let mut batch = batch_for(&world, &cfg, 5);
        // identical branches at init
        batch.w_t = batch.w_u.clone();
        batch.adjacent_pairs = batch.adjacent_pairs.iter().map(|(u, _)| (u.clone(), u.clone())).collect();
        let (lf, cache) = loss_forget(&world, &stack, &batch, &cfg).unwrap();
        assert!(lf.value.abs() < 1e-15);
        assert_eq!(loss_retain(&world, &stack, &batch, &cfg).unwrap().value, 0.0);
        assert_eq!(loss_tc(&world, &stack, Some(&cache), GradientMode::Unrolled).unwrap().value, 0.0);
        let total = total_loss(&world, &stack, &batch, &cfg).unwrap();
        assert!(total.total.value.abs() < 1e-15);

        let silent = UnlearnConfig {
            lambda_l2: 0.0,
            lambda_per: 0.0,
            lambda_id: 0.0,
            ..cfg.clone()
        };
        let b = batch_for(&world, &cfg, 6);
        let (lf, _) = loss_forget(&world, &stack, &b, &silent).unwrap();
        assert_eq!(lf.value, 0.0);
        assert!(lf.grad.iter().all(|&g| g == 0.0));
        assert!(matches!(
            loss_tc(&world, &stack, None, GradientMode::Unrolled),
            Err(Error::MissingTrajectory)
        ));
    }

    #[test]
    fn retain_loss_positive_after_perturbation() {
        let world = tiny_world();
        let cfg = tiny_cfg();
        let stack = perturbed_stack(&world, &cfg, 9);
        let batch = batch_for(&world, &cfg, 10);
        assert!(loss_retain(&world, &stack, &batch, &cfg).unwrap().value > 0.0);
    }

    #[test]
    fn tc_of_constant_field_is_zero_and_single_step_matches_hand_value() {
        let world = tiny_world();
        let cfg = tiny_cfg();
        let mut stack = cfg.init_stack(&world, &mut Rng::new(0)).unwrap();
        let idx = stack.last_flow_index().unwrap();
        if let AdapterModule::Flow { params, .. } = &mut stack.adapters_mut()[idx].module {
            *params = params.zeros_like();
            params.b2 = Vector::filled(params.dim(), 0.7);
        }
        let batch = batch_for(&world, &cfg, 11);
        let (_, cache) = loss_forget(&world, &stack, &batch, &cfg).unwrap();
        assert_eq!(loss_tc(&world, &stack, Some(&cache), GradientMode::Unrolled).unwrap().value, 0.0);

        // One Euler step on a 2-dim field f(h, t) = W2 tanh(W1 [h; t]) with
        // W1 = [[1, 0, 0], [0, 1, 0]], W2 = I, dt = 1, h0 = (0.5, -0.25):
        // h1 = h0 + tanh(h0); L_TC = ‖tanh(h1) - tanh(h0)‖².
        use crate::numkit::Matrix;
        use crate::toygen::{StageAdapter, SynthStage, WorldParts};
        let parts = WorldParts {
            map_weight: Matrix::identity(2),
            map_bias: Vector::zeros(2),
            stages: vec![SynthStage {
                weight: Matrix::identity(2),
                bias: Vector::zeros(2),
            }],
            identity_centers: vec![Vector::basis(2, 0), Vector::basis(2, 1)],
            cluster_std: 0.0,
            id_embed: Matrix::identity(2),
            per_embed: Matrix::identity(2),
        };
        let w = ToyWorld::from_parts(parts, 0).unwrap();
        let params = crate::vecfield::VectorFieldParams::from_blocks(
            Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap(),
            Vector::zeros(2),
            Matrix::identity(2),
            Vector::zeros(2),
        )
        .unwrap();
        let stack = AdapterStack::new(
            vec![StageAdapter {
                stage: 0,
                module: AdapterModule::Flow {
                    params,
                    solver: SolverSpec::new(Method::Euler, 1, 1.0).unwrap(),
                },
            }],
            &w,
        )
        .unwrap();
        // latent chosen so the stage output (tanh) is h0 = (0.5, -0.25)
        let latent = Vector::new(vec![0.5f64.atanh(), (-0.25f64).atanh()]);
        let batch = ForgetBatch {
            w_u: latent.clone(),
            w_t: latent.clone(),
            adjacent_pairs: vec![],
            retain_latents: vec![latent],
            reference: None,
        };
        let (_, cache) = loss_forget(&w, &stack, &batch, &cfg).unwrap();
        let tc = loss_tc(&w, &stack, Some(&cache), GradientMode::Unrolled).unwrap();
        // golden evaluated independently from the recursion above
        let golden = 0.1255982935778872;
        assert!((tc.value - golden).abs() < 1e-12, "{}", tc.value);
    }

    #[test]
    fn weighting_is_linear() {
        let world = tiny_world();
        let cfg = tiny_cfg();
        let batch = batch_for(&world, &cfg, 12);
        let stack = perturbed_stack(&world, &cfg, 13);
        let base = total_loss(&world, &stack, &batch, &cfg).unwrap();
        let only_u = UnlearnConfig {
            lambda_tc: 0.0,
            lambda_r: 0.0,
            ..cfg.clone()
        };
        let (lf, _) = loss_forget(&world, &stack, &batch, &cfg).unwrap();
        let t = total_loss(&world, &stack, &batch, &only_u).unwrap();
        assert_eq!(t.total.value, lf.value);
        assert_eq!(t.total.grad, lf.grad);

        let scaled = UnlearnConfig {
            lambda_u: 2.5,
            lambda_tc: 2.5,
            lambda_r: 2.5,
            ..cfg.clone()
        };
        let s = total_loss(&world, &stack, &batch, &scaled).unwrap();
        assert!((s.total.value - 2.5 * base.total.value).abs() < 1e-12 * base.total.value.abs().max(1.0));
        for (a, b) in s.total.grad.iter().zip(&base.total.grad) {
            assert!((a - 2.5 * b).abs() < 1e-12 * b.abs().max(1.0));
        }

        let half_forget = UnlearnConfig {
            lambda_u: 0.5,
            ..cfg.clone()
        };
        let h = total_loss(&world, &stack, &batch, &half_forget).unwrap();
        let tc_r: Vec<f64> = base.total.grad.iter().zip(&lf.grad).map(|(t, f)| t - f).collect();
        for ((hg, rest), fg) in h.total.grad.iter().zip(&tc_r).zip(&lf.grad) {
            assert!((hg - (rest + 0.5 * fg)).abs() < 1e-12 * hg.abs().max(1.0));
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);

        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..500 {
            adam_step(&mut p, &[3.0, -0.01], &mut s, 0.01).unwrap();
        }
        let before = p.clone();
        adam_step(&mut p, &[3.0, -0.01], &mut s, 0.01).unwrap();
        assert!(((before[0] - p[0]) - 0.01).abs() < 1e-6);
        assert!(((p[1] - before[1]) - 0.01).abs() < 1e-4);

        // three updates stepped independently, lr = 0.1, grads (1, -2), (0.5, 0), (-1, 4)
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        for g in [[1.0, -2.0], [0.5, 0.0], [-1.0, 4.0]] {
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        let golden = [0.7957037312938715, 1.1330023775324878];
        assert!((p[0] - golden[0]).abs() < 1e-12, "{p:?}");
        assert!((p[1] - golden[1]).abs() < 1e-12, "{p:?}");

        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 0.1).is_err());
    }

    #[test]
    fn degenerate_training_cases() {
        let world = tiny_world();
        let w_u = sample_identity(&world, &mut Rng::new(1), 0).unwrap();
        let cfg = UnlearnConfig { epochs: 0, ..tiny_cfg() };
        let (stack, hist) = run_unlearning(&world, &[w_u.clone()], &cfg).unwrap();
        let fresh = cfg.init_stack(&world, &mut Rng::new(cfg.seed).derive(STREAM_INIT)).unwrap();
        assert_eq!(stack, fresh);
        assert!(hist.0.is_empty());

        let cfg = UnlearnConfig {
            epochs: 5,
            learning_rate: 0.0,
            a_max: 0.0,
            n_r: 1,
            ..tiny_cfg()
        };
        let (stack, hist) = run_unlearning(&world, &[w_u.clone()], &cfg).unwrap();
        assert_eq!(stack, fresh);
        assert_eq!(hist.0.len(), 5);
        // forget term is the same every epoch when nothing moves and adjacency is off
        assert!(hist.0.windows(2).all(|w| w[0].forget == w[1].forget));

        assert!(matches!(
            run_unlearning(&world, &[world.w_bar().clone()], &tiny_cfg()),
            Err(Error::DegenerateSource)
        ));
    }

    #[test]
    fn zero_loss_fixed_point() {
        // With the forget term off, an identity stack sits at zero loss.
        let world = tiny_world();
        let w_u = sample_identity(&world, &mut Rng::new(1), 1).unwrap();
        let cfg = UnlearnConfig {
            epochs: 20,
            lambda_u: 0.0,
            ..tiny_cfg()
        };
        let (stack, hist) = run_unlearning(&world, &[w_u], &cfg).unwrap();
        let fresh = cfg.init_stack(&world, &mut Rng::new(cfg.seed).derive(STREAM_INIT)).unwrap();
        assert_eq!(stack, fresh);
        assert!(hist.0.iter().all(|e| e.total == 0.0));
    }

    #[test]
    fn training_never_touches_the_world() {
        let world = tiny_world();
        let before = world.checksum();
        let w_u = sample_identity(&world, &mut Rng::new(1), 0).unwrap();
        let cfg = UnlearnConfig { epochs: 30, ..tiny_cfg() };
        let (_, hist) = run_unlearning(&world, &[w_u], &cfg).unwrap();
        assert_eq!(world.checksum(), before);
        assert!(hist.0.last().unwrap().forget < hist.0[0].forget);
    }

    #[test]
    fn history_csv_shape() {
        let h = LossHistory(vec![EpochLosses {
            epoch: 0,
            forget: 1.5,
            tc: 0.0,
            retain: 0.25,
            total: 1.75,
        }]);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,L_u,L_TC,L_r,total\n0,1.5,0.0,0.25,1.75\n");
    }

    #[test]
    fn adjoint_mode_gradients_are_close_on_fine_grids() {
        let world = tiny_world();
        let cfg = UnlearnConfig {
            solver: SolverSpec::new(Method::Rk4, 16, 0.1).unwrap(),
            ..tiny_cfg()
        };
        let adj = UnlearnConfig {
            gradient: GradientMode::Adjoint,
            lambda_tc: 0.0,
            ..cfg.clone()
        };
        let unr = UnlearnConfig { lambda_tc: 0.0, ..cfg };
        let batch = batch_for(&world, &unr, 14);
        let stack = perturbed_stack(&world, &unr, 15);
        let a = total_loss(&world, &stack, &batch, &adj).unwrap();
        let u = total_loss(&world, &stack, &batch, &unr).unwrap();
        assert!((a.total.value - u.total.value).abs() < 1e-12);
        let err = l2_dist(&a.total.grad, &u.total.grad) / l2_norm(&u.total.grad);
        assert!(err < 1e-4, "{err}");
    }
}
