//! Evaluation metrics and the flow-level diagnostic checks.
//!
//! Every evaluation draws from streams derived from a single metric seed, so
//! two stacks evaluated with the same seed see the same latents.

use std::fmt;

use crate::error::{Error, Result};
use crate::numkit::{dot, l2_dist, sample_gaussian, Rng, Vector};
use crate::odeflow::{integrate, Method, SolverSpec};
use crate::toygen::{generate, sample_identity, sample_latent, AdapterModule, AdapterStack, ToyWorld};
use crate::vecfield::{lipschitz_upper_bound, VectorFieldParams};

/// Column order of [`MetricReport::csv_row`].
pub const CSV_HEADER: &str = "run_id,seed,id_score,id_avg,mmd_retain,retention_accuracy,forget_rate,leakage";

/// Step size of the reference grid used by the trajectory checks.
pub const FINE_DT: f64 = 0.01;
/// Fraction of the Grönwall lower bound a trajectory distance must keep.
pub const NONCROSSING_SLACK: f64 = 0.95;
/// Allowed overshoot of the Grönwall upper bound.
pub const GRONWALL_SLACK: f64 = 1.05;
/// Accepted band for the finite-difference convergence order.
pub const ORDER_BAND: (f64, f64) = (1.8, 2.2);

const STREAM_ID_AVG: u64 = 201;
const STREAM_MMD: u64 = 202;
const STREAM_CLASSIFY: u64 = 203;
const STREAM_NOISE: u64 = 204;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub seed: u64,
    pub id_score: f64,
    pub id_avg: f64,
    pub mmd_retain: f64,
    pub retention_accuracy: f64,
    pub forget_rate: f64,
    pub leakage: f64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.run_id,
            self.seed,
            self.id_score,
            self.id_avg,
            self.mmd_retain,
            self.retention_accuracy,
            self.forget_rate,
            self.leakage
        )
    }
}

/// What to evaluate and how many samples to spend on it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    /// Identities that should no longer be generated.
    pub forgotten: Vec<usize>,
    /// Latents the unlearning runs targeted, for `id_score`.
    pub sources: Vec<Vector>,
    pub n_per_id: usize,
    pub id_avg_samples: usize,
    pub mmd_samples: usize,
}

impl EvalSpec {
    pub fn new(forgotten: Vec<usize>, sources: Vec<Vector>) -> Self {
        EvalSpec {
            forgotten,
            sources,
            n_per_id: 100,
            id_avg_samples: 50,
            mmd_samples: 200,
        }
    }
}

/// Cosine similarity of two observations in identity-embedding space.
pub fn id_similarity(world: &ToyWorld, x_before: &[f64], x_after: &[f64]) -> Result<f64> {
    assert_eq!(x_before.len(), x_after.len(), "id_similarity: dimension mismatch");
    let u = world.id_embedding(x_before);
    let v = world.id_embedding(x_after);
    let (uu, vv) = (dot(&u, &u), dot(&v, &v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Degenerate("zero-norm identity embedding".into()));
    }
    // sqrt(uu * uu) == uu exactly, so self-similarity is exactly 1
    Ok((dot(&u, &v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Adds `noise_std`-scaled Gaussian noise to latents from its own stream.
/// With zero noise latents pass through untouched and no draws are made.
struct Perturb {
    rng: Rng,
    std: f64,
}

impl Perturb {
    fn new(seed: u64, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {std}")));
        }
        Ok(Perturb {
            rng: Rng::new(seed).derive(STREAM_NOISE),
            std,
        })
    }

    fn none() -> Self {
        Perturb {
            rng: Rng::new(0),
            std: 0.0,
        }
    }

    fn apply(&mut self, w: Vector) -> Result<Vector> {
        if self.std == 0.0 {
            return Ok(w);
        }
        let n = sample_gaussian(&mut self.rng, w.len(), 0.0, self.std)?;
        Ok(w.add(&n))
    }
}

fn id_avg_with(world: &ToyWorld, stack: &AdapterStack, id: usize, n: usize, rng: &mut Rng, noise: &mut Perturb) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("id_avg needs n >= 1"));
    }
    let mut total = 0.0;
    for _ in 0..n {
        let w = noise.apply(sample_identity(world, rng, id)?)?;
        total += id_similarity(world, &world.frozen(&w), &generate(world, Some(stack), &w)?)?;
    }
    Ok(total / n as f64)
}

/// Mean identity similarity between frozen and adapted outputs over `n`
/// fresh draws of identity `id`.
pub fn id_avg(world: &ToyWorld, stack: &AdapterStack, id: usize, n: usize, rng: &mut Rng) -> Result<f64> {
    id_avg_with(world, stack, id, n, rng, &mut Perturb::none())
}

/// Sum of sorted values, so the result does not depend on input order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mmd_impl(xs: &[Vector], ys: &[Vector], biased: bool) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::invalid("mmd needs two non-empty samples"));
    }
    if !biased && (xs.len() < 2 || ys.len() < 2) {
        return Err(Error::invalid("unbiased mmd needs at least two points per sample"));
    }
    let pooled: Vec<&Vector> = xs.iter().chain(ys).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(l2_dist(pooled[i], pooled[j]));
        }
    }
    let bandwidth = median(dists);
    if !(bandwidth > 0.0) {
        return Err(Error::Degenerate("mmd bandwidth is zero (pooled points identical)".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel = |a: &Vector, b: &Vector| {
        let d = l2_dist(a, b);
        (-gamma * d * d).exp()
    };
    let within = |s: &[Vector]| {
        let mut v = Vec::with_capacity(s.len() * s.len());
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if biased || i != j {
                    v.push(kernel(a, b));
                }
            }
        }
        let pairs = if biased { s.len() * s.len() } else { s.len() * (s.len() - 1) };
        sorted_sum(v) / pairs as f64
    };
    let mut cross = Vec::with_capacity(xs.len() * ys.len());
    for a in xs {
        for b in ys {
            cross.push(kernel(a, b));
        }
    }
    let kxy = sorted_sum(cross) / (xs.len() * ys.len()) as f64;
    Ok((within(xs) + within(ys)) - 2.0 * kxy)
}

/// Unbiased squared MMD, RBF kernel with median-heuristic bandwidth.
pub fn mmd(xs: &[Vector], ys: &[Vector]) -> Result<f64> {
    mmd_impl(xs, ys, false)
}

/// Biased (V-statistic) squared MMD; non-negative and exactly zero on
/// identical multisets.
pub fn mmd_biased(xs: &[Vector], ys: &[Vector]) -> Result<f64> {
    mmd_impl(xs, ys, true)
}

fn mmd_retain_with(world: &ToyWorld, stack: &AdapterStack, n: usize, rng: &mut Rng, noise: &mut Perturb) -> Result<f64> {
    let mut adapted = Vec::with_capacity(n);
    let mut frozen = Vec::with_capacity(n);
    for _ in 0..n {
        let w = noise.apply(sample_latent(world, rng)?)?;
        adapted.push(world.per_embedding(&generate(world, Some(stack), &w)?));
        frozen.push(world.per_embedding(&world.frozen(&w)));
    }
    mmd_biased(&adapted, &frozen)
}

/// Distance between the adapted and frozen output distributions over `n`
/// generic latents: biased MMD between perceptual-embedding features, with
/// the same latents on both sides. Like FID, it compares feature
/// distributions rather than raw outputs.
pub fn mmd_retain(world: &ToyWorld, stack: &AdapterStack, n: usize, rng: &mut Rng) -> Result<f64> {
    mmd_retain_with(world, stack, n, rng, &mut Perturb::none())
}

/// Softmax over negative embedding distances to every identity center.
fn attribution(world: &ToyWorld, x: &[f64]) -> Vec<f64> {
    let e = world.id_embedding(x);
    let logits: Vec<f64> = world.center_embeddings().iter().map(|c| -l2_dist(&e, c)).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ClassStats {
    retention_accuracy: f64,
    forget_rate: f64,
    leakage: f64,
}

fn check_ids(world: &ToyWorld, forgotten: &[usize]) -> Result<()> {
    if let Some(&bad) = forgotten.iter().find(|&&i| i >= world.k()) {
        return Err(Error::invalid(format!("identity {bad} out of range (k = {})", world.k())));
    }
    Ok(())
}

fn class_stats(
    world: &ToyWorld,
    stack: &AdapterStack,
    forgotten: &[usize],
    n_per_id: usize,
    rng: &mut Rng,
    noise: &mut Perturb,
) -> Result<ClassStats> {
    if n_per_id < 10 {
        return Err(Error::invalid(format!("need at least 10 samples per identity, got {n_per_id}")));
    }
    check_ids(world, forgotten)?;
    let (mut kept, mut retained_total) = (0usize, 0usize);
    let (mut still, mut forgotten_total) = (0usize, 0usize);
    let mut leak = 0.0;
    for id in 0..world.k() {
        let is_forgotten = forgotten.contains(&id);
        for _ in 0..n_per_id {
            let w = noise.apply(sample_identity(world, rng, id)?)?;
            let x = generate(world, Some(stack), &w)?;
            let hit = world.classify(&x) == id;
            if is_forgotten {
                forgotten_total += 1;
                still += hit as usize;
            } else {
                retained_total += 1;
                kept += hit as usize;
                if !forgotten.is_empty() {
                    let p = attribution(world, &x);
                    leak += forgotten.iter().map(|&f| p[f]).sum::<f64>() / forgotten.len() as f64;
                }
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClassStats {
        retention_accuracy: frac(kept, retained_total),
        forget_rate: frac(still, forgotten_total),
        leakage: if retained_total == 0 { 0.0 } else { leak / retained_total as f64 },
    })
}

/// Fraction of retain-identity samples still classified as their own
/// identity.
pub fn retention_accuracy(world: &ToyWorld, stack: &AdapterStack, forgotten: &[usize], rng: &mut Rng, n_per_id: usize) -> Result<f64> {
    Ok(class_stats(world, stack, forgotten, n_per_id, rng, &mut Perturb::none())?.retention_accuracy)
}

/// Fraction of forgotten-identity samples still classified as the forgotten
/// identity (lower is better forgetting).
pub fn forget_rate(world: &ToyWorld, stack: &AdapterStack, forgotten: &[usize], rng: &mut Rng, n_per_id: usize) -> Result<f64> {
    Ok(class_stats(world, stack, forgotten, n_per_id, rng, &mut Perturb::none())?.forget_rate)
}

/// Mean softmax attribution to the forgotten identity over retain-identity
/// generations.
pub fn leakage(world: &ToyWorld, stack: &AdapterStack, forgotten_id: usize, rng: &mut Rng, n: usize) -> Result<f64> {
    Ok(class_stats(world, stack, &[forgotten_id], n, rng, &mut Perturb::none())?.leakage)
}

fn evaluate_with(world: &ToyWorld, stack: &AdapterStack, spec: &EvalSpec, run_id: &str, seed: u64, noise: &mut Perturb) -> Result<MetricReport> {
    check_ids(world, &spec.forgotten)?;
    let root = Rng::new(seed);
    let mut id_score = 0.0;
    for src in &spec.sources {
        let w = noise.apply(src.clone())?;
        id_score += id_similarity(world, &world.frozen(&w), &generate(world, Some(stack), &w)?)?;
    }
    if !spec.sources.is_empty() {
        id_score /= spec.sources.len() as f64;
    }
    let mut id_rng = root.derive(STREAM_ID_AVG);
    let mut id_avg_total = 0.0;
    for &f in &spec.forgotten {
        id_avg_total += id_avg_with(world, stack, f, spec.id_avg_samples, &mut id_rng, noise)?;
    }
    let id_avg = if spec.forgotten.is_empty() { 0.0 } else { id_avg_total / spec.forgotten.len() as f64 };
    let mmd_retain = mmd_retain_with(world, stack, spec.mmd_samples, &mut root.derive(STREAM_MMD), noise)?;
    let stats = class_stats(world, stack, &spec.forgotten, spec.n_per_id, &mut root.derive(STREAM_CLASSIFY), noise)?;
    Ok(MetricReport {
        run_id: run_id.to_string(),
        seed,
        id_score,
        id_avg,
        mmd_retain,
        retention_accuracy: stats.retention_accuracy,
        forget_rate: stats.forget_rate,
        leakage: stats.leakage,
    })
}

/// Full report for one stack, with all sampling keyed by `seed`.
pub fn evaluate(world: &ToyWorld, stack: &AdapterStack, spec: &EvalSpec, run_id: &str, seed: u64) -> Result<MetricReport> {
    evaluate_with(world, stack, spec, run_id, seed, &mut Perturb::none())
}

/// [`evaluate`] on latents perturbed by `noise_std` Gaussian noise. Zero
/// noise gives exactly the standard report.
pub fn noise_attack_eval(world: &ToyWorld, stack: &AdapterStack, spec: &EvalSpec, noise_std: f64, run_id: &str, seed: u64) -> Result<MetricReport> {
    let mut noise = Perturb::new(seed, noise_std)?;
    evaluate_with(world, stack, spec, run_id, seed, &mut noise)
}

/// Inputs of every adapter for latent `w`, indexed like the stack.
fn adapter_inputs(world: &ToyWorld, stack: &AdapterStack, w: &[f64]) -> Result<Vec<Vector>> {
    let mut x = Vector::from(w);
    let mut inputs = Vec::with_capacity(stack.adapters().len());
    let mut next = 0;
    for (s, stage) in world.stages().iter().enumerate() {
        x = stage.forward(&x);
        if let Some(a) = stack.adapters().get(next).filter(|a| a.stage == s) {
            next += 1;
            inputs.push(x.clone());
            x = match &a.module {
                AdapterModule::Flow { params, solver } => integrate(&x, params, solver, 0.0)?.last().clone(),
                AdapterModule::LowRank(l) => l.forward(&x).0,
            };
        }
    }
    Ok(inputs)
}

fn flow_adapters(stack: &AdapterStack) -> impl Iterator<Item = (usize, usize, &VectorFieldParams, &SolverSpec)> {
    stack.adapters().iter().enumerate().filter_map(|(i, a)| match &a.module {
        AdapterModule::Flow { params, solver } => Some((i, a.stage, params, solver)),
        AdapterModule::LowRank(_) => None,
    })
}

/// Where a trajectory check came closest to (or crossed) its bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstPoint {
    pub pair: usize,
    pub stage: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonCrossingReport {
    pub pairs: usize,
    /// Smallest `distance(t) / (e^{-L̂t} · distance(0))` seen.
    pub min_ratio: f64,
    /// Smallest `distance(t) / distance(0)` seen.
    pub min_relative_distance: f64,
    pub worst: Option<WorstPoint>,
    pub passed: bool,
}

impl fmt::Display for NonCrossingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-crossing: {} pairs, min bound ratio {:.4}, min relative distance {:.4}",
            self.pairs, self.min_ratio, self.min_relative_distance
        )?;
        if let (false, Some(w)) = (self.passed, self.worst) {
            write!(f, ", violated at pair {} stage {} t={:.2}", w.pair, w.stage, w.time)?;
        }
        Ok(())
    }
}

/// Integrates paired samples of two identities through every flow adapter
/// on a fine rk4 grid and checks that their distance never shrinks below
/// `NONCROSSING_SLACK · e^{-L̂t}` times its starting value.
pub fn check_trajectory_noncrossing(
    world: &ToyWorld,
    stack: &AdapterStack,
    id_i: usize,
    id_j: usize,
    rng: &mut Rng,
    n_pairs: usize,
) -> Result<NonCrossingReport> {
    if id_i == id_j {
        return Err(Error::invalid("non-crossing check needs two distinct identities"));
    }
    check_ids(world, &[id_i, id_j])?;
    let lips: Vec<f64> = stack
        .adapters()
        .iter()
        .map(|a| match &a.module {
            AdapterModule::Flow { params, .. } => lipschitz_upper_bound(params),
            AdapterModule::LowRank(_) => 0.0,
        })
        .collect();
    let mut report = NonCrossingReport {
        pairs: n_pairs,
        min_ratio: f64::INFINITY,
        min_relative_distance: f64::INFINITY,
        worst: None,
        passed: true,
    };
    for pair in 0..n_pairs {
        let a = adapter_inputs(world, stack, &sample_identity(world, rng, id_i)?)?;
        let b = adapter_inputs(world, stack, &sample_identity(world, rng, id_j)?)?;
        for (idx, stage, params, solver) in flow_adapters(stack) {
            let fine = solver.refined(Method::Rk4, FINE_DT);
            let ta = integrate(&a[idx], params, &fine, 0.0)?;
            let tb = integrate(&b[idx], params, &fine, 0.0)?;
            let d0 = l2_dist(&a[idx], &b[idx]);
            if d0 == 0.0 {
                return Err(Error::invalid("non-crossing check got identical starting points"));
            }
            for ((xa, xb), &t) in ta.states.iter().zip(&tb.states).zip(&ta.times) {
                let bound = (-lips[idx] * t).exp() * d0;
                let d = l2_dist(xa, xb);
                let ratio = d / bound;
                report.min_relative_distance = report.min_relative_distance.min(d / d0);
                if ratio < report.min_ratio {
                    report.min_ratio = ratio;
                    report.worst = Some(WorstPoint { pair, stage, time: t });
                }
            }
        }
    }
    if report.worst.is_none() {
        report.min_ratio = 1.0;
        report.min_relative_distance = 1.0;
    }
    report.passed = report.min_ratio >= NONCROSSING_SLACK;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub pairs: usize,
    /// Largest `‖Φ(x) - Φ(x')‖ / (e^{L̂T} ‖x - x'‖)` seen.
    pub max_bound_ratio: f64,
    /// Richardson estimate of the finite-difference Jacobian's order; `None`
    /// when the differences vanish (a linear flow map).
    pub order: Option<f64>,
    pub bound_ok: bool,
    pub order_ok: bool,
}

impl SmoothnessReport {
    pub fn passed(&self) -> bool {
        self.bound_ok && self.order_ok
    }
}

impl fmt::Display for SmoothnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "smoothness: {} pairs, max bound ratio {:.4}", self.pairs, self.max_bound_ratio)?;
        match self.order {
            Some(o) => write!(f, ", fd order {o:.3}"),
            None => write!(f, ", fd order exact"),
        }
    }
}

/// Grönwall upper bound and C¹ check for one field over `[0, horizon]`,
/// using Gaussian starting points of the field's dimension.
pub fn check_field_smoothness(params: &VectorFieldParams, horizon: f64, rng: &mut Rng, n_pairs: usize, eps: f64) -> Result<SmoothnessReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    let dim = params.dim();
    let coarse = SolverSpec::new(Method::Rk4, 1, horizon)?;
    let fine = coarse.refined(Method::Rk4, FINE_DT);
    let flow = |x: &[f64]| -> Result<Vector> { Ok(integrate(x, params, &fine, 0.0)?.last().clone()) };
    let growth = (lipschitz_upper_bound(params) * horizon).exp();
    let mut max_bound_ratio: f64 = 0.0;
    let (mut e1, mut e2) = (0.0, 0.0);
    for _ in 0..n_pairs {
        let x = sample_gaussian(rng, dim, 0.0, 1.0)?;
        let y = sample_gaussian(rng, dim, 0.0, 1.0)?;
        let d0 = l2_dist(&x, &y);
        if d0 > 0.0 {
            max_bound_ratio = max_bound_ratio.max(l2_dist(&flow(&x)?, &flow(&y)?) / (growth * d0));
        }
        // central-difference directional Jacobians at eps, eps/2, eps/4
        let v = y.sub(&x).scale(1.0 / d0.max(f64::MIN_POSITIVE));
        let jv = |h: f64| -> Result<Vector> {
            let mut p = x.clone();
            p.axpy(h, &v);
            let mut m = x.clone();
            m.axpy(-h, &v);
            Ok(flow(&p)?.sub(&flow(&m)?).scale(0.5 / h))
        };
        let (j1, j2, j4) = (jv(eps)?, jv(eps / 2.0)?, jv(eps / 4.0)?);
        e1 += l2_dist(&j1, &j2);
        e2 += l2_dist(&j2, &j4);
    }
    // Below this the differences are rounding noise, not truncation error.
    let noise_floor = 1e-10 * n_pairs as f64;
    let order = (e1 > noise_floor && e2 > 0.0).then(|| (e1 / e2).log2());
    Ok(SmoothnessReport {
        pairs: n_pairs,
        max_bound_ratio,
        order,
        bound_ok: max_bound_ratio <= GRONWALL_SLACK,
        order_ok: order.is_none_or(|o| (ORDER_BAND.0..=ORDER_BAND.1).contains(&o)),
    })
}

/// [`check_field_smoothness`] over every flow adapter of the stack; the
/// reports are merged by taking the worst of each statistic.
pub fn check_smoothness(stack: &AdapterStack, rng: &mut Rng, n_pairs: usize, eps: f64) -> Result<SmoothnessReport> {
    let mut merged = SmoothnessReport {
        pairs: n_pairs,
        max_bound_ratio: 0.0,
        order: None,
        bound_ok: true,
        order_ok: true,
    };
    for (_, _, params, solver) in flow_adapters(stack) {
        let r = check_field_smoothness(params, solver.horizon(), rng, n_pairs, eps)?;
        merged.max_bound_ratio = merged.max_bound_ratio.max(r.max_bound_ratio);
        merged.bound_ok &= r.bound_ok;
        merged.order_ok &= r.order_ok;
        merged.order = match (merged.order, r.order) {
            (Some(a), Some(b)) => Some(if (a - 2.0).abs() >= (b - 2.0).abs() { a } else { b }),
            (a, b) => a.or(b),
        };
    }
    Ok(merged)
}
