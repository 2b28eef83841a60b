//! Experiment protocols: step-size and other sweeps, the adapter ablation,
//! sequential multi-identity unlearning, the noise attack, gradient checks
//! and the theorem property suite.
//!
//! Every protocol returns structured results plus an [`ExperimentOutput`]
//! with a CSV body and pass/fail lines for its ordering checks. Grid points
//! are independent runs; `jobs` caps how many run at once and never changes
//! the output.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    check_field_smoothness, check_trajectory_noncrossing, evaluate, forget_rate, noise_attack_eval,
    MetricReport, NonCrossingReport, SmoothnessReport, CSV_HEADER,
};
use crate::numkit::{l2_dist, l2_norm, sample_gaussian, Rng, Vector};
use crate::odeflow::{adjoint_gradient, integrate, unrolled_gradient, Method, SolverSpec};
use crate::toygen::{
    build_world, generate, sample_identity, sample_latent, AdapterModule, AdapterStack, ToyWorld, WorldConfig,
};
use crate::unlearning::{
    loss_forget, loss_retain, loss_tc, sample_adjacency, total_loss, unidentify_target, unlearn_into,
    AdapterKind, LossHistory, LossValue, UnlearnConfig,
};
use crate::vecfield::{lipschitz_upper_bound, random_params, VectorFieldParams};

/// Normalizer for `mmd_retain` in the composite objective: the median
/// `mmd_retain` of a 20-seed pilot at the default configuration.
pub const MMD_SCALE: f64 = 0.0015;
/// Upper bound on `mmd_retain` for a default run: the maximum of the same
/// pilot, rounded up.
pub const MMD_RETAIN_THRESHOLD: f64 = 0.006;
/// Source latents for run seed `s` are drawn from `Rng::new(SOURCE_SEED_OFFSET + s)`.
pub const SOURCE_SEED_OFFSET: u64 = 1000;
/// Noise levels of the attack, in units of the world's cluster std.
pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.1, 0.3, 1.0];
/// Forget-rate ceiling for ablation variants and multi-identity runs.
pub const FORGET_GATE: f64 = 0.3;

const STREAM_DRIFT: u64 = 301;
const STREAM_CHECKS: u64 = 302;

/// `forget_rate + mmd_retain / MMD_SCALE`.
pub fn composite_j(r: &MetricReport) -> f64 {
    r.forget_rate + r.mmd_retain / MMD_SCALE
}

/// One source latent per identity, in order, for run seed `seed`.
pub fn source_latents(world: &ToyWorld, ids: &[usize], seed: u64) -> Result<Vec<Vector>> {
    let mut rng = Rng::new(SOURCE_SEED_OFFSET + seed);
    ids.iter().map(|&id| sample_identity(world, &mut rng, id)).collect()
}

/// Seeds `cfg.unlearn.seed .. cfg.unlearn.seed + cfg.seeds`.
pub fn seed_list(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|i| cfg.unlearn.seed + i).collect()
}

/// A trained stack with its history and evaluation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stack: AdapterStack,
    pub history: LossHistory,
    pub sources: Vec<Vector>,
    pub report: MetricReport,
}

/// Unlearns `cfg.forget_ids` in order with run seed `seed`, then evaluates
/// with the same seed.
pub fn run_once(world: &ToyWorld, cfg: &RunConfig, seed: u64, run_id: &str) -> Result<RunOutcome> {
    let mut u = cfg.unlearn.clone();
    u.seed = seed;
    let sources = source_latents(world, &cfg.forget_ids, seed)?;
    let (stack, history) = crate::unlearning::run_unlearning(world, &sources, &u)?;
    let report = evaluate(world, &stack, &cfg.eval_spec(sources.clone()), run_id, seed)?;
    Ok(RunOutcome {
        stack,
        history,
        sources,
        report,
    })
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Stat { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        Stat { mean, se }
    }

    /// `sqrt(se_a² + se_b²)`
    pub fn pooled_se(a: Stat, b: Stat) -> f64 {
        a.se.hypot(b.se)
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4e} ± {:.1e}", self.mean, self.se)
    }
}

/// One ordering or threshold assertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// CSV body and summary of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub name: String,
    pub csv: String,
    /// Free-form table lines printed above the checks in the summary.
    pub table: Vec<String>,
    pub checks: Vec<Check>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("# {}\n", self.name);
        for line in &self.table {
            s.push_str(line);
            s.push('\n');
        }
        for c in &self.checks {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }

    /// Writes `<name>.csv` and `<name>.summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join(format!("{}.csv", self.name));
        std::fs::write(&csv, &self.csv).map_err(|e| Error::io(&csv, e))?;
        let sum = dir.join(format!("{}.summary.txt", self.name));
        std::fs::write(&sum, self.summary()).map_err(|e| Error::io(&sum, e))
    }
}

/// Runs `f` over `items` on at most `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    StepSize,
    /// `(steps, step_size)` pairs with a fixed horizon.
    Steps,
    HiddenDim,
    Solver,
    LambdaRatio,
    /// Adapter family and TC on or off.
    Variant,
}

/// One grid point: a label and the config keys it overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl SweepPoint {
    fn new(label: impl Into<String>, overrides: &[(&str, String)]) -> Self {
        SweepPoint {
            label: label.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub name: String,
    pub variable: SweepVariable,
    pub points: Vec<SweepPoint>,
    pub base: RunConfig,
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

impl SweepSpec {
    /// `steps = 4`, `Δt ∈ {0.1, 0.2, 0.4, 0.6, 1.0}`.
    pub fn step_size(base: &RunConfig) -> Self {
        let points = [0.1, 0.2, 0.4, 0.6, 1.0]
            .iter()
            .map(|&dt| SweepPoint::new(fmt_f(dt), &[("steps", "4".into()), ("step_size", fmt_f(dt))]))
            .collect();
        SweepSpec {
            name: "step_size_sweep".into(),
            variable: SweepVariable::StepSize,
            points,
            base: base.clone(),
        }
    }

    /// Horizon 1.6 split as 1x1.6, 2x0.8, 4x0.4, 8x0.2.
    pub fn fixed_horizon(base: &RunConfig) -> Self {
        let points = [(1, 1.6), (2, 0.8), (4, 0.4), (8, 0.2)]
            .iter()
            .map(|&(n, dt)| SweepPoint::new(format!("{n}x{dt}"), &[("steps", n.to_string()), ("step_size", fmt_f(dt))]))
            .collect();
        SweepSpec {
            name: "fixed_horizon_sweep".into(),
            variable: SweepVariable::Steps,
            points,
            base: base.clone(),
        }
    }

    pub fn hidden_dim(base: &RunConfig) -> Self {
        let points = [8, 16, 32, 64]
            .iter()
            .map(|h| SweepPoint::new(h.to_string(), &[("hidden", h.to_string())]))
            .collect();
        SweepSpec {
            name: "hidden_dim_sweep".into(),
            variable: SweepVariable::HiddenDim,
            points,
            base: base.clone(),
        }
    }

    pub fn solver(base: &RunConfig) -> Self {
        let points = [Method::Euler, Method::Rk4, Method::Midpoint]
            .iter()
            .map(|m| SweepPoint::new(m.name(), &[("solver", m.name().to_string())]))
            .collect();
        SweepSpec {
            name: "solver_sweep".into(),
            variable: SweepVariable::Solver,
            points,
            base: base.clone(),
        }
    }

    /// `λ_u : λ_tc : λ_r` ratios.
    pub fn lambda_ratio(base: &RunConfig) -> Self {
        let points = [(1.0, 1.0, 1.0), (1.0, 1.0, 0.5), (0.5, 1.0, 1.0), (1.0, 0.5, 1.0)]
            .iter()
            .map(|&(u, tc, r): &(f64, f64, f64)| {
                SweepPoint::new(
                    format!("{u}:{tc}:{r}"),
                    &[("lambda_u", fmt_f(u)), ("lambda_tc", fmt_f(tc)), ("lambda_r", fmt_f(r))],
                )
            })
            .collect();
        SweepSpec {
            name: "lambda_sweep".into(),
            variable: SweepVariable::LambdaRatio,
            points,
            base: base.clone(),
        }
    }

    /// Discrete low-rank baseline, NODE without TC, NODE with TC.
    pub fn ablation(base: &RunConfig) -> Self {
        let tc = fmt_f(if base.unlearn.lambda_tc > 0.0 { base.unlearn.lambda_tc } else { 1.0 });
        let points = vec![
            SweepPoint::new("discrete", &[("adapter", "lowrank".into()), ("lambda_tc", "0.0".into())]),
            SweepPoint::new("node", &[("adapter", "node".into()), ("lambda_tc", "0.0".into())]),
            SweepPoint::new("node+tc", &[("adapter", "node".into()), ("lambda_tc", tc)]),
        ];
        SweepSpec {
            name: "ablation".into(),
            variable: SweepVariable::Variant,
            points,
            base: base.clone(),
        }
    }

    /// The base config with point `i`'s overrides applied.
    pub fn config_for(&self, i: usize) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &self.points[i].overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub seed: u64,
    pub horizon: f64,
    pub report: MetricReport,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn labels(&self) -> Vec<&str> {
        self.spec.points.iter().map(|p| p.label.as_str()).collect()
    }

    /// Statistic of `f` over the seeds of point `i`.
    pub fn stat(&self, i: usize, f: impl Fn(&SweepRow) -> f64) -> Stat {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.point == i).map(f).collect();
        Stat::of(&xs)
    }

    pub fn point_index(&self, label: &str) -> Option<usize> {
        self.spec.points.iter().position(|p| p.label == label)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("value,horizon,{CSV_HEADER},J\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:?},{},{:?}\n",
                self.spec.points[r.point].label,
                r.horizon,
                r.report.csv_row(),
                r.j
            ));
        }
        s
    }

    fn table(&self) -> Vec<String> {
        let mut t = vec!["value | J | mmd_retain | retention_accuracy | forget_rate".to_string()];
        for (i, p) in self.spec.points.iter().enumerate() {
            t.push(format!(
                "{} | {} | {} | {} | {}",
                p.label,
                self.stat(i, |r| r.j),
                self.stat(i, |r| r.report.mmd_retain),
                self.stat(i, |r| r.report.retention_accuracy),
                self.stat(i, |r| r.report.forget_rate)
            ));
        }
        t
    }

    /// Checks this sweep's paper-shaped orderings, if it has any.
    pub fn checks(&self) -> Vec<Check> {
        match self.spec.variable {
            SweepVariable::StepSize => {
                let mut c = vec![interior_optimum_check(self)];
                let last = self.spec.points.len() - 1;
                let mmd = |i| self.stat(i, |r| r.report.mmd_retain).mean;
                let worst = (0..=last).all(|i| mmd(i) <= mmd(last));
                c.push(Check::new(
                    "retention worst at largest step",
                    worst,
                    format!("mmd_retain at {} = {:.4e}", self.spec.points[last].label, mmd(last)),
                ));
                if let (Some(a), Some(b)) = (self.point_index("0.4"), self.point_index("0.1")) {
                    c.push(Check::new(
                        "retention better at 0.4 than 0.1",
                        mmd(a) < mmd(b),
                        format!("{:.4e} vs {:.4e}", mmd(a), mmd(b)),
                    ));
                }
                c
            }
            SweepVariable::Steps => {
                let mut c = vec![interior_optimum_check(self)];
                if let Some(i) = self.point_index("4x0.4") {
                    let best = best_point(self);
                    c.push(Check::new(
                        "optimum at 4 steps of 0.4",
                        best == i,
                        format!("best J at {}", self.spec.points[best].label),
                    ));
                }
                c
            }
            SweepVariable::LambdaRatio => match (self.point_index("1:1:1"), self.point_index("1:1:0.5")) {
                (Some(a), Some(b)) => {
                    let (sa, sb) = (self.stat(a, |r| r.report.mmd_retain), self.stat(b, |r| r.report.mmd_retain));
                    vec![Check::new(
                        "halving the retain weight worsens retention",
                        sb.mean > sa.mean,
                        format!("mmd_retain 1:1:0.5 = {sb} vs 1:1:1 = {sa}"),
                    )]
                }
                _ => vec![],
            },
            SweepVariable::Variant => ablation_checks(self),
            SweepVariable::HiddenDim | SweepVariable::Solver => vec![],
        }
    }

    pub fn output(&self) -> ExperimentOutput {
        ExperimentOutput {
            name: self.spec.name.clone(),
            csv: self.csv(),
            table: self.table(),
            checks: self.checks(),
        }
    }
}

fn best_point(res: &SweepResult) -> usize {
    (0..res.spec.points.len())
        .min_by(|&a, &b| res.stat(a, |r| r.j).mean.total_cmp(&res.stat(b, |r| r.j).mean))
        .expect("sweeps have points")
}

/// Best interior mean J beats both extremes by at least one pooled SE.
fn interior_optimum_check(res: &SweepResult) -> Check {
    let n = res.spec.points.len();
    if n < 3 {
        return Check::new("interior optimum", false, "needs at least three grid points");
    }
    let j = |i| res.stat(i, |r| r.j);
    let best = (1..n - 1)
        .min_by(|&a, &b| j(a).mean.total_cmp(&j(b).mean))
        .expect("n >= 3");
    let margin = |e: usize| (j(e).mean - j(best).mean) / Stat::pooled_se(j(e), j(best));
    let (lo, hi) = (margin(0), margin(n - 1));
    Check::new(
        "interior optimum beats both extremes by 1 pooled SE",
        lo >= 1.0 && hi >= 1.0,
        format!(
            "best interior {} J = {}; {} by {lo:.2} SE, {} by {hi:.2} SE",
            res.spec.points[best].label,
            j(best),
            res.spec.points[0].label,
            res.spec.points[n - 1].label
        ),
    )
}

fn ablation_checks(res: &SweepResult) -> Vec<Check> {
    let (Some(d), Some(n), Some(t)) = (res.point_index("discrete"), res.point_index("node"), res.point_index("node+tc")) else {
        return vec![];
    };
    let mmd = |i| res.stat(i, |r| r.report.mmd_retain);
    let fr = |i| res.stat(i, |r| r.report.forget_rate);
    let sep = (mmd(d).mean - mmd(t).mean) / Stat::pooled_se(mmd(d), mmd(t));
    vec![
        Check::new(
            "mmd_retain node+tc < node < discrete",
            mmd(t).mean < mmd(n).mean && mmd(n).mean < mmd(d).mean,
            format!("node+tc {}, node {}, discrete {}", mmd(t), mmd(n), mmd(d)),
        ),
        Check::new("node+tc vs discrete separated by 1 pooled SE", sep >= 1.0, format!("{sep:.2} SE")),
        Check::new(
            format!("every variant forget_rate <= {FORGET_GATE}"),
            [d, n, t].iter().all(|&i| fr(i).mean <= FORGET_GATE),
            format!("discrete {:.3}, node {:.3}, node+tc {:.3}", fr(d).mean, fr(n).mean, fr(t).mean),
        ),
    ]
}

/// Full unlearning run per (point, seed).
pub fn run_sweep(world: &ToyWorld, spec: &SweepSpec, jobs: usize) -> Result<SweepResult> {
    if spec.points.is_empty() {
        return Err(Error::Config(format!("{}: sweep has no points", spec.name)));
    }
    let configs = (0..spec.points.len()).map(|i| spec.config_for(i)).collect::<Result<Vec<_>>>()?;
    let seeds = seed_list(&spec.base);
    let tasks: Vec<(usize, u64)> = (0..spec.points.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let rows = par_map(&tasks, jobs, |&(i, seed)| {
        let cfg = &configs[i];
        let id = format!("{}/{}/s{seed}", spec.name, spec.points[i].label);
        let out = run_once(world, cfg, seed, &id)?;
        Ok(SweepRow {
            point: i,
            seed,
            horizon: cfg.unlearn.solver.horizon(),
            j: composite_j(&out.report),
            report: out.report,
        })
    })?;
    Ok(SweepResult { spec: spec.clone(), rows })
}

/// Mean `‖adapted - frozen‖` over retain-identity samples.
pub fn retain_drift(world: &ToyWorld, stack: &AdapterStack, forgotten: &[usize], seed: u64, n_per_id: usize) -> Result<f64> {
    let mut rng = Rng::new(seed).derive(STREAM_DRIFT);
    let (mut total, mut count) = (0.0, 0usize);
    for id in (0..world.k()).filter(|i| !forgotten.contains(i)) {
        for _ in 0..n_per_id {
            let w = sample_identity(world, &mut rng, id)?;
            total += l2_dist(&generate(world, Some(stack), &w)?, &world.frozen(&w));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// State after unlearning the first `count` identities of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIdRow {
    pub seed: u64,
    pub count: usize,
    pub report: MetricReport,
    /// Forget rate of each unlearned identity on its own.
    pub per_id_forget: Vec<f64>,
    pub drift: f64,
    pub noncrossing: Vec<(usize, usize, NonCrossingReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIdResult {
    pub ids: Vec<usize>,
    pub rows: Vec<MultiIdRow>,
}

impl MultiIdResult {
    pub fn at(&self, count: usize) -> impl Iterator<Item = &MultiIdRow> {
        self.rows.iter().filter(move |r| r.count == count)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("identities,{CSV_HEADER},per_id_forget,drift,noncrossing_min_ratio\n");
        for r in &self.rows {
            let per = r.per_id_forget.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(";");
            let nc = r.noncrossing.iter().map(|(_, _, n)| n.min_ratio).fold(f64::INFINITY, f64::min);
            let nc = if nc.is_finite() { format!("{nc:?}") } else { String::new() };
            s.push_str(&format!("{},{},{per},{:?},{nc}\n", r.count, r.report.csv_row(), r.drift));
        }
        s
    }

    pub fn checks(&self) -> Vec<Check> {
        let mean = |count: usize, f: &dyn Fn(&MultiIdRow) -> f64| Stat::of(&self.at(count).map(f).collect::<Vec<_>>()).mean;
        let mut checks = Vec::new();
        for count in 2..=self.ids.len() {
            let per: Vec<f64> = (0..count).map(|i| mean(count, &|r| r.per_id_forget[i])).collect();
            checks.push(Check::new(
                format!("after {count} identities every forget_rate <= {FORGET_GATE}"),
                per.iter().all(|&f| f <= FORGET_GATE),
                format!("{per:.3?}"),
            ));
            let (single, now) = (mean(1, &|r| r.report.mmd_retain), mean(count, &|r| r.report.mmd_retain));
            checks.push(Check::new(
                format!("after {count} identities mmd_retain <= 2x single"),
                now <= 2.0 * single,
                format!("{now:.4e} vs single {single:.4e}"),
            ));
            let (d1, dn) = (mean(1, &|r| r.drift), mean(count, &|r| r.drift));
            checks.push(Check::new(
                format!("after {count} identities retain drift <= 1.5x single"),
                dn <= 1.5 * d1,
                format!("{dn:.4} vs single {d1:.4}"),
            ));
        }
        let reports: Vec<&NonCrossingReport> = self.rows.iter().flat_map(|r| r.noncrossing.iter().map(|(_, _, n)| n)).collect();
        let worst = reports.iter().map(|n| n.min_ratio).fold(f64::INFINITY, f64::min);
        checks.push(Check::new(
            "non-crossing between every unlearned pair",
            reports.iter().all(|n| n.passed),
            format!("{} checks, min bound ratio {worst:.4}", reports.len()),
        ));
        checks
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut table = vec!["identities | mmd_retain | retention_accuracy | forget_rate | drift".to_string()];
        for count in 1..=self.ids.len() {
            let st = |f: &dyn Fn(&MultiIdRow) -> f64| Stat::of(&self.at(count).map(f).collect::<Vec<_>>());
            table.push(format!(
                "{count} | {} | {} | {} | {}",
                st(&|r| r.report.mmd_retain),
                st(&|r| r.report.retention_accuracy),
                st(&|r| r.report.forget_rate),
                st(&|r| r.drift)
            ));
        }
        ExperimentOutput {
            name: "multi_identity".into(),
            csv: self.csv(),
            table,
            checks: self.checks(),
        }
    }
}

/// Sequentially unlearns `ids` (2 or 3 identities) on one stack per seed,
/// recording metrics, per-identity forget rates, retain drift and pairwise
/// non-crossing after each identity.
pub fn run_multi_identity(world: &ToyWorld, cfg: &RunConfig, ids: &[usize], jobs: usize) -> Result<MultiIdResult> {
    if !(2..=3).contains(&ids.len()) {
        return Err(Error::Config(format!("multi-identity runs take 2 or 3 identities, got {}", ids.len())));
    }
    let mut probe = cfg.clone();
    probe.forget_ids = ids.to_vec();
    probe.validate()?;
    let seeds = seed_list(cfg);
    let per_seed = par_map(&seeds, jobs, |&seed| {
        let mut u = cfg.unlearn.clone();
        u.seed = seed;
        let root = Rng::new(seed);
        let mut stack = u.init_stack(world, &mut root.derive(101))?;
        let mut train = root.derive(102);
        let sources = source_latents(world, ids, seed)?;
        let mut rows = Vec::with_capacity(ids.len());
        for count in 1..=ids.len() {
            unlearn_into(world, &mut stack, &sources[count - 1], &u, &mut train)?;
            let done = &ids[..count];
            let mut ec = cfg.clone();
            ec.forget_ids = done.to_vec();
            let report = evaluate(world, &stack, &ec.eval_spec(sources[..count].to_vec()), &format!("multi/{count}/s{seed}"), seed)?;
            let per_id_forget = done
                .iter()
                .map(|&id| forget_rate(world, &stack, &[id], &mut Rng::new(seed).derive(203), cfg.n_per_id))
                .collect::<Result<Vec<_>>>()?;
            let drift = retain_drift(world, &stack, ids, seed, cfg.n_per_id)?;
            let mut noncrossing = Vec::new();
            let mut rng = root.derive(STREAM_CHECKS);
            for a in 0..count {
                for b in a + 1..count {
                    let r = check_trajectory_noncrossing(world, &stack, done[a], done[b], &mut rng, cfg.check_pairs)?;
                    noncrossing.push((done[a], done[b], r));
                }
            }
            rows.push(MultiIdRow {
                seed,
                count,
                report,
                per_id_forget,
                drift,
                noncrossing,
            });
        }
        Ok(rows)
    })?;
    let mut rows: Vec<MultiIdRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.count, r.seed));
    Ok(MultiIdResult { ids: ids.to_vec(), rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub variant: String,
    pub level: f64,
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseResult {
    pub variants: Vec<String>,
    pub levels: Vec<f64>,
    pub rows: Vec<NoiseRow>,
}

impl NoiseResult {
    pub fn stat(&self, variant: &str, level: f64, f: impl Fn(&MetricReport) -> f64) -> Stat {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.level == level)
            .map(|r| f(&r.report))
            .collect();
        Stat::of(&xs)
    }

    /// Mean increase of forget rate and mean drop of retention accuracy
    /// relative to the noiseless evaluation.
    pub fn degradation(&self, variant: &str, level: f64) -> (f64, f64) {
        let base = self.levels[0];
        let fr = self.stat(variant, level, |r| r.forget_rate).mean - self.stat(variant, base, |r| r.forget_rate).mean;
        let ra = self.stat(variant, base, |r| r.retention_accuracy).mean - self.stat(variant, level, |r| r.retention_accuracy).mean;
        (fr, ra)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("variant,noise_std,{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{}\n", r.variant, r.level, r.report.csv_row()));
        }
        s
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut checks = Vec::new();
        for &level in &self.levels[1..] {
            let (nf, nr) = self.degradation("node", level);
            let (df, dr) = self.degradation("discrete", level);
            checks.push(Check::new(
                format!("node degrades no more than discrete at noise {level:.3}"),
                nf <= df && nr <= dr,
                format!("forget +{nf:.3} vs +{df:.3}, retention -{nr:.3} vs -{dr:.3}"),
            ));
        }
        for v in &self.variants {
            let ra: Vec<f64> = self.levels.iter().map(|&l| self.stat(v, l, |r| r.retention_accuracy).mean).collect();
            checks.push(Check::new(
                format!("{v} retention non-increasing in noise"),
                ra.windows(2).all(|w| w[1] <= w[0]),
                format!("{ra:.3?}"),
            ));
        }
        checks
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut table = vec!["variant | noise_std | forget_rate | retention_accuracy | mmd_retain".to_string()];
        for v in &self.variants {
            for &l in &self.levels {
                table.push(format!(
                    "{v} | {l:.3} | {} | {} | {}",
                    self.stat(v, l, |r| r.forget_rate),
                    self.stat(v, l, |r| r.retention_accuracy),
                    self.stat(v, l, |r| r.mmd_retain)
                ));
            }
        }
        ExperimentOutput {
            name: "noise_attack".into(),
            csv: self.csv(),
            table,
            checks: self.checks(),
        }
    }
}

/// Trains NODE and discrete stacks per seed, then evaluates each at
/// `NOISE_LEVELS · cluster_std`.
pub fn run_noise_attack(world: &ToyWorld, cfg: &RunConfig, jobs: usize) -> Result<NoiseResult> {
    let variants = [("node", AdapterKind::NeuralOde), ("discrete", AdapterKind::LowRank)];
    let levels: Vec<f64> = NOISE_LEVELS.iter().map(|l| l * world.cluster_std()).collect();
    let seeds = seed_list(cfg);
    let tasks: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let per_task = par_map(&tasks, jobs, |&(v, seed)| {
        let mut c = cfg.clone();
        c.unlearn.adapter = variants[v].1;
        let out = run_once(world, &c, seed, "noise")?;
        let spec = c.eval_spec(out.sources.clone());
        levels
            .iter()
            .map(|&level| {
                let id = format!("noise/{}/{level:?}/s{seed}", variants[v].0);
                Ok(NoiseRow {
                    variant: variants[v].0.to_string(),
                    level,
                    seed,
                    report: noise_attack_eval(world, &out.stack, &spec, level, &id, seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(NoiseResult {
        variants: variants.iter().map(|v| v.0.to_string()).collect(),
        levels,
        rows: per_task.into_iter().flatten().collect(),
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    l2_dist(a, b) / l2_norm(a).max(l2_norm(b)).max(1e-300)
}

fn flat_grad(g: &crate::odeflow::FlowGradient) -> Vec<f64> {
    let mut v = g.d_params.to_flat();
    v.extend_from_slice(&g.d_initial);
    v
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub label: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Unrolled flow gradients vs central differences.
    pub unrolled: Vec<GradcheckRow>,
    /// `(N, max relative gap)` between adjoint and unrolled gradients.
    pub adjoint: Vec<(usize, f64)>,
    /// Loss gradients vs central differences on a 2-dim world.
    pub losses: Vec<GradcheckRow>,
}

pub const FD_TOLERANCE: f64 = 1e-4;
pub const ADJOINT_TOLERANCE: f64 = 1e-2;
const FD_STEP: f64 = 1e-5;

impl GradcheckReport {
    pub fn max_unrolled(&self) -> f64 {
        self.unrolled.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn max_loss(&self) -> f64 {
        self.losses.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn checks(&self) -> Vec<Check> {
        let gaps: Vec<f64> = self.adjoint.iter().map(|a| a.1).collect();
        let last = *gaps.last().unwrap_or(&f64::NAN);
        vec![
            Check::new(
                format!("unrolled vs finite differences < {FD_TOLERANCE:e}"),
                self.max_unrolled() < FD_TOLERANCE,
                format!("max {:.3e} over {} instances", self.max_unrolled(), self.unrolled.len()),
            ),
            Check::new(
                "adjoint gap shrinks as N doubles",
                gaps.windows(2).all(|w| w[1] < w[0]),
                gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", "),
            ),
            Check::new(
                format!("adjoint gap at N = {} < {ADJOINT_TOLERANCE:e}", self.adjoint.last().map_or(0, |a| a.0)),
                last < ADJOINT_TOLERANCE,
                format!("{last:.3e}"),
            ),
            Check::new(
                format!("loss gradients vs finite differences < {FD_TOLERANCE:e}"),
                self.max_loss() < FD_TOLERANCE,
                format!("max {:.3e} over {} checks", self.max_loss(), self.losses.len()),
            ),
        ]
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut csv = String::from("kind,label,rel_error\n");
        for r in &self.unrolled {
            csv.push_str(&format!("unrolled,{},{:?}\n", r.label, r.rel_error));
        }
        for (n, e) in &self.adjoint {
            csv.push_str(&format!("adjoint,N={n},{e:?}\n"));
        }
        for r in &self.losses {
            csv.push_str(&format!("loss,{},{:?}\n", r.label, r.rel_error));
        }
        let mut table = vec!["check | max relative error".to_string()];
        table.push(format!("unrolled flow gradient | {:.3e}", self.max_unrolled()));
        for (n, e) in &self.adjoint {
            table.push(format!("adjoint vs unrolled, N = {n} | {e:.3e}"));
        }
        table.push(format!("loss gradients | {:.3e}", self.max_loss()));
        ExperimentOutput {
            name: "gradcheck".into(),
            csv,
            table,
            checks: self.checks(),
        }
    }
}

/// Central differences of `L(z_T) = c · z_T` over params and initial state.
fn fd_flow_gradient(z0: &Vector, p: &VectorFieldParams, spec: &SolverSpec, c: &[f64]) -> Result<Vec<f64>> {
    let loss = |z: &[f64], q: &VectorFieldParams| -> Result<f64> { Ok(c.iter().zip(integrate(z, q, spec, 0.0)?.last().iter()).map(|(a, b)| a * b).sum()) };
    let base = p.to_flat();
    let mut q = p.clone();
    let mut out = Vec::with_capacity(base.len() + z0.len());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] += FD_STEP;
        q.set_flat(&x);
        let lp = loss(z0, &q)?;
        x[i] -= 2.0 * FD_STEP;
        q.set_flat(&x);
        let lm = loss(z0, &q)?;
        out.push((lp - lm) / (2.0 * FD_STEP));
    }
    for i in 0..z0.len() {
        let mut z = z0.clone();
        z[i] += FD_STEP;
        let lp = loss(&z, p)?;
        z[i] -= 2.0 * FD_STEP;
        let lm = loss(&z, p)?;
        out.push((lp - lm) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Field strength of the random instances used by the gradient checks.
pub const GRADCHECK_FIELD_SCALE: f64 = 0.5;
/// Grid sizes of the adjoint comparison, at horizon 1.6.
pub const ADJOINT_GRID: [usize; 5] = [4, 8, 16, 32, 64];

/// Unrolled gradients on `instances` random flows (dim and N up to 8, all
/// solvers), the Euler adjoint against unrolled as N doubles from 4 to 64,
/// and the training-loss gradients on a 2-dim world.
pub fn gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed).derive(STREAM_CHECKS);
    let mut unrolled = Vec::with_capacity(instances);
    for i in 0..instances {
        let dim = 1 + rng.next_index(8);
        let hidden = 1 + rng.next_index(8);
        let steps = 1 + rng.next_index(8);
        let method = Method::ALL[i % Method::ALL.len()];
        let spec = SolverSpec::new(method, steps, 0.05 + 0.35 * rng.next_f64())?;
        let p = random_params(&mut rng, dim, hidden, GRADCHECK_FIELD_SCALE)?;
        let z0 = sample_gaussian(&mut rng, dim, 0.0, 1.0)?;
        let c = sample_gaussian(&mut rng, dim, 0.0, 1.0)?;
        let g = flat_grad(&unrolled_gradient(&z0, &p, &spec, &c)?);
        let fd = fd_flow_gradient(&z0, &p, &spec, &c)?;
        unrolled.push(GradcheckRow {
            label: format!("{method}/dim{dim}/h{hidden}/N{steps}"),
            rel_error: rel_err(&g, &fd),
        });
    }

    let horizon = 1.6;
    let fields: Vec<(VectorFieldParams, Vector, Vector)> = (0..5)
        .map(|_| -> Result<_> {
            Ok((
                random_params(&mut rng, 8, 16, GRADCHECK_FIELD_SCALE)?,
                sample_gaussian(&mut rng, 8, 0.0, 1.0)?,
                sample_gaussian(&mut rng, 8, 0.0, 1.0)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut adjoint = Vec::new();
    for n in ADJOINT_GRID {
        let spec = SolverSpec::new(Method::Euler, n, horizon / n as f64)?;
        let mut worst: f64 = 0.0;
        for (p, z0, c) in &fields {
            let a = flat_grad(&adjoint_gradient(z0, p, &spec, c)?);
            let u = flat_grad(&unrolled_gradient(z0, p, &spec, c)?);
            worst = worst.max(rel_err(&a, &u));
        }
        adjoint.push((n, worst));
    }

    Ok(GradcheckReport {
        unrolled,
        adjoint,
        losses: loss_gradchecks(seed)?,
    })
}

fn fd_stack(stack: &AdapterStack, f: &LossFn) -> Result<f64> {
    let analytic = f(stack)?;
    let base = stack.to_flat();
    let mut s = stack.clone();
    let mut fd = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] += FD_STEP;
        s.set_flat(&x);
        let lp = f(&s)?.value;
        x[i] -= 2.0 * FD_STEP;
        s.set_flat(&x);
        let lm = f(&s)?.value;
        fd.push((lp - lm) / (2.0 * FD_STEP));
    }
    Ok(rel_err(&analytic.grad, &fd))
}

type LossFn<'a> = dyn Fn(&AdapterStack) -> Result<LossValue> + 'a;

fn loss_gradchecks(seed: u64) -> Result<Vec<GradcheckRow>> {
    let world = build_world(&WorldConfig {
        seed: 2,
        k: 2,
        latent_dim: 2,
        obs_dim: 4,
        cluster_std: 0.1,
    })?;
    let mut rows = Vec::new();
    for (kind, method) in [
        (AdapterKind::NeuralOde, Method::Euler),
        (AdapterKind::NeuralOde, Method::Midpoint),
        (AdapterKind::NeuralOde, Method::Rk4),
        (AdapterKind::LowRank, Method::Euler),
    ] {
        let cfg = UnlearnConfig {
            adapter: kind,
            hidden: 4,
            rank: 2,
            solver: SolverSpec::new(method, 3, 0.4)?,
            ..UnlearnConfig::default()
        };
        let mut rng = Rng::new(seed).derive(STREAM_CHECKS + 1);
        let mut stack = cfg.init_stack(&world, &mut rng)?;
        let flat: Vec<f64> = stack.to_flat().iter().map(|x| x + 0.3 * rng.next_normal()).collect();
        stack.set_flat(&flat);
        let w_u = sample_identity(&world, &mut rng, 0)?;
        let w_t = unidentify_target(&w_u, world.w_bar(), cfg.d * world.latent_scale())?;
        let batch = sample_adjacency(&mut rng, &world, &w_u, &w_t, &cfg)?;
        let tag = match kind {
            AdapterKind::NeuralOde => method.name(),
            AdapterKind::LowRank => "lowrank",
        };
        let checks: [(&str, &LossFn); 4] = [
            ("forget", &|s| Ok(loss_forget(&world, s, &batch, &cfg)?.0)),
            ("retain", &|s| loss_retain(&world, s, &batch, &cfg)),
            ("tc", &|s| {
                let (_, cache) = loss_forget(&world, s, &batch, &cfg)?;
                loss_tc(&world, s, Some(&cache), cfg.gradient)
            }),
            ("total", &|s| Ok(total_loss(&world, s, &batch, &cfg)?.total)),
        ];
        for (name, f) in checks {
            if kind == AdapterKind::LowRank && name == "tc" {
                continue;
            }
            rows.push(GradcheckRow {
                label: format!("{name}/{tag}"),
                rel_error: fd_stack(&stack, f)?,
            });
        }
    }
    Ok(rows)
}

/// Results of the theorem property suite.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    /// Methods whose fresh stacks reproduced the frozen generator bitwise.
    pub identity_at_init: Vec<(Method, bool)>,
    pub smoothness: Vec<SmoothnessReport>,
    pub noncrossing_pre: Vec<NonCrossingReport>,
    pub noncrossing_post: Vec<NonCrossingReport>,
}

/// Horizon of the random fields in the smoothness suite.
pub const SMOOTHNESS_HORIZON: f64 = 1.6;
/// Cap on `L̂ T` for the random smooth fields.
pub const SMOOTHNESS_LT_CAP: f64 = 1.9;

impl TheoremReport {
    pub fn checks(&self) -> Vec<Check> {
        let init_ok = self.identity_at_init.iter().all(|(_, ok)| *ok);
        let bound = self.smoothness.iter().map(|s| s.max_bound_ratio).fold(0.0, f64::max);
        let orders: Vec<f64> = self.smoothness.iter().filter_map(|s| s.order).collect();
        let (omin, omax) = orders.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &o| (a.min(o), b.max(o)));
        let nc = |v: &[NonCrossingReport]| v.iter().map(|r| r.min_ratio).fold(f64::INFINITY, f64::min);
        vec![
            Check::new(
                "identity at init",
                init_ok,
                self.identity_at_init.iter().map(|(m, ok)| format!("{m}={ok}")).collect::<Vec<_>>().join(", "),
            ),
            Check::new(
                "Gronwall bound within 5% slack",
                self.smoothness.iter().all(|s| s.bound_ok),
                format!("max ratio {bound:.4} over {} fields", self.smoothness.len()),
            ),
            Check::new(
                "flow Jacobian fd order in [1.8, 2.2]",
                self.smoothness.iter().all(|s| s.order_ok),
                format!("orders in [{omin:.3}, {omax:.3}]"),
            ),
            Check::new(
                "non-crossing before unlearning",
                self.noncrossing_pre.iter().all(|r| r.passed),
                format!("min bound ratio {:.4}", nc(&self.noncrossing_pre)),
            ),
            Check::new(
                "non-crossing after unlearning",
                self.noncrossing_post.iter().all(|r| r.passed),
                format!("min bound ratio {:.4}", nc(&self.noncrossing_post)),
            ),
        ]
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut csv = String::from("check,index,value\n");
        for (m, ok) in &self.identity_at_init {
            csv.push_str(&format!("identity_at_init,{m},{ok}\n"));
        }
        for (i, s) in self.smoothness.iter().enumerate() {
            csv.push_str(&format!("gronwall_ratio,{i},{:?}\n", s.max_bound_ratio));
            csv.push_str(&format!("fd_order,{i},{}\n", s.order.map_or("exact".into(), |o| format!("{o:?}"))));
        }
        for (tag, v) in [("noncrossing_pre", &self.noncrossing_pre), ("noncrossing_post", &self.noncrossing_post)] {
            for (i, r) in v.iter().enumerate() {
                csv.push_str(&format!("{tag},{i},{:?}\n", r.min_ratio));
            }
        }
        ExperimentOutput {
            name: "theorems".into(),
            csv,
            table: vec![],
            checks: self.checks(),
        }
    }
}

/// A random smooth field with `L̂ T` capped at [`SMOOTHNESS_LT_CAP`].
pub fn capped_random_field(rng: &mut Rng, dim: usize, hidden: usize) -> Result<VectorFieldParams> {
    let mut p = random_params(rng, dim, hidden, 1.0)?;
    let lt = lipschitz_upper_bound(&p) * SMOOTHNESS_HORIZON;
    if lt > SMOOTHNESS_LT_CAP {
        p.w2 = p.w2.scale(SMOOTHNESS_LT_CAP / lt);
    }
    Ok(p)
}

/// Identity-at-init on 100 latents for every solver, the smoothness suite
/// on 10 random fields, and non-crossing on identity pairs before and after
/// a default unlearning run.
pub fn run_theorems(world: &ToyWorld, cfg: &RunConfig, seed: u64) -> Result<TheoremReport> {
    let root = Rng::new(seed);
    let mut rng = root.derive(STREAM_CHECKS);
    let latents = (0..100).map(|_| sample_latent(world, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut identity_at_init = Vec::new();
    for method in Method::ALL {
        let solver = SolverSpec { method, ..cfg.unlearn.solver };
        let stack = AdapterStack::neural_ode(world, &mut root.derive(101), cfg.unlearn.hidden, solver)?;
        let mut ok = true;
        for w in &latents {
            let a = generate(world, Some(&stack), w)?;
            let f = world.frozen(w);
            ok &= a.iter().zip(f.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        identity_at_init.push((method, ok));
    }

    let mut smoothness = Vec::new();
    for _ in 0..10 {
        let p = capped_random_field(&mut rng, 8, 16)?;
        smoothness.push(check_field_smoothness(&p, SMOOTHNESS_HORIZON, &mut rng, cfg.check_pairs, 1e-2)?);
    }

    let mut run_cfg = cfg.clone();
    run_cfg.unlearn.adapter = AdapterKind::NeuralOde;
    let trained = run_once(world, &run_cfg, seed, "theorems")?;
    let fresh = run_cfg.unlearn.init_stack(world, &mut root.derive(101))?;
    let pairs: Vec<(usize, usize)> = (0..world.k()).flat_map(|i| (i + 1..world.k()).map(move |j| (i, j))).collect();
    let per_pair = cfg.check_pairs.div_ceil(pairs.len());
    let mut noncrossing = |stack: &AdapterStack| -> Result<Vec<NonCrossingReport>> {
        pairs.iter().map(|&(i, j)| check_trajectory_noncrossing(world, stack, i, j, &mut rng, per_pair)).collect()
    };
    let noncrossing_pre = noncrossing(&fresh)?;
    let noncrossing_post = noncrossing(&trained.stack)?;
    Ok(TheoremReport {
        identity_at_init,
        smoothness,
        noncrossing_pre,
        noncrossing_post,
    })
}

/// True when the stack has at least one flow adapter.
pub fn has_flow(stack: &AdapterStack) -> bool {
    stack.adapters().iter().any(|a| matches!(a.module, AdapterModule::Flow { .. }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        for o in ["epochs=20", "seeds=2", "n_per_id=10", "mmd_samples=20", "id_avg_samples=5", "check_pairs=4", "hidden=8"] {
            c.apply_override(o).unwrap();
        }
        c
    }

    #[test]
    fn stat_examples() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[4.0]).se, 0.0);
        assert_eq!(Stat::pooled_se(Stat { mean: 0.0, se: 3.0 }, Stat { mean: 0.0, se: 4.0 }), 5.0);
    }

    #[test]
    fn composite_is_pure() {
        let r = MetricReport {
            run_id: String::new(),
            seed: 0,
            id_score: 0.0,
            id_avg: 0.0,
            mmd_retain: 2.0 * MMD_SCALE,
            retention_accuracy: 1.0,
            forget_rate: 0.25,
            leakage: 0.0,
        };
        assert_eq!(composite_j(&r), 2.25);
    }

    #[test]
    fn grids_match_protocols() {
        let b = RunConfig::default();
        let labels = |s: SweepSpec| s.points.iter().map(|p| p.label.clone()).collect::<Vec<_>>();
        assert_eq!(labels(SweepSpec::step_size(&b)), ["0.1", "0.2", "0.4", "0.6", "1.0"]);
        assert_eq!(labels(SweepSpec::fixed_horizon(&b)), ["1x1.6", "2x0.8", "4x0.4", "8x0.2"]);
        assert_eq!(labels(SweepSpec::solver(&b)), ["euler", "rk4", "midpoint"]);
        assert_eq!(labels(SweepSpec::hidden_dim(&b)), ["8", "16", "32", "64"]);
        let l = labels(SweepSpec::lambda_ratio(&b));
        for want in ["1:1:1", "1:1:0.5", "0.5:1:1", "1:0.5:1"] {
            assert!(l.iter().any(|x| x == want), "{want}");
        }
        let fh = SweepSpec::fixed_horizon(&b);
        for i in 0..fh.points.len() {
            assert!((fh.config_for(i).unwrap().unlearn.solver.horizon() - 1.6).abs() < 1e-12);
        }
        let ab = SweepSpec::ablation(&b);
        assert_eq!(ab.config_for(0).unwrap().unlearn.adapter, AdapterKind::LowRank);
        assert_eq!(ab.config_for(1).unwrap().unlearn.lambda_tc, 0.0);
        assert_eq!(ab.config_for(2).unwrap().unlearn.lambda_tc, 1.0);
    }

    #[test]
    fn sweeps_are_reproducible_and_job_count_independent() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let mut spec = SweepSpec::step_size(&quick_cfg());
        spec.points.truncate(3);
        let a = run_sweep(&world, &spec, 1).unwrap();
        let b = run_sweep(&world, &spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3 * 2);
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.csv().lines().count(), 7);
        let out = a.output();
        assert_eq!(out.checks.len(), 3);
    }

    #[test]
    fn multi_identity_records_each_prefix() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let r = run_multi_identity(&world, &quick_cfg(), &[0, 1, 2], 2).unwrap();
        assert_eq!(r.rows.len(), 3 * 2);
        for row in &r.rows {
            assert_eq!(row.per_id_forget.len(), row.count);
            assert_eq!(row.noncrossing.len(), row.count * (row.count - 1) / 2);
        }
        assert!(run_multi_identity(&world, &quick_cfg(), &[0], 1).is_err());
        assert!(run_multi_identity(&world, &quick_cfg(), &[0, 0], 1).is_err());
    }

    #[test]
    fn noise_attack_zero_level_is_standard_evaluation() {
        let world = build_world(&WorldConfig::default()).unwrap();
        let cfg = quick_cfg();
        let r = run_noise_attack(&world, &cfg, 2).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * NOISE_LEVELS.len());
        let seed = cfg.unlearn.seed;
        let plain = run_once(&world, &cfg, seed, "x").unwrap().report;
        let zero = r.rows.iter().find(|x| x.variant == "node" && x.level == 0.0 && x.seed == seed).unwrap();
        assert_eq!(MetricReport { run_id: "x".into(), ..zero.report.clone() }, plain);
    }

    #[test]
    fn gradcheck_passes_fd_parts() {
        let r = gradcheck(1, 12).unwrap();
        assert!(r.max_unrolled() < FD_TOLERANCE, "{}", r.max_unrolled());
        assert!(r.max_loss() < FD_TOLERANCE, "{}", r.max_loss());
        assert_eq!(r.adjoint.len(), ADJOINT_GRID.len());
        assert!(r.adjoint.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn capped_fields_respect_the_cap() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let p = capped_random_field(&mut rng, 8, 16).unwrap();
            assert!(lipschitz_upper_bound(&p) * SMOOTHNESS_HORIZON <= SMOOTHNESS_LT_CAP * (1.0 + 1e-9));
        }
    }
}
