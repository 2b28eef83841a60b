//! Fixed-step explicit integration of the adapter field, with two gradient
//! routes: the continuous adjoint (augmented backward ODE) and exact
//! reverse-mode differentiation of the discrete solver.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::Vector;
use crate::vecfield::{accumulate_vjp_params, field_eval, vjp_state, FieldEval, VectorFieldParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Euler, Method::Midpoint, Method::Rk4];

    fn tableau(self) -> Tableau {
        match self {
            Method::Euler => Tableau {
                a: &[&[]],
                b: &[1.0],
                c: &[0.0],
            },
            Method::Midpoint => Tableau {
                a: &[&[], &[0.5]],
                b: &[0.0, 1.0],
                c: &[0.0, 0.5],
            },
            Method::Rk4 => Tableau {
                a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
                b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
                c: &[0.0, 0.5, 0.5, 1.0],
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::invalid(format!(
                "unknown solver `{other}` (expected euler, midpoint or rk4)"
            ))),
        }
    }
}

/// Butcher tableau of an explicit Runge–Kutta scheme.
struct Tableau {
    a: &'static [&'static [f64]],
    b: &'static [f64],
    c: &'static [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSpec {
    pub method: Method,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: Method::Euler,
            steps: 4,
            step_size: 0.4,
        }
    }
}

impl SolverSpec {
    pub fn new(method: Method, steps: usize, step_size: f64) -> Result<Self> {
        let s = SolverSpec {
            method,
            steps,
            step_size,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("solver steps must be >= 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!(
                "solver step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    /// Integration horizon `T = steps * step_size`.
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.step_size
    }

    /// Same horizon on a grid of (at least) `max_dt`-sized steps.
    pub fn refined(&self, method: Method, max_dt: f64) -> SolverSpec {
        let t = self.horizon();
        let steps = ((t / max_dt) - 1e-9).ceil().max(1.0) as usize;
        SolverSpec {
            method,
            steps,
            step_size: t / steps as f64,
        }
    }
}

/// Discretized solution path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub times: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &Vector {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Gradient of a scalar loss of the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradient {
    pub d_params: VectorFieldParams,
    pub d_initial: Vector,
}

/// One stage of one step, kept for the backward pass.
#[derive(Debug, Clone)]
struct StageRecord {
    input: Vector,
    time: f64,
    eval: FieldEval,
}

/// Forward solve with every stage evaluation retained.
#[derive(Debug, Clone)]
pub struct RecordedFlow {
    pub trajectory: Trajectory,
    spec: SolverSpec,
    stages: Vec<Vec<StageRecord>>,
}

impl RecordedFlow {
    pub fn spec(&self) -> &SolverSpec {
        &self.spec
    }
}

fn rk_step(
    tab: &Tableau,
    h: &[f64],
    t: f64,
    p: &VectorFieldParams,
    dt: f64,
    mut record: Option<&mut Vec<StageRecord>>,
) -> Vector {
    let mut ks: Vec<Vector> = Vec::with_capacity(tab.b.len());
    for (i, row) in tab.a.iter().enumerate() {
        let mut u = Vector::from(h);
        for (aij, kj) in row.iter().zip(&ks) {
            if *aij != 0.0 {
                u.axpy(dt * aij, kj);
            }
        }
        let ti = t + tab.c[i] * dt;
        let eval = field_eval(&u, ti, p);
        ks.push(eval.value.clone());
        if let Some(rec) = record.as_deref_mut() {
            rec.push(StageRecord {
                input: u,
                time: ti,
                eval,
            });
        }
    }
    let mut out = Vector::from(h);
    for (bi, ki) in tab.b.iter().zip(&ks) {
        if *bi != 0.0 {
            out.axpy(dt * bi, ki);
        }
    }
    out
}

fn checked(v: Vector, step: usize) -> Result<Vector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { step })
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size must be positive, got {dt}")))
    }
}

/// `h + dt · f(h, t)`
pub fn euler_step(h: &[f64], t: f64, p: &VectorFieldParams, dt: f64) -> Result<Vector> {
    check_dt(dt)?;
    checked(rk_step(&Method::Euler.tableau(), h, t, p, dt, None), 0)
}

/// Explicit midpoint: `h + dt · f(h + dt/2 · f(h, t), t + dt/2)`.
pub fn midpoint_step(h: &[f64], t: f64, p: &VectorFieldParams, dt: f64) -> Result<Vector> {
    check_dt(dt)?;
    checked(rk_step(&Method::Midpoint.tableau(), h, t, p, dt, None), 0)
}

/// Classical four-stage Runge–Kutta.
pub fn rk4_step(h: &[f64], t: f64, p: &VectorFieldParams, dt: f64) -> Result<Vector> {
    check_dt(dt)?;
    checked(rk_step(&Method::Rk4.tableau(), h, t, p, dt, None), 0)
}

fn check_initial(z0: &[f64], p: &VectorFieldParams) -> Result<()> {
    assert_eq!(z0.len(), p.dim(), "integrate: initial state has wrong dimension");
    if z0.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("initial state must be finite"))
    }
}

/// Integrates `spec.steps` steps from `t0`.
pub fn integrate(z0: &[f64], p: &VectorFieldParams, spec: &SolverSpec, t0: f64) -> Result<Trajectory> {
    spec.validate()?;
    check_initial(z0, p)?;
    let tab = spec.method.tableau();
    let dt = spec.step_size;
    let mut states = Vec::with_capacity(spec.steps + 1);
    let mut times = Vec::with_capacity(spec.steps + 1);
    states.push(Vector::from(z0));
    times.push(t0);
    for k in 0..spec.steps {
        let t = t0 + k as f64 * dt;
        let next = checked(rk_step(&tab, &states[k], t, p, dt, None), k + 1)?;
        states.push(next);
        times.push(t0 + (k + 1) as f64 * dt);
    }
    Ok(Trajectory { states, times })
}

/// Like [`integrate`] but keeps the stage evaluations for reverse mode.
pub fn integrate_recorded(
    z0: &[f64],
    p: &VectorFieldParams,
    spec: &SolverSpec,
    t0: f64,
) -> Result<RecordedFlow> {
    spec.validate()?;
    check_initial(z0, p)?;
    let tab = spec.method.tableau();
    let dt = spec.step_size;
    let mut states = Vec::with_capacity(spec.steps + 1);
    let mut times = Vec::with_capacity(spec.steps + 1);
    let mut stages = Vec::with_capacity(spec.steps);
    states.push(Vector::from(z0));
    times.push(t0);
    for k in 0..spec.steps {
        let t = t0 + k as f64 * dt;
        let mut rec = Vec::with_capacity(tab.b.len());
        let next = checked(rk_step(&tab, &states[k], t, p, dt, Some(&mut rec)), k + 1)?;
        states.push(next);
        times.push(t0 + (k + 1) as f64 * dt);
        stages.push(rec);
    }
    Ok(RecordedFlow {
        trajectory: Trajectory { states, times },
        spec: *spec,
        stages,
    })
}

/// Reverse-mode sweep over a recorded solve.
///
/// `node_cotangents`, when given, holds one extra cotangent per trajectory
/// node (`steps + 1` entries) that is added to the adjoint when the sweep
/// passes that node; this is how losses on intermediate states enter.
pub fn backprop_recorded(
    flow: &RecordedFlow,
    p: &VectorFieldParams,
    dl_dzt: &[f64],
    node_cotangents: Option<&[Vector]>,
) -> FlowGradient {
    assert_eq!(dl_dzt.len(), p.dim(), "backprop: cotangent has wrong dimension");
    let tab = flow.spec.method.tableau();
    let dt = flow.spec.step_size;
    let n = flow.stages.len();
    if let Some(nc) = node_cotangents {
        assert_eq!(nc.len(), n + 1, "backprop: need one node cotangent per state");
    }
    let mut d_params = p.zeros_like();
    let mut a = Vector::from(dl_dzt);
    if let Some(nc) = node_cotangents {
        a.axpy(1.0, &nc[n]);
    }
    for k in (0..n).rev() {
        let rec = &flow.stages[k];
        let s = rec.len();
        // cotangents of the stage values k_i
        let mut kbar: Vec<Vector> = tab.b.iter().map(|bi| a.scale(dt * bi)).collect();
        let mut hbar = a.clone();
        for i in (0..s).rev() {
            let st = &rec[i];
            if kbar[i].iter().all(|&x| x == 0.0) {
                continue;
            }
            let v = vjp_state(&st.eval, &st.input, st.time, p, &kbar[i]);
            accumulate_vjp_params(&mut d_params, 1.0, &st.eval, &st.input, st.time, p, &kbar[i]);
            hbar.axpy(1.0, &v);
            for (j, aij) in tab.a[i].iter().enumerate() {
                if *aij != 0.0 {
                    kbar[j].axpy(dt * aij, &v);
                }
            }
        }
        a = hbar;
        if let Some(nc) = node_cotangents {
            a.axpy(1.0, &nc[k]);
        }
    }
    FlowGradient {
        d_params,
        d_initial: a,
    }
}

/// Exact gradient of the discrete solver's computation (discretize, then
/// differentiate), starting from `t0 = 0`.
pub fn unrolled_gradient(
    z0: &[f64],
    p: &VectorFieldParams,
    spec: &SolverSpec,
    dl_dzt: &[f64],
) -> Result<FlowGradient> {
    let flow = integrate_recorded(z0, p, spec, 0.0)?;
    Ok(backprop_recorded(&flow, p, dl_dzt, None))
}

/// Continuous adjoint: integrates `(z, a, g)` backward from `T` to `0` on the
/// forward grid with the forward method, where `da/dt = -aᵀ ∂f/∂z` and
/// `dg/dt = -aᵀ ∂f/∂θ`. Returns `g(0) = ∂L/∂θ` and `a(0) = ∂L/∂z(0)`.
pub fn adjoint_gradient(
    z0: &[f64],
    p: &VectorFieldParams,
    spec: &SolverSpec,
    dl_dzt: &[f64],
) -> Result<FlowGradient> {
    let traj = integrate(z0, p, spec, 0.0)?;
    adjoint_from_final(traj.last(), p, spec, 0.0, dl_dzt)
}

/// Adjoint sweep given the forward endpoint `z(T)`.
pub fn adjoint_from_final(
    z_final: &[f64],
    p: &VectorFieldParams,
    spec: &SolverSpec,
    t0: f64,
    dl_dzt: &[f64],
) -> Result<FlowGradient> {
    assert_eq!(dl_dzt.len(), p.dim(), "adjoint: cotangent has wrong dimension");
    spec.validate()?;
    let tab = spec.method.tableau();
    let h = -spec.step_size;
    let mut z = Vector::from(z_final);
    let mut a = Vector::from(dl_dzt);
    let mut g = p.zeros_like();
    for k in (0..spec.steps).rev() {
        let t = t0 + (k + 1) as f64 * spec.step_size;
        let mut kz: Vec<Vector> = Vec::with_capacity(tab.b.len());
        let mut ka: Vec<Vector> = Vec::with_capacity(tab.b.len());
        for (i, row) in tab.a.iter().enumerate() {
            let mut uz = z.clone();
            let mut ua = a.clone();
            for (j, aij) in row.iter().enumerate() {
                if *aij != 0.0 {
                    uz.axpy(h * aij, &kz[j]);
                    ua.axpy(h * aij, &ka[j]);
                }
            }
            let ti = t + tab.c[i] * h;
            let eval = field_eval(&uz, ti, p);
            let da = vjp_state(&eval, &uz, ti, p, &ua).scale(-1.0);
            // dg/dt = -aᵀ∂f/∂θ, so g += h * b_i * (-vjp) = -h * b_i * vjp
            if tab.b[i] != 0.0 {
                accumulate_vjp_params(&mut g, -h * tab.b[i], &eval, &uz, ti, p, &ua);
            }
            kz.push(eval.value);
            ka.push(da);
        }
        for (i, bi) in tab.b.iter().enumerate() {
            if *bi != 0.0 {
                z.axpy(h * bi, &kz[i]);
                a.axpy(h * bi, &ka[i]);
            }
        }
        if !z.is_finite() || !a.is_finite() {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok(FlowGradient {
        d_params: g,
        d_initial: a,
    })
}
