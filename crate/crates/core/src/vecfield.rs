//! The adapter's neural vector field `f(h, t) = W2 · tanh(W1 · [h; t] + b1) + b2`
//! with closed-form vector-Jacobian products.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{gaussian_matrix, kaiming_uniform_init, matvec, matvec_t, sample_gaussian, Matrix, Rng, Vector};

const POWER_ITERATIONS: usize = 100;

/// Parameters of the vector field. `w1` is `hidden x (dim + 1)`; its last
/// column multiplies the time coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

/// Forward value of the field plus the activations needed by the VJPs.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub value: Vector,
    pub hidden_pre: Vector,
    pub hidden_post: Vector,
}

impl VectorFieldParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        VectorFieldParams {
            w1: Matrix::zeros(hidden, dim + 1),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(dim, hidden),
            b2: Vector::zeros(dim),
        }
    }

    /// Assembles parameters, checking that the four blocks agree.
    pub fn from_blocks(w1: Matrix, b1: Vector, w2: Matrix, b2: Vector) -> Result<Self> {
        let hidden = w1.rows();
        let dim = w2.rows();
        if w1.cols() != dim + 1 || b1.len() != hidden || w2.cols() != hidden || b2.len() != dim
        {
            return Err(Error::invalid(format!(
                "inconsistent field blocks: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        Ok(VectorFieldParams { w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden())
    }

    /// Flattened blocks in the order `w1, b1, w2, b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    /// Overwrites the blocks from a flat slice produced by [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "set_flat: length mismatch");
        let mut rest = flat;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &VectorFieldParams) {
        let o = other.to_flat();
        let mut flat = self.to_flat();
        assert_eq!(flat.len(), o.len(), "axpy: shape mismatch");
        for (a, b) in flat.iter_mut().zip(&o) {
            *a += s * b;
        }
        self.set_flat(&flat);
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    /// Columns of `w1` that act on the state (time column dropped).
    pub fn w1_state(&self) -> Matrix {
        self.w1.leading_cols(self.dim())
    }

    /// Text serialization: a dimension header followed by one line per block
    /// (`w1`, `b1`, `w2`, `b2`), values in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "vecfield v1").unwrap();
        writeln!(s, "dim {}", self.dim()).unwrap();
        writeln!(s, "hidden {}", self.hidden()).unwrap();
        for (name, block) in [
            ("w1", self.w1.data()),
            ("b1", self.b1.as_slice()),
            ("w2", self.w2.data()),
            ("b2", self.b2.as_slice()),
        ] {
            s.push_str(name);
            for x in block {
                write!(s, " {x:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bad = |m: &str| Error::Format(m.to_string());
        if lines.next() != Some("vecfield v1") {
            return Err(bad("missing `vecfield v1` header"));
        }
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(&format!("expected `{key}` line, found `{line}`")))?;
            rest.trim()
                .parse()
                .map_err(|_| bad(&format!("bad `{key}` value `{}`", rest.trim())))
        };
        let dim = header("dim")?;
        let hidden = header("hidden")?;
        if dim == 0 || hidden == 0 {
            return Err(bad("dim and hidden must be >= 1"));
        }
        let mut p = VectorFieldParams::zeros(dim, hidden);
        for (name, block) in ["w1", "b1", "w2", "b2"].into_iter().zip(p.blocks_mut()) {
            let line = lines
                .next()
                .ok_or_else(|| bad(&format!("missing block `{name}`")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(name) {
                return Err(bad(&format!("expected block `{name}`")));
            }
            let vals = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(&format!("block `{name}`: {e}")))?;
            if vals.len() != block.len() {
                return Err(bad(&format!(
                    "block `{name}` has {} values, expected {}",
                    vals.len(),
                    block.len()
                )));
            }
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(bad(&format!("block `{name}` has non-finite values")));
            }
            block.copy_from_slice(&vals);
        }
        if lines.next().is_some() {
            return Err(bad("trailing content after `b2`"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn augmented_input(h: &[f64], t: f64) -> Vector {
    let mut x = Vec::with_capacity(h.len() + 1);
    x.extend_from_slice(h);
    x.push(t);
    Vector::new(x)
}

/// Evaluates the field and caches the hidden activations.
///
/// # Panics
/// When `h.len() != p.dim()`.
pub fn field_eval(h: &[f64], t: f64, p: &VectorFieldParams) -> FieldEval {
    assert_eq!(h.len(), p.dim(), "field_eval: state has wrong dimension");
    let mut pre = matvec(&p.w1, &augmented_input(h, t));
    pre.axpy(1.0, &p.b1);
    let post: Vector = pre.iter().map(|x| x.tanh()).collect();
    let mut value = matvec(&p.w2, &post);
    value.axpy(1.0, &p.b2);
    FieldEval {
        value,
        hidden_pre: pre,
        hidden_post: post,
    }
}

/// Cotangent pulled back through the output layer and the tanh.
fn hidden_cotangent(eval: &FieldEval, p: &VectorFieldParams, a: &[f64]) -> Vector {
    assert_eq!(a.len(), p.dim(), "vjp: cotangent has wrong dimension");
    let mut s = matvec_t(&p.w2, a);
    for (si, y) in s.iter_mut().zip(eval.hidden_post.iter()) {
        *si *= 1.0 - y * y;
    }
    s
}

/// `aᵀ ∂f/∂h` at the cached evaluation.
pub fn vjp_state(eval: &FieldEval, h: &[f64], _t: f64, p: &VectorFieldParams, a: &[f64]) -> Vector {
    assert_eq!(h.len(), p.dim(), "vjp_state: state has wrong dimension");
    let s = hidden_cotangent(eval, p, a);
    let full = matvec_t(&p.w1, &s);
    Vector::from(&full[..p.dim()])
}

/// Gradient of `aᵀ f` with respect to every parameter block.
pub fn vjp_params(
    eval: &FieldEval,
    h: &[f64],
    t: f64,
    p: &VectorFieldParams,
    a: &[f64],
) -> VectorFieldParams {
    let mut g = p.zeros_like();
    accumulate_vjp_params(&mut g, 1.0, eval, h, t, p, a);
    g
}

/// `acc += scale * vjp_params(...)` without allocating a fresh gradient.
pub fn accumulate_vjp_params(
    acc: &mut VectorFieldParams,
    scale: f64,
    eval: &FieldEval,
    h: &[f64],
    t: f64,
    p: &VectorFieldParams,
    a: &[f64],
) {
    assert_eq!(h.len(), p.dim(), "vjp_params: state has wrong dimension");
    let s = hidden_cotangent(eval, p, a);
    acc.w2.add_outer(scale, a, &eval.hidden_post);
    acc.b2.axpy(scale, a);
    acc.w1.add_outer(scale, &s, &augmented_input(h, t));
    acc.b1.axpy(scale, &s);
}

/// LoRA-style start: Kaiming-uniform first layer, zero output layer, so the
/// field is identically zero and the adapter flow is the identity.
pub fn init_adapter_params(rng: &mut Rng, dim: usize, hidden: usize) -> Result<VectorFieldParams> {
    if dim == 0 || hidden == 0 {
        return Err(Error::invalid("adapter needs dim, hidden >= 1"));
    }
    let w1 = kaiming_uniform_init(rng, hidden, dim + 1)?;
    let bound = 1.0 / ((dim + 1) as f64).sqrt();
    let b1 = (0..hidden)
        .map(|_| -bound + 2.0 * bound * rng.next_f64())
        .collect();
    Ok(VectorFieldParams {
        w1,
        b1,
        w2: Matrix::zeros(dim, hidden),
        b2: Vector::zeros(dim),
    })
}

/// Global Lipschitz constant of `h -> f(h, t)`: `‖W2‖₂ · ‖W1_state‖₂`,
/// valid because `|tanh'| <= 1`.
pub fn lipschitz_upper_bound(p: &VectorFieldParams) -> f64 {
    p.w2.spectral_norm(POWER_ITERATIONS) * p.w1_state().spectral_norm(POWER_ITERATIONS)
}

/// A generic smooth field: Gaussian weights with fan-in-scaled std
/// (`scale/sqrt(fan_in)`) and std-0.3 biases. Used for gradient and theorem
/// checks on fields that are not identity-initialized.
pub fn random_params(rng: &mut Rng, dim: usize, hidden: usize, scale: f64) -> Result<VectorFieldParams> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("field scale must be >= 0, got {scale}")));
    }
    Ok(VectorFieldParams {
        w1: gaussian_matrix(rng, hidden, dim + 1, scale / ((dim + 1) as f64).sqrt())?,
        b1: sample_gaussian(rng, hidden, 0.0, 0.3)?,
        w2: gaussian_matrix(rng, dim, hidden, scale / (hidden as f64).sqrt())?,
        b2: sample_gaussian(rng, dim, 0.0, 0.3)?,
    })
}
