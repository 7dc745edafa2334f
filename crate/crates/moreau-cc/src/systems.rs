//! Scalarized constraint systems.
//!
//! A conic constraint Φ(x, ξ) ∈ −K is represented through its supremum
//! function over a generator set C of the positive dual cone,
//!
//! ```text
//!     S(x, z) = sup { ⟨v*, Φ(x, z)⟩ + h(x) : v* ∈ C },
//! ```
//!
//! so that the chance constraint becomes P(S(x, ξ) ≤ h(x)) ≥ p. The smooth
//! convex compensator `h` makes every scalarization jointly convex. Three
//! concrete families are supported:
//!
//! - joint: C is the unit simplex, S = maxᵢ gᵢ + h;
//! - semidefinite: C are trace-one PSD matrices, S = λ_max(Φ) + h;
//! - probust: C are probability measures on a finite parameter grid,
//!   S = max over the grid of g(t, ·, ·) + h.

use std::sync::Arc;

use thiserror::Error;

use crate::eigen::{self, EigenError};
use crate::envelope::{self, ConvexFunction, EnvelopeError, EnvelopeResult};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Joint,
    Semidefinite,
    Probust,
}

#[derive(Debug, Error)]
pub enum SystemsError {
    #[error("dimension mismatch: expected x:{n} z:{m}, got x:{nx} z:{nz}")]
    DimensionMismatch { n: usize, m: usize, nx: usize, nz: usize },
    #[error("eigensolver failure: {0}")]
    EigenFailure(#[from] EigenError),
    #[error("invalid generator element: {0}")]
    InvalidGenerator(String),
    #[error("{0}")]
    Unsupported(&'static str),
    #[error("inner maximization did not converge: {0}")]
    NoConvergence(&'static str),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

type MatrixFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;
type MatrixPartialFn = Arc<dyn Fn(&[f64], &[f64], usize) -> Vec<Vec<f64>> + Send + Sync>;
type ParamFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
type ParamSubgradFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type ScalarizeFn = Arc<dyn Fn(&[f64]) -> ConvexFunction + Send + Sync>;

/// Joint family payload: the vertex scalarizations gᵢ + h (each jointly
/// convex on the (n+m)-dimensional space) and an optional builder for the
/// interior scalarizations Σ wᵢ(gᵢ + h).
pub struct JointComponents {
    pub vertices: Vec<ConvexFunction>,
    pub scalarize: Option<ScalarizeFn>,
}

/// Semidefinite family payload: Φ(x, z) as a dense symmetric p×p matrix and
/// its partial derivatives in each joint coordinate (x-block first).
pub struct SemidefComponents {
    pub p: usize,
    pub phi: MatrixFn,
    pub phi_partial: MatrixPartialFn,
    /// residual tolerance used when validating generator matrices
    pub eig_tol: f64,
}

/// Probust family payload: a finite grid discretizing the compact parameter
/// set, the constraint g(t, x, z), and a subgradient of g(t, ·, ·) + h.
pub struct ProbustComponents {
    pub t_grid: Vec<f64>,
    pub g: ParamFn,
    pub g_plus_h_subgrad: ParamSubgradFn,
    pub scalarize: Option<ScalarizeFn>,
}

pub enum Components {
    Joint(JointComponents),
    Semidef(SemidefComponents),
    Probust(ProbustComponents),
}

/// A constraint system: family payload, compensator, and the supremum
/// function S as a [`ConvexFunction`] on the joint (n+m)-space (carrying an
/// analytic prox whenever the family admits one).
pub struct ConstraintSystem {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    /// continuously differentiable convex compensator on the decision space;
    /// its subgradient oracle is the gradient
    pub h: ConvexFunction,
    pub components: Components,
    pub sup: ConvexFunction,
}

/// An element of the generator set C in the family's parameterization.
#[derive(Debug, Clone)]
pub enum Generator {
    /// simplex weights over the joint components
    SimplexWeights(Vec<f64>),
    /// unit vector v encoding the rank-one matrix v vᵀ
    UnitVector(Vec<f64>),
    /// explicit trace-one PSD matrix
    PsdMatrix(Vec<Vec<f64>>),
    /// probability weights over the probust grid
    GridWeights(Vec<f64>),
}

impl ConstraintSystem {
    pub fn joint(
        n: usize,
        m: usize,
        h: ConvexFunction,
        vertices: Vec<ConvexFunction>,
        sup: ConvexFunction,
        scalarize: Option<ScalarizeFn>,
    ) -> Self {
        assert!(!vertices.is_empty());
        assert!(vertices.iter().all(|v| v.dim() == n + m));
        assert_eq!(h.dim(), n);
        assert_eq!(sup.dim(), n + m);
        Self {
            family: Family::Joint,
            n,
            m,
            h,
            components: Components::Joint(JointComponents { vertices, scalarize }),
            sup,
        }
    }

    pub fn semidefinite(
        n: usize,
        m: usize,
        h: ConvexFunction,
        comps: SemidefComponents,
        sup: ConvexFunction,
    ) -> Self {
        Self {
            family: Family::Semidefinite,
            n,
            m,
            h,
            components: Components::Semidef(comps),
            sup,
        }
    }

    pub fn probust(
        n: usize,
        m: usize,
        h: ConvexFunction,
        comps: ProbustComponents,
        sup: ConvexFunction,
    ) -> Self {
        Self {
            family: Family::Probust,
            n,
            m,
            h,
            components: Components::Probust(comps),
            sup,
        }
    }

    fn check_dims(&self, x: &[f64], z: &[f64]) -> Result<(), SystemsError> {
        if x.len() != self.n || z.len() != self.m {
            return Err(SystemsError::DimensionMismatch {
                n: self.n,
                m: self.m,
                nx: x.len(),
                nz: z.len(),
            });
        }
        Ok(())
    }

    /// Number of generator-set components (joint/probust families).
    pub fn component_count(&self) -> usize {
        match &self.components {
            Components::Joint(j) => j.vertices.len(),
            Components::Probust(p) => p.t_grid.len(),
            Components::Semidef(_) => 0,
        }
    }
}

fn concat(x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut xz = Vec::with_capacity(x.len() + z.len());
    xz.extend_from_slice(x);
    xz.extend_from_slice(z);
    xz
}

/// S(x, z), the supremum of the scalarizations at (x, z).
pub fn sup_value(sys: &ConstraintSystem, x: &[f64], z: &[f64]) -> Result<f64, SystemsError> {
    sys.check_dims(x, z)?;
    let hx = sys.h.eval(x);
    match &sys.components {
        Components::Joint(j) => {
            let xz = concat(x, z);
            Ok(j.vertices
                .iter()
                .map(|v| v.eval(&xz))
                .fold(f64::NEG_INFINITY, f64::max))
        }
        Components::Semidef(s) => {
            let phi = (s.phi)(x, z);
            let (lam_max, _) = eigen::max_eigenpair(&phi)?;
            Ok(lam_max + hx)
        }
        Components::Probust(p) => Ok(p
            .t_grid
            .iter()
            .map(|&t| (p.g)(t, x, z) + hx)
            .fold(f64::NEG_INFINITY, f64::max)),
    }
}

/// An element of ∂S(x, z) on the joint space: the active component's
/// subgradient (ties broken by lowest index), or the leading-eigenvector
/// pullback plus ∇h for the semidefinite family.
pub fn sup_subgradient(
    sys: &ConstraintSystem,
    x: &[f64],
    z: &[f64],
) -> Result<Vec<f64>, SystemsError> {
    sys.check_dims(x, z)?;
    match &sys.components {
        Components::Joint(j) => {
            let xz = concat(x, z);
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (i, v) in j.vertices.iter().enumerate() {
                let val = v.eval(&xz);
                if val > best_val {
                    best_val = val;
                    best = i;
                }
            }
            Ok(j.vertices[best].subgradient(&xz))
        }
        Components::Semidef(s) => {
            let phi = (s.phi)(x, z);
            let (_, v) = eigen::max_eigenpair(&phi)?;
            let mut g = Vec::with_capacity(sys.n + sys.m);
            for k in 0..sys.n + sys.m {
                let dphi = (s.phi_partial)(x, z, k);
                let mut acc = 0.0;
                for i in 0..s.p {
                    acc += v[i] * dot(&dphi[i], &v);
                }
                g.push(acc);
            }
            let grad_h = sys.h.subgradient(x);
            for i in 0..sys.n {
                g[i] += grad_h[i];
            }
            Ok(g)
        }
        Components::Probust(p) => {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (i, &t) in p.t_grid.iter().enumerate() {
                let val = (p.g)(t, x, z);
                if val > best_val {
                    best_val = val;
                    best = i;
                }
            }
            Ok((p.g_plus_h_subgrad)(p.t_grid[best], x, z))
        }
    }
}

/// Moreau envelope of S in the joint (x, z) variables.
pub fn envelope_of_sup(
    sys: &ConstraintSystem,
    lambda: f64,
    x: &[f64],
    z: &[f64],
) -> Result<EnvelopeResult, SystemsError> {
    sys.check_dims(x, z)?;
    Ok(envelope::moreau_eval(&sys.sup, lambda, &concat(x, z))?)
}

/// ⟨v*, Φ(x, z)⟩ + h(x) for a generator element in the family's
/// parameterization.
pub fn scalarized_value(
    sys: &ConstraintSystem,
    v_star: &Generator,
    x: &[f64],
    z: &[f64],
) -> Result<f64, SystemsError> {
    sys.check_dims(x, z)?;
    let hx = sys.h.eval(x);
    match (&sys.components, v_star) {
        (Components::Joint(j), Generator::SimplexWeights(w)) => {
            validate_weights(w, j.vertices.len())?;
            let xz = concat(x, z);
            // Σ wᵢ (gᵢ + h) = Σ wᵢ gᵢ + h since the weights sum to one
            Ok(w.iter()
                .zip(&j.vertices)
                .map(|(wi, v)| wi * v.eval(&xz))
                .sum())
        }
        (Components::Semidef(s), Generator::UnitVector(v)) => {
            let nv = dot(v, v).sqrt();
            if v.len() != s.p || (nv - 1.0).abs() > 1e-8 {
                return Err(SystemsError::InvalidGenerator(format!(
                    "unit vector of length {} with norm {nv}",
                    v.len()
                )));
            }
            let phi = (s.phi)(x, z);
            let mut acc = 0.0;
            for i in 0..s.p {
                acc += v[i] * dot(&phi[i], v);
            }
            Ok(acc + hx)
        }
        (Components::Semidef(s), Generator::PsdMatrix(a)) => {
            validate_psd_trace_one(a, s.p, s.eig_tol)?;
            let phi = (s.phi)(x, z);
            let mut acc = 0.0;
            for i in 0..s.p {
                acc += dot(&a[i], &phi[i]);
            }
            Ok(acc + hx)
        }
        (Components::Probust(p), Generator::GridWeights(w)) => {
            validate_weights(w, p.t_grid.len())?;
            Ok(w.iter()
                .zip(&p.t_grid)
                .map(|(wi, &t)| wi * (p.g)(t, x, z))
                .sum::<f64>()
                + hx)
        }
        _ => Err(SystemsError::InvalidGenerator(
            "generator parameterization does not match the system family".into(),
        )),
    }
}

/// The scalarization Σ wᵢ Φ^h_{vᵢ*} as a [`ConvexFunction`] on the joint
/// space, with an analytic prox when the system ships one.
pub fn scalarization(
    sys: &ConstraintSystem,
    v_star: &Generator,
) -> Result<ConvexFunction, SystemsError> {
    match (&sys.components, v_star) {
        (Components::Joint(j), Generator::SimplexWeights(w)) => {
            validate_weights(w, j.vertices.len())?;
            if let Some(builder) = &j.scalarize {
                return Ok(builder(w));
            }
            Ok(black_box_mixture(j.vertices.clone(), w.clone()))
        }
        (Components::Probust(p), Generator::GridWeights(w)) => {
            validate_weights(w, p.t_grid.len())?;
            if let Some(builder) = &p.scalarize {
                return Ok(builder(w));
            }
            Err(SystemsError::Unsupported(
                "probust scalarization requires a shipped builder",
            ))
        }
        _ => Err(SystemsError::Unsupported(
            "scalarization is available for the joint and probust families",
        )),
    }
}

fn black_box_mixture(vertices: Vec<ConvexFunction>, w: Vec<f64>) -> ConvexFunction {
    let dim = vertices[0].dim();
    let verts = Arc::new(vertices);
    let v1 = Arc::clone(&verts);
    let w1 = w.clone();
    let v2 = Arc::clone(&verts);
    ConvexFunction::new(
        dim,
        move |xz| v1.iter().zip(&w1).map(|(v, wi)| wi * v.eval(xz)).sum(),
        move |xz| {
            let mut g = vec![0.0; xz.len()];
            for (v, wi) in v2.iter().zip(&w) {
                if *wi == 0.0 {
                    continue;
                }
                let gv = v.subgradient(xz);
                for (gi, gvi) in g.iter_mut().zip(&gv) {
                    *gi += wi * gvi;
                }
            }
            g
        },
    )
}

fn validate_weights(w: &[f64], expected: usize) -> Result<(), SystemsError> {
    if w.len() != expected {
        return Err(SystemsError::InvalidGenerator(format!(
            "expected {expected} weights, got {}",
            w.len()
        )));
    }
    if w.iter().any(|&wi| wi < -1e-12) {
        return Err(SystemsError::InvalidGenerator("negative weight".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SystemsError::InvalidGenerator(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

fn validate_psd_trace_one(a: &[Vec<f64>], p: usize, tol: f64) -> Result<(), SystemsError> {
    if a.len() != p || a.iter().any(|r| r.len() != p) {
        return Err(SystemsError::InvalidGenerator(format!(
            "expected a {p}x{p} matrix"
        )));
    }
    let trace: f64 = (0..p).map(|i| a[i][i]).sum();
    if (trace - 1.0).abs() > 1e-8 {
        return Err(SystemsError::InvalidGenerator(format!(
            "trace {trace}, expected 1"
        )));
    }
    let (values, _) = eigen::sym_eigen(a)?;
    if values[0] < -tol.max(1e-10) {
        return Err(SystemsError::InvalidGenerator(format!(
            "matrix has negative eigenvalue {}",
            values[0]
        )));
    }
    Ok(())
}

/// max over v* in C of M_λ(Φ^h_{v*})(x, z), the dual route to
/// [`envelope_of_sup`] (they agree by the max-of-envelopes identity).
///
/// Concave maximization over the simplex, solved by projected supergradient
/// ascent with backtracking. A cross-check tool for systems with at most 8
/// components, not a hot path.
pub fn sup_of_envelopes(
    sys: &ConstraintSystem,
    lambda: f64,
    x: &[f64],
    z: &[f64],
    budget: usize,
) -> Result<f64, SystemsError> {
    sys.check_dims(x, z)?;
    let k = sys.component_count();
    if k == 0 {
        return Err(SystemsError::Unsupported(
            "sup_of_envelopes supports the joint and probust families",
        ));
    }
    if k > 8 {
        return Err(SystemsError::Unsupported(
            "sup_of_envelopes supports at most 8 components",
        ));
    }
    let xz = concat(x, z);
    let make_gen = |w: &[f64]| -> Generator {
        match sys.family {
            Family::Joint => Generator::SimplexWeights(w.to_vec()),
            _ => Generator::GridWeights(w.to_vec()),
        }
    };
    // value and supergradient at weights w; by the envelope theorem the
    // supergradient entries are the vertex values at the proximal point
    let eval_at = |w: &[f64]| -> Result<(f64, Vec<f64>), SystemsError> {
        let f = scalarization(sys, &make_gen(w))?;
        let res = envelope::moreau_eval(&f, lambda, &xz)?;
        let u = &res.prox_point;
        let d: Vec<f64> = match &sys.components {
            Components::Joint(j) => j.vertices.iter().map(|v| v.eval(u)).collect(),
            Components::Probust(p) => {
                let hu = sys.h.eval(&u[..sys.n]);
                p.t_grid
                    .iter()
                    .map(|&t| (p.g)(t, &u[..sys.n], &u[sys.n..]) + hu)
                    .collect()
            }
            Components::Semidef(_) => unreachable!(),
        };
        Ok((res.value, d))
    };

    if k == 1 {
        return Ok(eval_at(&[1.0])?.0);
    }
    let mut w = vec![1.0 / k as f64; k];
    let (mut val, mut grad) = eval_at(&w)?;
    let mut best = val;
    let mut step = 1.0;
    for _ in 0..budget {
        let mut improved = false;
        for _ in 0..30 {
            let mut cand: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi + step * gi).collect();
            project_simplex(&mut cand);
            let (cv, cg) = eval_at(&cand)?;
            if cv > val + 1e-16 {
                w = cand;
                val = cv;
                grad = cg;
                best = best.max(val);
                improved = true;
                step *= 1.6;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
        if !improved {
            // also probe the vertices; the maximum frequently sits there
            for i in 0..k {
                let mut e = vec![0.0; k];
                e[i] = 1.0;
                best = best.max(eval_at(&e)?.0);
            }
            return Ok(best);
        }
    }
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        best = best.max(eval_at(&e)?.0);
    }
    Ok(best)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(w: &mut [f64]) {
    let k = w.len();
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (i as f64 + 1.0);
        if i + 1 == k || sorted[i + 1] <= t {
            theta = t;
            if i + 1 < k {
                break;
            }
        }
    }
    for v in w.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for v in w.iter_mut() {
            *v /= total;
        }
    } else {
        let u = 1.0 / k as f64;
        for v in w.iter_mut() {
            *v = u;
        }
    }
}

/// Midpoint-convexity defect f((a+b)/2) − (f(a)+f(b))/2 of a scalar function
/// along a segment; nonpositive (up to tolerance) for convex f. The probe
/// used to screen assumption (scalar01) heuristically.
pub fn midpoint_convexity_gap(f: impl Fn(&[f64]) -> f64, a: &[f64], b: &[f64]) -> f64 {
    let mid: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| 0.5 * (ai + bi)).collect();
    f(&mid) - 0.5 * (f(a) + f(b))
}
