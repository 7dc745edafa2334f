//! Spherical-radial decomposition of zero-mean Gaussian measures.
//!
//! Writing ξ = R·L·ζ with R chi-distributed (m degrees of freedom) and ζ
//! uniform on the unit sphere turns the probability P(M_λS(x, ξ) ≤ h(x))
//! into a sphere integral of per-direction radial CDF values: along each
//! direction v the feasible radii form an interval [0, ρ_λ(x, v)], the root
//! of the strictly increasing envelope along the ray, and the direction
//! contributes chi_cdf(m, ρ_λ). Directions whose ray never crosses the
//! threshold contribute 1.
//!
//! The module owns direction sampling (pseudo-random from a counter-based
//! generator, or a base-2 digital sequence pushed through the inverse
//! Gaussian map), the chi radial law, the radial root solver, and the
//! probability estimator for φ (λ = 0) and φ_λ (λ > 0).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::envelope;
use crate::linalg::dot;
use crate::systems::{sup_value, ConstraintSystem, SystemsError};

#[derive(Debug, Error)]
pub enum SphericalError {
    #[error("Slater condition fails at x: regularized supremum {value} >= threshold {threshold}")]
    SlaterViolation { value: f64, threshold: f64 },
    #[error("bracketing produced a sign pattern violating convexity near r = {0}; prox tolerance is likely too loose")]
    NonMonotoneBracket(f64),
    #[error("Cholesky factor must be lower triangular with positive diagonal")]
    BadCholesky,
    #[error("covariance matrix is not symmetric positive definite")]
    BadCovariance,
    #[error("low-discrepancy directions support dimension <= {max} (requested {requested})")]
    UnsupportedDimension { requested: usize, max: usize },
    #[error("direction vector must have unit norm (got {0})")]
    NotUnit(f64),
    #[error(transparent)]
    Systems(#[from] SystemsError),
}

impl From<envelope::EnvelopeError> for SphericalError {
    fn from(e: envelope::EnvelopeError) -> Self {
        SphericalError::Systems(SystemsError::Envelope(e))
    }
}

// ---------------------------------------------------------------------------
// Gaussian model
// ---------------------------------------------------------------------------

/// Zero-mean Gaussian law of ξ, stored through its lower-triangular Cholesky
/// factor L (covariance L Lᵀ).
#[derive(Debug, Clone)]
pub struct GaussianModel {
    m: usize,
    chol: Vec<Vec<f64>>,
}

impl GaussianModel {
    pub fn standard(m: usize) -> Self {
        let mut chol = vec![vec![0.0; m]; m];
        for (i, row) in chol.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { m, chol }
    }

    pub fn from_cholesky(chol: Vec<Vec<f64>>) -> Result<Self, SphericalError> {
        let m = chol.len();
        if m == 0 || chol.iter().any(|r| r.len() != m) {
            return Err(SphericalError::BadCholesky);
        }
        for i in 0..m {
            if !(chol[i][i] > 0.0) {
                return Err(SphericalError::BadCholesky);
            }
            for j in i + 1..m {
                if chol[i][j] != 0.0 {
                    return Err(SphericalError::BadCholesky);
                }
            }
        }
        Ok(Self { m, chol })
    }

    pub fn from_covariance(cov: &[Vec<f64>]) -> Result<Self, SphericalError> {
        let chol = crate::linalg::cholesky(cov).ok_or(SphericalError::BadCovariance)?;
        Ok(Self { m: cov.len(), chol })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn cholesky(&self) -> &[Vec<f64>] {
        &self.chol
    }

    /// L v.
    pub fn l_mul(&self, v: &[f64]) -> Vec<f64> {
        crate::linalg::lower_tri_mul(&self.chol, v)
    }
}

// ---------------------------------------------------------------------------
// chi radial law and special functions
// ---------------------------------------------------------------------------

/// Regularized lower incomplete gamma P(a, x), by series for x < a + 1 and
/// by the Lentz continued fraction for the complement otherwise.
pub fn gammainc_lower_reg(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf_upper(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 − P(a, x), accurate in the
/// right tail.
pub fn gammainc_upper_reg(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf_upper(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..500 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cf_upper(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// ln Γ(x) by the 9-term Lanczos approximation (g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// CDF of the chi distribution with m degrees of freedom: P(m/2, r²/2).
pub fn chi_cdf(m: usize, r: f64) -> f64 {
    debug_assert!(m >= 1);
    if r <= 0.0 {
        return 0.0;
    }
    gammainc_lower_reg(m as f64 / 2.0, r * r / 2.0)
}

/// Survival function of the chi distribution, accurate in the tail.
pub fn chi_sf(m: usize, r: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    gammainc_upper_reg(m as f64 / 2.0, r * r / 2.0)
}

/// Density of the chi distribution with m degrees of freedom. Equals the
/// density-like radial factor θ(r, ·) of the decomposition (independent of
/// the direction for Gaussian ξ).
pub fn chi_pdf(m: usize, r: f64) -> f64 {
    debug_assert!(m >= 1);
    if r < 0.0 {
        return 0.0;
    }
    if r == 0.0 {
        return if m == 1 {
            (2.0 / std::f64::consts::PI).sqrt()
        } else {
            0.0
        };
    }
    let a = m as f64 / 2.0;
    ((m as f64 - 1.0) * r.ln() - r * r / 2.0 - (a - 1.0) * std::f64::consts::LN_2.to_owned()
        - ln_gamma(a))
    .exp()
}

/// Standard normal quantile via Newton iteration on the chi(1) CDF identity
/// Φ(r) = (1 + sign(r)·P(1/2, r²/2)) / 2, with tail-stable complements.
pub fn inv_normal_cdf(u: f64) -> f64 {
    assert!(u > 0.0 && u < 1.0);
    if u == 0.5 {
        return 0.0;
    }
    // work in the lower tail
    let (p, sign) = if u < 0.5 { (u, -1.0) } else { (1.0 - u, 1.0) };
    // Crude initial guess via the logit-scale asymptotic, then Newton on
    // Q(r)/2 = p where Q is the chi(1) survival function.
    let t = (-2.0 * p.ln()).sqrt();
    let mut r = t - (t.ln() + (2.0 * std::f64::consts::PI).ln()) / (2.0 * t).max(1.0);
    if !r.is_finite() || r < 0.0 {
        r = 0.5;
    }
    for _ in 0..60 {
        let q = 0.5 * chi_sf(1, r);
        let pdf = (-(r * r) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf == 0.0 {
            break;
        }
        let step = (q - p) / pdf;
        r += step;
        if r < 0.0 {
            r = 0.0;
        }
        if step.abs() <= 1e-15 * (1.0 + r.abs()) {
            break;
        }
    }
    sign * r
}

// ---------------------------------------------------------------------------
// direction sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    PseudoRandom,
    LowDiscrepancy,
}

/// A fixed sample of unit directions on S^{m−1}, the SAA backbone: every
/// probability and gradient estimate taken against the same set is a
/// deterministic smooth function of x.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    directions: Vec<Vec<f64>>,
    pub seed: u64,
    pub mode: DirectionMode,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }
}

/// Largest noise dimension supported by the low-discrepancy mode.
pub const MAX_SOBOL_DIM: usize = 16;

/// Deterministic direction sample.
///
/// - `PseudoRandom`: normalized standard-Gaussian draws from a ChaCha stream
///   keyed by `seed` (uniforms mapped through the inverse normal CDF).
/// - `LowDiscrepancy`: base-2 digital (Sobol) sequence points with indices
///   `seed+1, seed+2, …`, mapped through the inverse-Gaussian-then-normalize
///   transform. Points mapping to the zero vector (the all-halves point) are
///   skipped.
///
/// For m = 1 the sphere is the two-point set {+1, −1}, returned exactly so
/// one-dimensional estimates are quadrature-exact.
pub fn sample_directions(
    m: usize,
    n: usize,
    seed: u64,
    mode: DirectionMode,
) -> Result<DirectionSet, SphericalError> {
    assert!(m >= 1 && n >= 1);
    if m == 1 {
        return Ok(DirectionSet {
            directions: vec![vec![1.0], vec![-1.0]],
            seed,
            mode,
        });
    }
    let directions = match mode {
        DirectionMode::PseudoRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dirs = Vec::with_capacity(n);
            while dirs.len() < n {
                let g: Vec<f64> = (0..m).map(|_| inv_normal_cdf(unit_open(&mut rng))).collect();
                let nrm = dot(&g, &g).sqrt();
                if nrm > 1e-8 {
                    dirs.push(g.iter().map(|v| v / nrm).collect());
                }
            }
            dirs
        }
        DirectionMode::LowDiscrepancy => {
            if m > MAX_SOBOL_DIM {
                return Err(SphericalError::UnsupportedDimension {
                    requested: m,
                    max: MAX_SOBOL_DIM,
                });
            }
            let sobol = SobolSequence::new(m);
            let mut dirs = Vec::with_capacity(n);
            let mut index = seed.wrapping_add(1);
            while dirs.len() < n {
                let point = sobol.point(index);
                index = index.wrapping_add(1);
                let g: Vec<f64> = point.iter().map(|&u| inv_normal_cdf(u)).collect();
                let nrm = dot(&g, &g).sqrt();
                if nrm > 1e-8 {
                    dirs.push(g.iter().map(|v| v / nrm).collect());
                }
            }
            dirs
        }
    };
    Ok(DirectionSet {
        directions,
        seed,
        mode,
    })
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Base-2 digital sequence (Sobol) with the classic primitive-polynomial and
/// initial direction-number table for dimensions up to [`MAX_SOBOL_DIM`].
pub(crate) struct SobolSequence {
    // direction numbers per dimension, 32 bits each
    v: Vec<[u32; 32]>,
}

impl SobolSequence {
    // (degree, polynomial coefficient a, initial m values); dimension 1 is
    // the van der Corput sequence handled separately
    const TABLE: [(u32, u32, [u32; 6]); 15] = [
        (1, 0, [1, 0, 0, 0, 0, 0]),
        (2, 1, [1, 3, 0, 0, 0, 0]),
        (3, 1, [1, 3, 1, 0, 0, 0]),
        (3, 2, [1, 1, 1, 0, 0, 0]),
        (4, 1, [1, 1, 3, 3, 0, 0]),
        (4, 4, [1, 3, 5, 13, 0, 0]),
        (5, 2, [1, 1, 5, 5, 17, 0]),
        (5, 4, [1, 1, 5, 5, 5, 0]),
        (5, 7, [1, 1, 7, 11, 19, 0]),
        (5, 11, [1, 1, 5, 1, 1, 0]),
        (5, 13, [1, 1, 1, 3, 11, 0]),
        (5, 14, [1, 3, 5, 5, 31, 0]),
        (6, 1, [1, 3, 3, 9, 7, 49]),
        (6, 13, [1, 1, 1, 15, 21, 21]),
        (6, 16, [1, 3, 1, 13, 27, 49]),
    ];

    fn new(dim: usize) -> Self {
        assert!(dim >= 1 && dim <= MAX_SOBOL_DIM);
        let mut v = Vec::with_capacity(dim);
        // first dimension: van der Corput in base 2
        let mut first = [0u32; 32];
        for (k, slot) in first.iter_mut().enumerate() {
            *slot = 1u32 << (31 - k);
        }
        v.push(first);
        for d in 1..dim {
            let (s, a, m_init) = Self::TABLE[d - 1];
            let s = s as usize;
            let mut m = [0u64; 32];
            for k in 0..s {
                let mk = m_init[k] as u64;
                assert!(mk % 2 == 1 && mk < (1 << (k + 1)), "bad direction number");
                m[k] = mk;
            }
            for k in s..32 {
                // recurrence: m_k = 2 a_1 m_{k-1} xor 4 a_2 m_{k-2} xor ...
                //             xor 2^s m_{k-s} xor m_{k-s}
                let mut mk = m[k - s] ^ (m[k - s] << s);
                for j in 1..s {
                    let bit = (a >> (s - 1 - j)) & 1;
                    if bit == 1 {
                        mk ^= m[k - j] << j;
                    }
                }
                m[k] = mk;
            }
            let mut dir = [0u32; 32];
            for k in 0..32 {
                dir[k] = (m[k] << (31 - k)) as u32;
            }
            v.push(dir);
        }
        Self { v }
    }

    /// The i-th point of the sequence in (0, 1)^dim (Gray-code-free direct
    /// construction so arbitrary indices can be addressed).
    fn point(&self, index: u64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.v.len());
        for dir in &self.v {
            let mut acc = 0u32;
            let mut i = index;
            let mut k = 0usize;
            while i > 0 && k < 32 {
                if i & 1 == 1 {
                    acc ^= dir[k];
                }
                i >>= 1;
                k += 1;
            }
            out.push((acc as f64 + 0.5) / 4_294_967_296.0);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// radial root solve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialKind {
    Finite,
    Infinite,
}

/// Outcome of one radial solve: the root ρ with its residual for finite
/// directions, or the certificate that the ray stays feasible to `r_max`.
#[derive(Debug, Clone)]
pub struct RadialResult {
    pub kind: RadialKind,
    pub rho: Option<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct RadialOptions {
    /// probe horizon beyond which a direction counts as infinite; the chi
    /// mass above the default rounds to zero in double precision
    pub r_max: f64,
    pub xtol: f64,
    pub ftol: f64,
}

impl Default for RadialOptions {
    fn default() -> Self {
        Self {
            r_max: 1e4,
            xtol: 1e-10,
            ftol: 1e-8,
        }
    }
}

/// Regularized supremum value at the Gaussian mean, used for the Slater
/// check: M_λS(x, 0) for λ > 0, S(x, 0) at λ = 0.
pub fn slater_margin(
    sys: &ConstraintSystem,
    lambda: f64,
    x: &[f64],
) -> Result<(f64, f64), SphericalError> {
    let zeros = vec![0.0; sys.m];
    let threshold = sys.h.eval(x);
    let value = if lambda == 0.0 {
        sup_value(sys, x, &zeros)?
    } else {
        crate::systems::envelope_of_sup(sys, lambda, x, &zeros)?.value
    };
    Ok((value, threshold))
}

fn set_ray(xz: &mut [f64], n: usize, lv: &[f64], r: f64) {
    for (slot, lvi) in xz[n..].iter_mut().zip(lv) {
        *slot = r * lvi;
    }
}

fn check_slater(
    sys: &ConstraintSystem,
    lambda: f64,
    x: &[f64],
) -> Result<f64, SphericalError> {
    let (value, threshold) = slater_margin(sys, lambda, x)?;
    if !(value < threshold) {
        return Err(SphericalError::SlaterViolation { value, threshold });
    }
    Ok(threshold)
}

/// ρ_λ(x, v): the unique root of r ↦ M_λS(x, rLv) − h(x) on (0, r_max], or
/// the certificate that no crossing occurs (infinite direction).
///
/// Precondition: the Slater condition at x (checked; see
/// [`SphericalError::SlaterViolation`]) and ‖v‖ = 1.
pub fn radial_solve(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    v: &[f64],
    opts: &RadialOptions,
) -> Result<RadialResult, SphericalError> {
    let nv = dot(v, v).sqrt();
    if (nv - 1.0).abs() > 1e-9 {
        return Err(SphericalError::NotUnit(nv));
    }
    let threshold = check_slater(sys, lambda, x)?;
    radial_solve_at(sys, model, lambda, x, v, threshold, opts)
}

/// Radial solve with the Slater threshold already established by the caller
/// (per-direction loops hoist the check).
fn radial_solve_at(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    v: &[f64],
    threshold: f64,
    opts: &RadialOptions,
) -> Result<RadialResult, SphericalError> {
    let lv = model.l_mul(v);
    let mut xz = x.to_vec();
    xz.extend(std::iter::repeat(0.0).take(sys.m));
    let n = sys.n;
    let mut eval_ray = |r: f64| -> Result<f64, SphericalError> {
        set_ray(&mut xz, n, &lv, r);
        let val = if lambda == 0.0 {
            sys.sup.eval(&xz)
        } else {
            envelope::moreau_eval(&sys.sup, lambda, &xz)?.value
        };
        Ok(val - threshold)
    };

    // exponential bracketing: the ray function is convex with negative value
    // at 0, so once positive it stays positive
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut f_hi = eval_ray(hi)?;
    while f_hi <= 0.0 {
        lo = hi;
        if hi >= opts.r_max {
            return Ok(RadialResult {
                kind: RadialKind::Infinite,
                rho: None,
                residual: f_hi,
            });
        }
        hi = (hi * 2.0).min(opts.r_max);
        f_hi = eval_ray(hi)?;
    }

    let ftol = opts.ftol * (1.0 + threshold.abs());
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        if (hi - lo) <= opts.xtol * (1.0 + hi) {
            break;
        }
        mid = 0.5 * (lo + hi);
        let f_mid = eval_ray(mid)?;
        if f_mid > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut rho = 0.5 * (lo + hi);
    let mut residual = eval_ray(rho)?;
    if residual > 0.0 && rho > hi || residual < 0.0 && rho < lo {
        return Err(SphericalError::NonMonotoneBracket(rho));
    }
    // Newton polish along the ray: the slope comes from the envelope's
    // z-gradient (λ > 0) or a subgradient of S (λ = 0, valid a.e.); steps
    // leaving the bracket are discarded
    for _ in 0..3 {
        if residual.abs() <= 1e-3 * ftol {
            break;
        }
        let mut probe = x.to_vec();
        probe.extend(std::iter::repeat(0.0).take(sys.m));
        set_ray(&mut probe, n, &lv, rho);
        let grad = if lambda == 0.0 {
            sys.sup.subgradient(&probe)
        } else {
            envelope::moreau_eval(&sys.sup, lambda, &probe)?.gradient
        };
        let slope = dot(&grad[sys.n..], &lv);
        if slope <= 0.0 {
            break;
        }
        let next = rho - residual / slope;
        if !next.is_finite() || next < lo || next > hi {
            break;
        }
        rho = next;
        residual = eval_ray(rho)?;
    }
    if residual.abs() > ftol {
        return Err(SphericalError::NonMonotoneBracket(rho));
    }
    Ok(RadialResult {
        kind: RadialKind::Finite,
        rho: Some(rho),
        residual,
    })
}

/// Per-component radial roots of the vertex scalarizations, minimized — the
/// dual route to [`radial_solve`] for the joint family. The two routes agree
/// whenever the active scalarization at the crossing is a vertex of the
/// simplex (everywhere except inside a kink-smoothing band of width O(λ)).
pub fn radial_min_formula(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64, SphericalError> {
    let verts = match &sys.components {
        crate::systems::Components::Joint(j) => &j.vertices,
        _ => {
            return Err(SphericalError::Systems(SystemsError::Unsupported(
                "radial_min_formula supports the joint family",
            )))
        }
    };
    let threshold = check_slater(sys, lambda, x)?;
    let lv = model.l_mul(v);
    let opts = RadialOptions::default();
    let mut best = f64::INFINITY;
    let n = sys.n;
    for vertex in verts {
        let mut xz = x.to_vec();
        xz.extend(std::iter::repeat(0.0).take(sys.m));
        let mut eval_ray = |r: f64| -> Result<f64, SphericalError> {
            set_ray(&mut xz, n, &lv, r);
            let val = if lambda == 0.0 {
                vertex.eval(&xz)
            } else {
                envelope::moreau_eval(vertex, lambda, &xz)?.value
            };
            Ok(val - threshold)
        };
        if eval_ray(0.0)? >= 0.0 {
            // this scalarization is already active at the mean; its radial
            // root is zero and dominates the minimum
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut f_hi = eval_ray(hi)?;
        let mut finite = true;
        while f_hi <= 0.0 {
            lo = hi;
            if hi >= opts.r_max {
                finite = false;
                break;
            }
            hi = (hi * 2.0).min(opts.r_max);
            f_hi = eval_ray(hi)?;
        }
        if !finite {
            continue;
        }
        for _ in 0..200 {
            if (hi - lo) <= opts.xtol * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if eval_ray(mid)? > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        best = best.min(0.5 * (lo + hi));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// probability estimator
// ---------------------------------------------------------------------------

/// A spherical-radial probability estimate.
#[derive(Debug, Clone)]
pub struct ProbEstimate {
    pub value: f64,
    /// sample standard error (pseudo-random mode; zero for the exact m = 1
    /// quadrature, absent for low-discrepancy sets)
    pub std_error: Option<f64>,
    pub n_finite: usize,
    pub n_infinite: usize,
}

/// φ_λ(x) (or φ(x) at λ = 0) as the direction-set average of per-direction
/// chi CDF values. Infinite directions contribute 1. The per-direction loop
/// runs data-parallel with an ordered reduction, so the result is bit-stable
/// for a fixed [`DirectionSet`] regardless of worker count.
pub fn prob_estimate(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    dirs: &DirectionSet,
) -> Result<ProbEstimate, SphericalError> {
    let threshold = check_slater(sys, lambda, x)?;
    let opts = RadialOptions::default();
    let m = model.m();
    let per_dir: Result<Vec<(f64, bool)>, SphericalError> = dirs
        .directions()
        .par_iter()
        .map(|v| {
            let r = radial_solve_at(sys, model, lambda, x, v, threshold, &opts)?;
            Ok(match r.kind {
                RadialKind::Finite => (chi_cdf(m, r.rho.unwrap()), true),
                RadialKind::Infinite => (1.0, false),
            })
        })
        .collect();
    let per_dir = per_dir?;
    let n = per_dir.len() as f64;
    let value = per_dir.iter().map(|(c, _)| c).sum::<f64>() / n;
    let n_finite = per_dir.iter().filter(|(_, f)| *f).count();
    let std_error = match (m, dirs.mode) {
        (1, _) => Some(0.0),
        (_, DirectionMode::PseudoRandom) => {
            let var = per_dir
                .iter()
                .map(|(c, _)| (c - value) * (c - value))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            Some((var / n).sqrt())
        }
        (_, DirectionMode::LowDiscrepancy) => None,
    };
    Ok(ProbEstimate {
        value,
        std_error,
        n_finite,
        n_infinite: per_dir.len() - n_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    #[test]
    fn lgamma_reference_values() {
        assert!((ln_gamma(0.5) - 0.5723649429247).abs() < 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(3.5) - 1.2009736023470743).abs() < 1e-12);
        assert!((ln_gamma(17.0) - 30.671860106080675).abs() < 1e-10);
    }

    #[test]
    fn incomplete_gamma_reference_values() {
        let cases = [
            (0.5, 0.02, 1.5851941887820603e-1),
            (0.5, 2.5, 9.7465268132253169e-1),
            (1.0, 1.0, 6.3212055882855767e-1),
            (1.5, 0.5, 1.9874804309879915e-1),
            (2.5, 7.0, 9.8439058389973311e-1),
            (8.0, 3.0, 1.1904503856357390e-2),
        ];
        for (a, x, want) in cases {
            let got = gammainc_lower_reg(a, x);
            assert!((got - want).abs() < 1e-13, "P({a},{x}) = {got}, want {want}");
            let q = gammainc_upper_reg(a, x);
            assert!((got + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chi_cdf_known_points() {
        // Rayleigh median
        assert!((chi_cdf(2, (2.0 * 2.0_f64.ln()).sqrt()) - 0.5).abs() < 1e-14);
        // chi(1) 95% point equals the two-sided normal quantile
        assert!((chi_cdf(1, 1.959964) - 0.9500000018071152).abs() < 1e-12);
        assert_eq!(chi_cdf(3, 0.0), 0.0);
        assert!((chi_cdf(3, 2.0) - 0.7385358700508888).abs() < 1e-13);
        assert!((chi_cdf(2, 1e4) - 1.0).abs() == 0.0);
    }

    #[test]
    fn inverse_normal_cdf_round_trips() {
        let quantiles = [1e-12, 1e-6, 0.025, 0.3, 0.5, 0.7, 0.975, 1.0 - 1e-9];
        for &u in &quantiles {
            let r = inv_normal_cdf(u);
            // recompute the CDF through the chi identity
            let back = if r >= 0.0 {
                0.5 + 0.5 * chi_cdf(1, r)
            } else {
                0.5 * chi_sf(1, -r)
            };
            assert!(
                (back - u).abs() < 1e-13 * (1.0 + 1.0 / u.min(1.0 - u)).min(1e3),
                "u={u} r={r} back={back}"
            );
        }
        assert!((inv_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((inv_normal_cdf(1e-12) + 7.034483825301131).abs() < 1e-8);
    }

    #[test]
    fn directions_are_deterministic_and_unit() {
        for mode in [DirectionMode::PseudoRandom, DirectionMode::LowDiscrepancy] {
            let a = sample_directions(3, 64, 7, mode).unwrap();
            let b = sample_directions(3, 64, 7, mode).unwrap();
            for (da, db) in a.directions().iter().zip(b.directions()) {
                assert_eq!(da, db);
                assert!((dot(da, da).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_sphere_is_two_points() {
        let d = sample_directions(1, 999, 3, DirectionMode::PseudoRandom).unwrap();
        assert_eq!(d.directions(), &[vec![1.0], vec![-1.0]]);
    }

    #[test]
    fn pseudo_random_mean_obeys_clt_bound() {
        let n = 10_000;
        let d = sample_directions(3, n, 42, DirectionMode::PseudoRandom).unwrap();
        for k in 0..3 {
            let mean: f64 =
                d.directions().iter().map(|v| v[k]).sum::<f64>() / n as f64;
            // componentwise variance of a uniform sphere point is 1/m
            let bound = 3.0 * (1.0 / 3.0f64).sqrt() / (n as f64).sqrt();
            assert!(mean.abs() < bound, "k={k} mean={mean} bound={bound}");
        }
    }

    #[test]
    fn sobol_projections_stratify_dyadically() {
        // each 1-D projection of the first 2^k points (from index 1, plus the
        // skipped zero point) must hit each dyadic interval once
        let s = SobolSequence::new(6);
        for dim in 0..6 {
            for k in [3usize, 5] {
                let cells = 1usize << k;
                let mut hit = vec![0u32; cells];
                for idx in 0..cells as u64 {
                    let p = s.point(idx);
                    let c = (p[dim] * cells as f64) as usize;
                    hit[c.min(cells - 1)] += 1;
                }
                assert!(hit.iter().all(|&h| h == 1), "dim {dim} k {k}: {hit:?}");
            }
        }
        // the leading pair forms a (0,2)-sequence: 2^k points, one per box
        for k in [4usize, 6] {
            let cells = 1usize << (k / 2);
            let mut hit = vec![0u32; cells * cells];
            for idx in 0..(1u64 << k) {
                let p = s.point(idx);
                let cx = ((p[0] * cells as f64) as usize).min(cells - 1);
                let cy = ((p[1] * cells as f64) as usize).min(cells - 1);
                hit[cx * cells + cy] += 1;
            }
            let expect = (1usize << k) / (cells * cells);
            assert!(hit.iter().all(|&h| h as usize == expect));
        }
    }

    #[test]
    fn radial_roots_of_single_inequality() {
        // z - c <= 0 with c = 1.5: rho(+1) = c, rho(-1) infinite
        let vertex = crate::envelope::ConvexFunction::separable_sum(vec![
            crate::envelope::ConvexFunction::zero(1),
            crate::envelope::ConvexFunction::affine(vec![1.0], -1.5),
        ]);
        let sys = crate::systems::ConstraintSystem::joint(
            1,
            1,
            crate::envelope::ConvexFunction::zero(1),
            vec![vertex.clone()],
            vertex,
            None,
        );
        let model = GaussianModel::standard(1);
        let opts = RadialOptions::default();
        let up = radial_solve(&sys, &model, 0.0, &[0.0], &[1.0], &opts).unwrap();
        assert_eq!(up.kind, RadialKind::Finite);
        assert!((up.rho.unwrap() - 1.5).abs() < 1e-9);
        let down = radial_solve(&sys, &model, 0.0, &[0.0], &[-1.0], &opts).unwrap();
        assert_eq!(down.kind, RadialKind::Infinite);
    }

    #[test]
    fn radial_roots_of_nonsmooth_example_at_zero() {
        // f2(z) <= 5 gives rho(+1) = sqrt(5), rho(-1) = 5
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        let opts = RadialOptions::default();
        let up = radial_solve(&ex.system, &model, 0.0, &[0.0], &[1.0], &opts).unwrap();
        assert!((up.rho.unwrap() - 5.0_f64.sqrt()).abs() < 1e-9);
        let down = radial_solve(&ex.system, &model, 0.0, &[0.0], &[-1.0], &opts).unwrap();
        assert!((down.rho.unwrap() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn radial_root_continuity_in_lambda() {
        // closed form: rho_lambda = sqrt(5 (2 lambda + 1)) decreasing to
        // sqrt(5)
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        let opts = RadialOptions::default();
        let target = 5.0_f64.sqrt();
        let mut prev = f64::INFINITY;
        for &lambda in &[0.1, 0.01, 0.001] {
            let r = radial_solve(&ex.system, &model, lambda, &[0.0], &[1.0], &opts)
                .unwrap()
                .rho
                .unwrap();
            let closed = (5.0 * (2.0 * lambda + 1.0)).sqrt();
            assert!((r - closed).abs() < 1e-8, "lambda={lambda}: {r} vs {closed}");
            assert!(r < prev && r > target);
            prev = r;
        }
    }

    #[test]
    fn radial_min_formula_agrees_on_the_joint_pair() {
        let ex = registry::example_6_4();
        let model = GaussianModel::standard(2);
        let opts = RadialOptions::default();
        let dirs = sample_directions(2, 16, 11, DirectionMode::PseudoRandom).unwrap();
        for v in dirs.directions() {
            for &lambda in &[0.0, 0.1] {
                let direct = radial_solve(&ex.system, &model, lambda, &[0.0, 0.0], v, &opts)
                    .unwrap();
                let via_min =
                    radial_min_formula(&ex.system, &model, lambda, &[0.0, 0.0], v).unwrap();
                match direct.kind {
                    RadialKind::Finite => {
                        assert!(
                            (direct.rho.unwrap() - via_min).abs() < 1e-6,
                            "lambda {lambda}: {} vs {via_min}",
                            direct.rho.unwrap()
                        );
                    }
                    RadialKind::Infinite => assert!(via_min.is_infinite()),
                }
            }
        }
    }

    #[test]
    fn slater_violation_is_reported() {
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        // |x| = 4 puts 2 f1(x) - 5 = +1 above the threshold
        let err = radial_solve(
            &ex.system,
            &model,
            0.0,
            &[4.0],
            &[1.0],
            &RadialOptions::default(),
        );
        assert!(matches!(err, Err(SphericalError::SlaterViolation { .. })));
    }

    #[test]
    fn prob_estimate_single_inequality_exact() {
        // z <= 1.6449: the two-point quadrature gives the normal CDF
        let vertex = crate::envelope::ConvexFunction::separable_sum(vec![
            crate::envelope::ConvexFunction::zero(1),
            crate::envelope::ConvexFunction::affine(vec![1.0], -1.6449),
        ]);
        let sys = crate::systems::ConstraintSystem::joint(
            1,
            1,
            crate::envelope::ConvexFunction::zero(1),
            vec![vertex.clone()],
            vertex,
            None,
        );
        let model = GaussianModel::standard(1);
        let dirs = sample_directions(1, 2, 0, DirectionMode::PseudoRandom).unwrap();
        let est = prob_estimate(&sys, &model, 0.0, &[0.0], &dirs).unwrap();
        let expect = 0.5 + 0.5 * chi_cdf(1, 1.6449);
        assert!((est.value - expect).abs() < 1e-12);
        assert!((est.value - 0.95).abs() < 2e-4);
        assert_eq!(est.n_infinite, 1);
    }

    #[test]
    fn prob_estimate_nonsmooth_example_and_monotonicity() {
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        let dirs = sample_directions(1, 2, 0, DirectionMode::PseudoRandom).unwrap();
        let nominal = prob_estimate(&ex.system, &model, 0.0, &[0.0], &dirs).unwrap();
        assert!((nominal.value - 0.987326054009694).abs() < 1e-9);
        let mut prev = nominal.value;
        for &lambda in &[0.01, 0.1] {
            let est = prob_estimate(&ex.system, &model, lambda, &[0.0], &dirs).unwrap();
            assert!(est.value >= prev - 1e-12, "lambda {lambda}");
            prev = est.value;
        }
    }
}
