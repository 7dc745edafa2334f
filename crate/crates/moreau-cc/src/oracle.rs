//! Independent brute-force validators.
//!
//! Everything here validates the spherical-radial machinery from the outside:
//! direct Monte Carlo counting, closed-form references for the shipped
//! nonsmooth examples, an error-function normal CDF, central finite
//! differences, and the level-set nonconvexity witness search. None of these
//! operations touch the `spherical` or `gradient` code paths (only the
//! Gaussian model container and the envelope evaluator are shared), so
//! agreement between the two sides is a genuine cross-check.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envelope;
use crate::spherical::GaussianModel;
use crate::systems::{sup_value, ConstraintSystem, SystemsError};

/// Standard normal CDF through the complementary error function,
/// |error| ≲ 1e−15.
pub fn normal_cdf(r: f64) -> f64 {
    0.5 * libm::erfc(-r / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(r: f64) -> f64 {
    (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Direct Monte Carlo estimate of φ_λ(x) (φ at λ = 0): draw ξ = L·standard
/// normal and count {M_λS(x, ξ) ≤ h(x)}. Returns the frequency and its
/// binomial standard error. Deterministic for a fixed seed regardless of
/// thread count (fixed-size chunks carry derived seeds).
pub fn mc_probability(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<McEstimate, SystemsError> {
    assert!(n >= 1);
    let threshold = sys.h.eval(x);
    let m = model.m();
    const CHUNK: usize = 8192;
    let chunks: Vec<(u64, usize)> = (0..n.div_ceil(CHUNK))
        .map(|c| (c as u64, CHUNK.min(n - c * CHUNK)))
        .collect();
    let counts: Result<Vec<u64>, SystemsError> = chunks
        .par_iter()
        .map(|&(chunk_idx, len)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ chunk_idx.wrapping_mul(0x9e3779b97f4a7c15));
            let mut hits = 0u64;
            let mut xz = x.to_vec();
            xz.extend(std::iter::repeat(0.0).take(m));
            let mut draw = vec![0.0; m];
            for _ in 0..len {
                gaussian_fill(&mut rng, &mut draw);
                let xi = model.l_mul(&draw);
                xz[x.len()..].copy_from_slice(&xi);
                let val = if lambda == 0.0 {
                    sys.sup.eval(&xz)
                } else {
                    envelope::moreau_eval(&sys.sup, lambda, &xz)?.value
                };
                if val <= threshold {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect();
    let hits: u64 = counts?.iter().sum();
    let value = hits as f64 / n as f64;
    let std_error = (value * (1.0 - value) / n as f64).sqrt();
    Ok(McEstimate { value, std_error })
}

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Box–Muller pairs from the counter-based stream.
fn gaussian_fill(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out[i] = r * c;
        i += 1;
        if i < out.len() {
            out[i] = r * s;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// closed forms for the shipped nonsmooth examples
// ---------------------------------------------------------------------------

/// M_λ f₁ for f₁(x) = max(|x| − 1, 0), the paper-style three-branch formula.
fn envelope_f1(lambda: f64, x: f64) -> f64 {
    let a = x.abs();
    if lambda == 0.0 || a <= 1.0 {
        (a - 1.0).max(0.0)
    } else if a >= lambda + 1.0 {
        a - lambda / 2.0 - 1.0
    } else {
        (a - 1.0) * (a - 1.0) / (2.0 * lambda)
    }
}

/// Machine-precision reference for the regularized probability of the
/// single-inequality example: φ_λ(x) = P(M_λf₂(ξ) ≤ 5 − 2·M_{2λ}f₁(x)),
/// by piecewise inversion of the f₂ envelope and the normal CDF.
pub fn analytic_example1(x: f64, lambda: f64) -> f64 {
    assert!(lambda >= 0.0);
    let c = 5.0 - 2.0 * envelope_f1(2.0 * lambda, x);
    if c < 0.0 {
        return 0.0;
    }
    let (upper, lower) = if lambda == 0.0 {
        (c.sqrt(), -c)
    } else {
        let upper = (c * (2.0 * lambda + 1.0)).sqrt();
        let lower = if c <= lambda / 2.0 {
            -(2.0 * lambda * c).sqrt()
        } else {
            -(c + lambda / 2.0)
        };
        (upper, lower)
    };
    normal_cdf(upper) - normal_cdf(lower)
}

/// One-sided difference quotients of the nominal probability of the
/// single-inequality example at its kink x̄ = 1.
#[derive(Debug, Clone)]
pub struct NonsmoothnessWitness {
    pub steps: Vec<f64>,
    pub left_slopes: Vec<f64>,
    pub right_slopes: Vec<f64>,
    /// the displayed right-derivative expression
    /// −(1/√(2π))[(1/√5)·e^{−5/2} + 2·e^{−25/2}]
    pub right_expression: f64,
}

pub fn nonsmoothness_witness_example1() -> NonsmoothnessWitness {
    let steps = vec![1e-3, 1e-4, 1e-5];
    let left_slopes = steps
        .iter()
        .map(|&h| (analytic_example1(1.0, 0.0) - analytic_example1(1.0 - h, 0.0)) / h)
        .collect();
    let right_slopes = steps
        .iter()
        .map(|&h| (analytic_example1(1.0 + h, 0.0) - analytic_example1(1.0, 0.0)) / h)
        .collect();
    let right_expression = -(1.0 / (2.0 * std::f64::consts::PI).sqrt())
        * ((1.0 / 5.0_f64.sqrt()) * (-2.5_f64).exp() + 2.0 * (-12.5_f64).exp());
    NonsmoothnessWitness {
        steps,
        left_slopes,
        right_slopes,
        right_expression,
    }
}

/// Closed form for the regularized probability of the nonconvex-level-set
/// example: φ_λ(x) = Φ(x₁²/2 + λ/2 − M_λ f̂(x₁) − x₂²/(2(λ+1))) with
/// f̂(t) = max(t, 0)²/2.
pub fn analytic_example52(x1: f64, x2: f64, lambda: f64) -> f64 {
    let env_fhat = if x1 > 0.0 {
        x1 * x1 / (2.0 * (lambda + 1.0))
    } else {
        0.0
    };
    let threshold = x1 * x1 / 2.0 + lambda / 2.0 - env_fhat - x2 * x2 / (2.0 * (lambda + 1.0));
    normal_cdf(threshold)
}

/// A level-set nonconvexity witness: two feasible points whose midpoint dips
/// below the level by at least the search margin.
#[derive(Debug, Clone)]
pub struct LevelSetWitness {
    pub p: f64,
    pub x_a: [f64; 2],
    pub x_b: [f64; 2],
    pub midpoint: [f64; 2],
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_mid: f64,
}

/// Grid search for a nonconvex upper level set of a scalar field on the
/// plane: endpoints on a common grid line with φ ≥ p, midpoint with
/// φ < p − margin. The grid starts on [−3, 3]² with the given pitch and is
/// widened twice before giving up.
pub fn levelset_witness_search(
    phi: impl Fn(f64, f64) -> f64,
    p_scan: &[f64],
    margin: f64,
    pitch: f64,
) -> Option<LevelSetWitness> {
    for widen in 0..3 {
        let half = 3.0 * 1.5_f64.powi(widen);
        let count = (2.0 * half / pitch).round() as usize + 1;
        let coord = |i: usize| -half + pitch * i as f64;
        // cache one row of φ values at a time (row = fixed x2)
        for &p in p_scan {
            for row in 0..count {
                let x2 = coord(row);
                let vals: Vec<f64> = (0..count).map(|i| phi(coord(i), x2)).collect();
                for ia in 0..count {
                    if vals[ia] < p {
                        continue;
                    }
                    for ib in (ia + 2..count).step_by(2) {
                        if vals[ib] < p {
                            continue;
                        }
                        let imid = (ia + ib) / 2;
                        if vals[imid] < p - margin {
                            return Some(LevelSetWitness {
                                p,
                                x_a: [coord(ia), x2],
                                x_b: [coord(ib), x2],
                                midpoint: [coord(imid), x2],
                                phi_a: vals[ia],
                                phi_b: vals[ib],
                                phi_mid: vals[imid],
                            });
                        }
                    }
                }
            }
        }
    }
    None
}

/// Witness search specialized to the nonconvex-level-set example at the given
/// regularization, scanning p over {0.5, 0.55, …, 0.95} by default.
pub fn nonconvex_levelset_witness(lambda: f64, p_scan: Option<&[f64]>) -> Option<LevelSetWitness> {
    let default_scan: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let scan = p_scan.unwrap_or(&default_scan);
    levelset_witness_search(
        |x1, x2| analytic_example52(x1, x2, lambda),
        scan,
        0.005,
        0.05,
    )
}

/// Central finite differences, the reference for every gradient check.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let h = step * (1.0 + x[k].abs());
        probe[k] = x[k] + h;
        let fp = f(&probe);
        probe[k] = x[k] - h;
        let fm = f(&probe);
        probe[k] = x[k];
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Nominal sup-value feasibility oracle: P(S(x, ξ) ≤ h(x) + eps), used by
/// the enlargement containment checks.
pub fn mc_probability_enlarged(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    x: &[f64],
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<McEstimate, SystemsError> {
    let threshold = sys.h.eval(x) + eps;
    let m = model.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    let mut draw = vec![0.0; m];
    for _ in 0..n {
        gaussian_fill(&mut rng, &mut draw);
        let xi = model.l_mul(&draw);
        if sup_value(sys, x, &xi)? <= threshold {
            hits += 1;
        }
    }
    let value = hits as f64 / n as f64;
    Ok(McEstimate {
        value,
        std_error: (value * (1.0 - value) / n as f64).sqrt(),
    })
}
