//! The per-direction gradient mapping and the sample-average gradient of the
//! regularized probability function.
//!
//! For a finite direction v with radial root ρ = ρ_λ(x, v), the envelope
//! gradient at (x, ρLv) splits into decision and noise blocks and
//!
//! ```text
//!     G_λ(x, v) = −θ(ρ, v) · (∇_x M_λS(x, ρLv) − ∇h(x)) / ⟨∇_z M_λS(x, ρLv), Lv⟩,
//! ```
//!
//! with θ the chi density; infinite directions contribute the zero vector.
//! Averaging G_λ over a fixed direction set yields the exact gradient of the
//! deterministic sample-average probability x ↦ prob_estimate(x, dirs), which
//! is what the solver differentiates.

use rayon::prelude::*;
use thiserror::Error;

use crate::envelope;
use crate::linalg::dot;
use crate::spherical::{
    chi_pdf, radial_solve, DirectionSet, GaussianModel, RadialKind, RadialOptions, SphericalError,
};
use crate::systems::ConstraintSystem;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("degenerate radial denominator {value:.3e} <= floor {floor:.3e} at direction {index:?}: Slater margin too small at x")]
    DegenerateDenominator {
        index: Option<usize>,
        value: f64,
        floor: f64,
    },
    #[error("direction {index}: {source}")]
    Direction {
        index: usize,
        source: SphericalError,
    },
    #[error(transparent)]
    Spherical(#[from] SphericalError),
}

/// Sample-average gradient with per-direction diagnostics.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub per_direction_norm_max: f64,
    /// smallest radial denominator ⟨∇_z M_λS, Lv⟩ over finite directions
    pub denominators_min: f64,
    pub n_finite: usize,
    pub n_infinite: usize,
}

struct DirectionTerm {
    gradient: Vec<f64>,
    denominator: f64,
    finite: bool,
}

fn denom_floor(theta: f64) -> f64 {
    1e-12 * (1.0 + theta)
}

fn direction_term(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    v: &[f64],
    opts: &RadialOptions,
) -> Result<DirectionTerm, GradientError> {
    let radial = radial_solve(sys, model, lambda, x, v, opts)?;
    let n = sys.n;
    if radial.kind == RadialKind::Infinite {
        return Ok(DirectionTerm {
            gradient: vec![0.0; n],
            denominator: f64::INFINITY,
            finite: false,
        });
    }
    let rho = radial.rho.expect("finite radial result carries a root");
    let lv = model.l_mul(v);
    let mut xz = x.to_vec();
    xz.extend(lv.iter().map(|lvi| rho * lvi));
    let env = envelope::moreau_eval(&sys.sup, lambda, &xz)
        .map_err(|e| GradientError::Spherical(SphericalError::from(e)))?;
    let theta = chi_pdf(model.m(), rho);
    let denominator = dot(&env.gradient[n..], &lv);
    let floor = denom_floor(theta);
    if denominator <= floor {
        return Err(GradientError::DegenerateDenominator {
            index: None,
            value: denominator,
            floor,
        });
    }
    let grad_h = sys.h.subgradient(x);
    let scale = -theta / denominator;
    let gradient = (0..n)
        .map(|i| scale * (env.gradient[i] - grad_h[i]))
        .collect();
    Ok(DirectionTerm {
        gradient,
        denominator,
        finite: true,
    })
}

/// G_λ(x, v) for a single unit direction. Requires λ > 0 and the Slater
/// condition at x.
pub fn direction_gradient(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>, GradientError> {
    assert!(lambda > 0.0, "direction_gradient requires lambda > 0");
    direction_term(sys, model, lambda, x, v, &RadialOptions::default()).map(|t| t.gradient)
}

/// Mean of G_λ over the direction set: the exact gradient of the SAA value
/// x ↦ prob_estimate(sys, model, λ, x, dirs). Per-direction work runs
/// data-parallel with an ordered reduction; failures carry the direction
/// index.
pub fn grad_estimate(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    lambda: f64,
    x: &[f64],
    dirs: &DirectionSet,
) -> Result<GradientEstimate, GradientError> {
    assert!(lambda > 0.0, "grad_estimate requires lambda > 0");
    let opts = RadialOptions::default();
    let terms: Result<Vec<DirectionTerm>, GradientError> = dirs
        .directions()
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            direction_term(sys, model, lambda, x, v, &opts).map_err(|e| match e {
                GradientError::DegenerateDenominator { value, floor, .. } => {
                    GradientError::DegenerateDenominator {
                        index: Some(i),
                        value,
                        floor,
                    }
                }
                GradientError::Spherical(s) => GradientError::Direction { index: i, source: s },
                other => other,
            })
        })
        .collect();
    let terms = terms?;
    let n = sys.n;
    let count = terms.len() as f64;
    let mut gradient = vec![0.0; n];
    let mut norm_max = 0.0_f64;
    let mut denom_min = f64::INFINITY;
    let mut n_finite = 0;
    for t in &terms {
        for (gi, ti) in gradient.iter_mut().zip(&t.gradient) {
            *gi += ti / count;
        }
        norm_max = norm_max.max(dot(&t.gradient, &t.gradient).sqrt());
        if t.finite {
            n_finite += 1;
            denom_min = denom_min.min(t.denominator);
        }
    }
    Ok(GradientEstimate {
        gradient,
        per_direction_norm_max: norm_max,
        denominators_min: denom_min,
        n_finite,
        n_infinite: terms.len() - n_finite,
    })
}

/// One row of a λ-sweep: the SAA gradient at a given regularization level.
#[derive(Debug, Clone)]
pub struct ConsistencyRow {
    pub lambda: f64,
    pub estimate: GradientEstimate,
}

/// Gradient sweep along a decreasing λ-schedule with the pairwise gradient
/// differences. When the supremum function is smooth at the relevant
/// boundary points the differences exhibit a Cauchy pattern.
#[derive(Debug, Clone)]
pub struct ConsistencyTable {
    pub rows: Vec<ConsistencyRow>,
    /// ‖∇φ_{λ_k} − ∇φ_{λ_{k+1}}‖ for consecutive schedule entries
    pub successive_gaps: Vec<f64>,
}

pub fn consistency_sweep(
    sys: &ConstraintSystem,
    model: &GaussianModel,
    x: &[f64],
    lambda_schedule: &[f64],
    dirs: &DirectionSet,
) -> Result<ConsistencyTable, GradientError> {
    assert!(
        lambda_schedule.windows(2).all(|w| w[0] > w[1]) && !lambda_schedule.is_empty(),
        "schedule must be strictly decreasing"
    );
    let mut rows = Vec::with_capacity(lambda_schedule.len());
    for &lambda in lambda_schedule {
        rows.push(ConsistencyRow {
            lambda,
            estimate: grad_estimate(sys, model, lambda, x, dirs)?,
        });
    }
    let successive_gaps = rows
        .windows(2)
        .map(|w| {
            let a = &w[0].estimate.gradient;
            let b = &w[1].estimate.gradient;
            a.iter()
                .zip(b)
                .map(|(ai, bi)| (ai - bi) * (ai - bi))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ConsistencyTable {
        rows,
        successive_gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::ConvexFunction;
    use crate::registry;
    use crate::spherical::{prob_estimate, sample_directions, DirectionMode};
    use crate::systems::ConstraintSystem;

    fn single_inequality(c: f64) -> ConstraintSystem {
        let vertex = ConvexFunction::separable_sum(vec![
            ConvexFunction::zero(1),
            ConvexFunction::affine(vec![1.0], -c),
        ]);
        ConstraintSystem::joint(
            1,
            1,
            ConvexFunction::zero(1),
            vec![vertex.clone()],
            vertex,
            None,
        )
    }

    #[test]
    fn no_decision_dependence_gives_zero_gradient() {
        let sys = single_inequality(1.5);
        let model = GaussianModel::standard(1);
        for v in [[1.0], [-1.0]] {
            let g = direction_gradient(&sys, &model, 0.1, &[0.3], &v).unwrap();
            assert_eq!(g, vec![0.0]);
        }
    }

    #[test]
    fn flat_envelope_region_gives_zero_gradient() {
        // the nonsmooth example's envelope is identically zero on |x| <= 1
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        let dirs = sample_directions(1, 2, 0, DirectionMode::PseudoRandom).unwrap();
        let est = grad_estimate(&ex.system, &model, 0.1, &[0.0], &dirs).unwrap();
        assert!(est.gradient[0].abs() < 1e-14);
        // same for the two-dimensional cousin inside its flat disk
        let ex2 = registry::example_6_2();
        let model2 = GaussianModel::standard(2);
        let dirs2 = sample_directions(2, 128, 5, DirectionMode::LowDiscrepancy).unwrap();
        let est2 = grad_estimate(&ex2.system, &model2, 0.05, &[1.0, 0.0], &dirs2).unwrap();
        assert!(est2.gradient.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn per_direction_gradient_matches_finite_differences() {
        // d/dx of chi_cdf(rho_lambda(x, +1)) for the nonsmooth example at a
        // point where the envelope depends on x
        let ex = registry::example_6_1();
        let model = GaussianModel::standard(1);
        let lambda = 0.1;
        let x = 1.25;
        let g = direction_gradient(&ex.system, &model, lambda, &[x], &[1.0]).unwrap()[0];
        let opts = RadialOptions::default();
        let value = |xq: f64| {
            let r = radial_solve(&ex.system, &model, lambda, &[xq], &[1.0], &opts).unwrap();
            crate::spherical::chi_cdf(1, r.rho.unwrap())
        };
        let h = 1e-5 * (1.0 + x.abs());
        let fd = (value(x + h) - value(x - h)) / (2.0 * h);
        assert!(
            (g - fd).abs() <= 1e-5 * fd.abs().max(1e-3),
            "analytic {g} vs fd {fd}"
        );
    }

    #[test]
    fn saa_gradient_matches_finite_differences_of_the_estimator() {
        let ex = registry::example_6_4();
        let model = GaussianModel::standard(2);
        let dirs = sample_directions(2, 512, 9, DirectionMode::LowDiscrepancy).unwrap();
        let lambda = 0.05;
        let x = [2.2, -0.7];
        let est = grad_estimate(&ex.system, &model, lambda, &x, &dirs).unwrap();
        let mut fd = vec![0.0; 2];
        for k in 0..2 {
            let h = 1e-5 * (1.0 + x[k].abs());
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let vp = prob_estimate(&ex.system, &model, lambda, &xp, &dirs).unwrap().value;
            let vm = prob_estimate(&ex.system, &model, lambda, &xm, &dirs).unwrap().value;
            fd[k] = (vp - vm) / (2.0 * h);
        }
        let err: f64 = est
            .gradient
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-4 * scale.max(1e-6), "err {err} scale {scale}");
        assert!(est.denominators_min > 0.0);
    }

    #[test]
    fn symmetric_system_has_zero_gradient_at_origin() {
        let ex = registry::example_6_4();
        let model = GaussianModel::standard(2);
        let dirs = sample_directions(2, 64, 3, DirectionMode::PseudoRandom).unwrap();
        let est = grad_estimate(&ex.system, &model, 0.1, &[0.0, 0.0], &dirs).unwrap();
        // the x-part envelope is flat on the disk of radius 2
        assert!(est.gradient.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        // a hair-thin Slater margin through a constant compensator: the
        // radial root sits just past the kink of f1 where the envelope's
        // z-slope is below the floor
        let vertex = ConvexFunction::separable_sum(vec![
            ConvexFunction::zero(1),
            ConvexFunction::norm_excess(1, 1.0),
        ]);
        let sys = ConstraintSystem::joint(
            1,
            1,
            ConvexFunction::affine(vec![0.0], 1e-26),
            vec![vertex.clone()],
            vertex,
            None,
        );
        let model = GaussianModel::standard(1);
        // large lambda widens the quadratic smoothing band so the slope at
        // the crossing sits below the floor even after root noise
        let err = direction_gradient(&sys, &model, 1e3, &[0.0], &[1.0]);
        assert!(
            matches!(err, Err(GradientError::DegenerateDenominator { .. })),
            "got {err:?}"
        );
    }

    #[test]
    fn consistency_sweep_gaps_shrink_on_the_joint_example() {
        let ex = registry::example_6_4();
        let model = GaussianModel::standard(2);
        let dirs = sample_directions(2, 256, 17, DirectionMode::LowDiscrepancy).unwrap();
        let table = consistency_sweep(
            &ex.system,
            &model,
            &[2.2, -0.7],
            &[0.1, 0.01, 0.001],
            &dirs,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.successive_gaps[1] < table.successive_gaps[0]);
    }

    #[test]
    fn deep_tail_gradients_are_lambda_insensitive() {
        // affine-in-x system with the radial root deep in the chi tail: the
        // per-direction density factor collapses, so gradients across lambda
        // agree to 1e-6
        let vertex = ConvexFunction::affine(vec![0.3, 1.0], -5.0);
        let sys = ConstraintSystem::joint(
            1,
            1,
            ConvexFunction::zero(1),
            vec![vertex.clone()],
            vertex,
            None,
        );
        let model = GaussianModel::standard(1);
        let dirs = sample_directions(1, 2, 0, DirectionMode::PseudoRandom).unwrap();
        let g1 = grad_estimate(&sys, &model, 0.1, &[0.0], &dirs).unwrap().gradient;
        let g2 = grad_estimate(&sys, &model, 0.01, &[0.0], &dirs).unwrap().gradient;
        assert!((g1[0] - g2[0]).abs() < 1e-6, "{} vs {}", g1[0], g2[0]);
    }
}
