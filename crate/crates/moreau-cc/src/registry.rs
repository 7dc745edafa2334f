//! Built-in example catalog: the constraint systems shipped with the crate,
//! each with a documented Slater anchor and a sampling box of Slater points
//! for randomized checks.
//!
//! All systems use a zero-mean standard Gaussian noise model of the listed
//! dimension. The supremum functions carry closed-form proximal maps, so the
//! envelope machinery on these systems is noise-free.

use std::sync::Arc;

use crate::envelope::ConvexFunction;
use crate::systems::{
    ConstraintSystem, JointComponents, ProbustComponents, SemidefComponents,
};

pub struct ExampleSystem {
    pub name: &'static str,
    pub system: ConstraintSystem,
    /// documented Slater anchor: S(anchor, 0) < h(anchor)
    pub anchor: Vec<f64>,
    /// box of decision points that all satisfy the Slater condition
    pub sample_lo: Vec<f64>,
    pub sample_hi: Vec<f64>,
}

/// Single nonsmooth inequality 2·f₁(x) + f₂(z) − 5 ≤ 0 with
/// f₁(x) = max(|x| − 1, 0) and f₂(z) = z² (z ≥ 0), −z (z < 0); n = m = 1.
pub fn example_6_1() -> ExampleSystem {
    let vertex = ConvexFunction::separable_sum(vec![
        ConvexFunction::norm_excess(1, 1.0).scale(2.0),
        ConvexFunction::pos_square_neg_linear(),
    ])
    .add_const(-5.0);
    let system = ConstraintSystem::joint(
        1,
        1,
        ConvexFunction::zero(1),
        vec![vertex.clone()],
        vertex.clone(),
        Some(single_component_scalarize(vertex)),
    );
    ExampleSystem {
        name: "example_6_1",
        system,
        anchor: vec![0.0],
        sample_lo: vec![-3.0],
        sample_hi: vec![3.0],
    }
}

/// Nonsmooth inequality max(‖x‖ − 2, 0) + |z₁| + z₂ − 3 ≤ 0; n = m = 2.
pub fn example_6_2() -> ExampleSystem {
    let vertex = ConvexFunction::separable_sum(vec![
        ConvexFunction::norm_excess(2, 2.0),
        ConvexFunction::norm_excess(1, 0.0),
        ConvexFunction::affine(vec![1.0], 0.0),
    ])
    .add_const(-3.0);
    let system = ConstraintSystem::joint(
        2,
        2,
        ConvexFunction::zero(2),
        vec![vertex.clone()],
        vertex.clone(),
        Some(single_component_scalarize(vertex)),
    );
    ExampleSystem {
        name: "example_6_2",
        system,
        anchor: vec![0.0, 0.0],
        sample_lo: vec![-3.0, -3.0],
        sample_hi: vec![3.0, 3.0],
    }
}

/// Joint pair ‖x‖ + |z₁| + z₂ − 5 ≤ 0 and |z₁| + z₂ − 3 ≤ 0; n = m = 2.
/// The supremum collapses to max(‖x‖ − 5, −3) + |z₁| + z₂ because the noise
/// terms are shared.
pub fn example_6_4() -> ExampleSystem {
    let vertex1 = ConvexFunction::separable_sum(vec![
        ConvexFunction::norm_excess(2, 0.0),
        ConvexFunction::norm_excess(1, 0.0),
        ConvexFunction::affine(vec![1.0], 0.0),
    ])
    .add_const(-5.0);
    let vertex2 = ConvexFunction::separable_sum(vec![
        ConvexFunction::zero(2),
        ConvexFunction::norm_excess(1, 0.0),
        ConvexFunction::affine(vec![1.0], 0.0),
    ])
    .add_const(-3.0);
    let sup = ConvexFunction::separable_sum(vec![
        ConvexFunction::norm_excess(2, 2.0),
        ConvexFunction::norm_excess(1, 0.0),
        ConvexFunction::affine(vec![1.0], 0.0),
    ])
    .add_const(-3.0);
    let scalarize = Arc::new(|w: &[f64]| {
        let w1 = w[0];
        let x_part = if w1 > 0.0 {
            ConvexFunction::norm_excess(2, 0.0).scale(w1)
        } else {
            ConvexFunction::zero(2)
        };
        ConvexFunction::separable_sum(vec![
            x_part,
            ConvexFunction::norm_excess(1, 0.0),
            ConvexFunction::affine(vec![1.0], 0.0),
        ])
        .add_const(-5.0 * w1 - 3.0 * (1.0 - w1))
    });
    let system = ConstraintSystem::joint(
        2,
        2,
        ConvexFunction::zero(2),
        vec![vertex1, vertex2],
        sup,
        Some(scalarize),
    );
    ExampleSystem {
        name: "example_6_4",
        system,
        anchor: vec![0.0, 0.0],
        sample_lo: vec![-3.0, -3.0],
        sample_hi: vec![3.0, 3.0],
    }
}

/// Nonconvex-level-set example: g(x, z) = z + f(x₁) + x₂²/2 with
/// f(x₁) = −x₁²/2 for x₁ ≤ 0, compensated by h(x) = x₁²/2; n = 2, m = 1.
/// The scalarization g + h = z + max(x₁, 0)²/2 + x₂²/2 is convex.
pub fn example_5_2() -> ExampleSystem {
    let vertex = ConvexFunction::separable_sum(vec![
        ConvexFunction::pos_half_square(),
        ConvexFunction::quadratic(vec![vec![1.0]], vec![0.0], 0.0),
        ConvexFunction::affine(vec![1.0], 0.0),
    ]);
    let h = ConvexFunction::quadratic(
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        vec![0.0, 0.0],
        0.0,
    );
    let system = ConstraintSystem::joint(
        2,
        1,
        h,
        vec![vertex.clone()],
        vertex.clone(),
        Some(single_component_scalarize(vertex)),
    );
    // Slater requires x1 < 0 and |x2| < |x1|; the box stays inside that cone
    ExampleSystem {
        name: "example_5_2",
        system,
        anchor: vec![-1.0, 0.0],
        sample_lo: vec![-3.0, -0.9],
        sample_hi: vec![-1.2, 0.9],
    }
}

/// Semidefinite demo: Φ(x, z) = R · diag(d₁, d₂, d₃) · Rᵀ with affine dᵢ and
/// a fixed rotation R, so λ_max(Φ) is an exact max of affine functions while
/// the matrix itself is dense; n = m = 2, p = 3.
pub fn semidef_demo() -> ExampleSystem {
    let rows = semidef_rows();
    let offs = semidef_offsets();
    let rot = semidef_rotation();
    let sup = ConvexFunction::max_affine(rows.to_vec(), offs.to_vec());

    let rot_phi = rot.clone();
    let phi = Arc::new(move |x: &[f64], z: &[f64]| {
        let d: Vec<f64> = (0..3)
            .map(|i| {
                let a = &semidef_rows()[i];
                a[0] * x[0] + a[1] * x[1] + a[2] * z[0] + a[3] * z[1] + semidef_offsets()[i]
            })
            .collect();
        conjugate_diag(&rot_phi, &d)
    });
    let rot_partial = rot.clone();
    let phi_partial = Arc::new(move |_x: &[f64], _z: &[f64], k: usize| {
        let d: Vec<f64> = (0..3).map(|i| semidef_rows()[i][k]).collect();
        conjugate_diag(&rot_partial, &d)
    });
    let system = ConstraintSystem::semidefinite(
        2,
        2,
        ConvexFunction::zero(2),
        SemidefComponents {
            p: 3,
            phi,
            phi_partial,
            eig_tol: 1e-12,
        },
        sup,
    );
    ExampleSystem {
        name: "semidef_demo",
        system,
        anchor: vec![0.0, 0.0],
        sample_lo: vec![-2.0, -2.0],
        sample_hi: vec![2.0, 2.0],
    }
}

fn semidef_rows() -> [Vec<f64>; 3] {
    [
        vec![1.0, 0.0, 0.5, 0.0],
        vec![0.0, 1.0, 0.3, 0.4],
        vec![0.5, 0.5, 0.0, 1.0],
    ]
}

fn semidef_offsets() -> [f64; 3] {
    [-4.0, -3.5, -4.5]
}

/// Fixed rotation assembled from three Givens rotations.
fn semidef_rotation() -> Vec<Vec<f64>> {
    let givens = |p: usize, q: usize, theta: f64| {
        let (s, c) = theta.sin_cos();
        let mut g = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            g[i][i] = 1.0;
        }
        g[p][p] = c;
        g[q][q] = c;
        g[p][q] = -s;
        g[q][p] = s;
        g
    };
    let mul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    };
    mul(&mul(&givens(0, 1, 0.6), &givens(1, 2, 0.8)), &givens(0, 2, 0.3))
}

/// R · diag(d) · Rᵀ.
fn conjugate_diag(rot: &[Vec<f64>], d: &[f64]) -> Vec<Vec<f64>> {
    let p = d.len();
    let mut out = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            out[i][j] = (0..p).map(|k| rot[i][k] * d[k] * rot[j][k]).sum();
        }
    }
    out
}

/// Probust demo: g(t, x, z) = t·x₁ + (1−t)·x₂ + (0.5 + 0.5t)·z₁ + z₂ − 3 on
/// a seven-point grid over [0, 1]; n = m = 2.
pub fn probust_demo() -> ExampleSystem {
    let t_grid: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
    let row = |t: f64| vec![t, 1.0 - t, 0.5 + 0.5 * t, 1.0];
    let rows: Vec<Vec<f64>> = t_grid.iter().map(|&t| row(t)).collect();
    let offs = vec![-3.0; t_grid.len()];
    let sup = ConvexFunction::max_affine(rows, offs);
    let g = Arc::new(|t: f64, x: &[f64], z: &[f64]| {
        t * x[0] + (1.0 - t) * x[1] + (0.5 + 0.5 * t) * z[0] + z[1] - 3.0
    });
    let g_plus_h_subgrad = Arc::new(move |t: f64, _x: &[f64], _z: &[f64]| row(t));
    let scalarize = Arc::new(move |w: &[f64]| {
        let grid: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
        let mut a = vec![0.0; 4];
        for (wi, &t) in w.iter().zip(&grid) {
            let r = vec![t, 1.0 - t, 0.5 + 0.5 * t, 1.0];
            for (ai, ri) in a.iter_mut().zip(&r) {
                *ai += wi * ri;
            }
        }
        ConvexFunction::affine(a, -3.0)
    });
    let system = ConstraintSystem::probust(
        2,
        2,
        ConvexFunction::zero(2),
        ProbustComponents {
            t_grid,
            g,
            g_plus_h_subgrad,
            scalarize: Some(scalarize),
        },
        sup,
    );
    ExampleSystem {
        name: "probust_demo",
        system,
        anchor: vec![0.0, 0.0],
        sample_lo: vec![-2.0, -2.0],
        sample_hi: vec![2.0, 2.0],
    }
}

/// Scalarize builder for single-component joint systems: the only weight is
/// 1, so every scalarization is the vertex itself.
fn single_component_scalarize(
    vertex: ConvexFunction,
) -> Arc<dyn Fn(&[f64]) -> ConvexFunction + Send + Sync> {
    Arc::new(move |_w: &[f64]| vertex.clone())
}

/// All shipped example systems, in a fixed order.
pub fn all_systems() -> Vec<ExampleSystem> {
    vec![
        example_6_1(),
        example_6_2(),
        example_6_4(),
        example_5_2(),
        semidef_demo(),
        probust_demo(),
    ]
}

/// Look up a shipped system by registry name.
pub fn by_name(name: &str) -> Option<ExampleSystem> {
    match name {
        "example_6_1" => Some(example_6_1()),
        "example_6_2" => Some(example_6_2()),
        "example_6_4" => Some(example_6_4()),
        "example_5_2" => Some(example_5_2()),
        "semidef_demo" => Some(semidef_demo()),
        "probust_demo" => Some(probust_demo()),
        _ => None,
    }
}
