//! Effective (homogenized) conductivity tensors and their reference solutions.

use crate::field::ScalarField;
use crate::functions::SmoothTestFunction;
use crate::geometry::Mode;
use crate::mesh::GridSpec;
use crate::pde::{assemble, assemble_neumann, dot, pcg, solve_cg, PdeError, SolveStats, SourceSpec, Uniform};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomogenizedError {
    #[error("volume fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("gridwork fractions need m_3 = 0, got {0}")]
    GridworkThirdFraction(f64),
    #[error("an analytic reference needs a separable cosine source")]
    NonSeparableSource,
    #[error(transparent)]
    Solve(#[from] PdeError),
}

/// Diagonal effective conductivity `(A_1, A_2, A_3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveTensor {
    pub mode: Mode,
    pub a: f64,
    pub b: f64,
    pub m: [f64; 3],
    pub diag: [f64; 3],
}

const FRACTION_TOL: f64 = 1e-12;

/// `A_i = a + (b/3)(1 - m_i)` for reticulated structures, `a + (b/2)(1 - m_i)`
/// for gridworks.
pub fn effective_tensor(a: f64, b: f64, m: [f64; 3], mode: Mode) -> Result<EffectiveTensor, HomogenizedError> {
    if m.iter().any(|&x| !(x >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > FRACTION_TOL {
        return Err(HomogenizedError::BadFractions(m));
    }
    if mode == Mode::Gridwork && m[2] != 0.0 {
        return Err(HomogenizedError::GridworkThirdFraction(m[2]));
    }
    let weight = b / mode.family_count() as f64;
    let diag = m.map(|mi| a + weight * (1.0 - mi));
    Ok(EffectiveTensor { mode, a, b, m, diag })
}

impl EffectiveTensor {
    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    /// True iff all volume fractions coincide, which is exactly when the
    /// diagonal entries coincide.
    pub fn is_isotropic(&self) -> bool {
        let m = self.m;
        (m[0] - m[1]).abs() <= FRACTION_TOL && (m[1] - m[2]).abs() <= FRACTION_TOL
    }

    pub fn coefficient(&self) -> Uniform {
        Uniform(self.diag)
    }

    /// CSV header for [`EffectiveTensor::csv_row`].
    pub const CSV_HEADER: &'static str = "mode,a,b,m1,m2,m3,A1,A2,A3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.mode, self.a, self.b, self.m[0], self.m[1], self.m[2], self.diag[0], self.diag[1], self.diag[2]
        )
    }
}

/// Exact solution of `-sum_i A_i d_ii u = amplitude * prod cos(pi x_i)` with
/// zero boundary values: `u = amplitude / (pi^2 (A_1 + A_2 + A_3)) prod cos(pi x_i)`.
pub fn analytic_solution(tensor: &EffectiveTensor, source: &SourceSpec) -> Result<SmoothTestFunction, HomogenizedError> {
    match source {
        SourceSpec::Cosine { amplitude } => {
            Ok(SmoothTestFunction::separable_cosine(amplitude / (PI * PI * tensor.trace())))
        }
        SourceSpec::Constant(c) if *c == 0.0 => Ok(SmoothTestFunction::separable_cosine(0.0)),
        _ => Err(HomogenizedError::NonSeparableSource),
    }
}

/// Q1 Galerkin solve of the homogenized equation on any grid of the cube.
pub fn solve_homogenized<'g>(
    tensor: &EffectiveTensor,
    source: &SourceSpec,
    grid: &'g GridSpec,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(ScalarField<'g>, SolveStats), HomogenizedError> {
    let system = assemble(grid, &tensor.coefficient(), source);
    Ok(solve_cg(grid, &system, rel_tol, max_iter)?)
}

/// Energy `int A grad u . grad u` of the solution with boundary values
/// `u = x_axis` and no source. Lifts the boundary data and solves for the
/// interior correction.
pub fn unit_gradient_energy(
    tensor: &EffectiveTensor,
    axis: usize,
    grid: &GridSpec,
    rel_tol: f64,
    max_iter: usize,
) -> Result<f64, HomogenizedError> {
    let coeff = tensor.coefficient();
    let full = assemble_neumann(grid, &coeff);
    let interior = assemble(grid, &coeff, &SourceSpec::Constant(0.0));
    let lift: Vec<f64> = (0..grid.node_count())
        .map(|i| if grid.is_boundary_node(grid.node_ijk(i)) { grid.node_coord(grid.node_ijk(i))[axis] } else { 0.0 })
        .collect();
    let mut k_lift = vec![0.0; grid.node_count()];
    full.matvec(&lift, &mut k_lift);
    let rhs: Vec<f64> = interior.dof_nodes.iter().map(|&n| -k_lift[n]).collect();
    let (w, _) = pcg(&interior.matrix, &rhs, rel_tol, max_iter)?;
    let mut u = lift;
    for (&n, v) in interior.dof_nodes.iter().zip(&w) {
        u[n] = *v;
    }
    let mut ku = vec![0.0; u.len()];
    full.matvec(&u, &mut ku);
    Ok(dot(&u, &ku))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::Analytic;
    use crate::pde::{l2_error, l2_norm, Reference};
    use approx::assert_relative_eq;

    #[test]
    fn tensor_arithmetic() {
        let t = effective_tensor(1.0, 1.0, [1.0 / 3.0; 3], Mode::Reticulated).unwrap();
        for d in t.diag {
            assert_relative_eq!(d, 11.0 / 9.0, max_relative = 1e-15);
        }
        assert!(t.is_isotropic());
        let g = effective_tensor(1.0, 2.0, [0.5, 0.5, 0.0], Mode::Gridwork).unwrap();
        assert_eq!(g.diag, [1.5, 1.5, 2.0]);
        assert_eq!(g.diag[2] - g.diag[0], 2.0 / 4.0);
        assert_eq!(g.csv_row(), "gridwork,1.0,2.0,0.5,0.5,0.0,1.5,1.5,2.0");
        for mode in [Mode::Reticulated, Mode::Gridwork] {
            let m = if mode == Mode::Gridwork { [0.5, 0.5, 0.0] } else { [0.2, 0.3, 0.5] };
            assert_eq!(effective_tensor(1.3, 0.0, m, mode).unwrap().diag, [1.3; 3]);
        }
        let aniso = effective_tensor(1.0, 1.0, [0.5, 0.3, 0.2], Mode::Reticulated).unwrap();
        assert!(!aniso.is_isotropic());
    }

    #[test]
    fn anisotropic_tensor_gives_distinct_directional_energies() {
        let t = effective_tensor(1.0, 1.0, [0.5, 0.3, 0.2], Mode::Reticulated).unwrap();
        let grid = GridSpec::uniform(6);
        let e: Vec<f64> = (0..3).map(|i| unit_gradient_energy(&t, i, &grid, 1e-12, 500).unwrap()).collect();
        for i in 0..3 {
            // the linear solution is reproduced exactly, so the energy is A_i
            assert_relative_eq!(e[i], t.diag[i], max_relative = 1e-9);
        }
        assert!((e[0] - e[1]).abs() > 1e-6 && (e[1] - e[2]).abs() > 1e-6 && (e[0] - e[2]).abs() > 1e-6);
    }

    #[test]
    fn tensor_rejects_bad_fractions() {
        assert!(effective_tensor(1.0, 1.0, [0.5, 0.5, 0.5], Mode::Reticulated).is_err());
        assert!(effective_tensor(1.0, 1.0, [-0.1, 0.6, 0.5], Mode::Reticulated).is_err());
        assert!(matches!(
            effective_tensor(1.0, 1.0, [0.4, 0.4, 0.2], Mode::Gridwork),
            Err(HomogenizedError::GridworkThirdFraction(_))
        ));
    }

    #[test]
    fn analytic_solutions() {
        let unit = EffectiveTensor { mode: Mode::Reticulated, a: 1.0, b: 0.0, m: [1.0 / 3.0; 3], diag: [1.0; 3] };
        let u = analytic_solution(&unit, &SourceSpec::Cosine { amplitude: 3.0 * PI * PI }).unwrap();
        let x = [0.1, -0.2, 0.3];
        let expect = (PI * 0.1).cos() * (PI * 0.2).cos() * (PI * 0.3).cos();
        assert_relative_eq!(u.value(x), expect, max_relative = 1e-14);

        let t = effective_tensor(1.0, 1.0, [1.0 / 3.0; 3], Mode::Reticulated).unwrap();
        let u = analytic_solution(&t, &SourceSpec::Cosine { amplitude: 11.0 / 3.0 * PI * PI }).unwrap();
        assert_relative_eq!(u.value(x), expect, max_relative = 1e-14);

        let zero = analytic_solution(&t, &SourceSpec::Cosine { amplitude: 0.0 }).unwrap();
        assert_eq!(zero.value(x), 0.0);
        assert!(analytic_solution(&t, &SourceSpec::Constant(1.0)).is_err());
    }

    #[test]
    fn numeric_homogenized_solution_matches_analytic() {
        for t in [
            effective_tensor(1.0, 0.0, [1.0 / 3.0; 3], Mode::Reticulated).unwrap(),
            effective_tensor(1.0, 2.0, [0.5, 0.5, 0.0], Mode::Gridwork).unwrap(),
        ] {
            let f = SourceSpec::Cosine { amplitude: PI * PI * t.trace() };
            let exact = analytic_solution(&t, &f).unwrap();
            let err = |cells| {
                let grid = GridSpec::uniform(cells);
                let (u, _) = solve_homogenized(&t, &f, &grid, 1e-12, 2000).unwrap();
                l2_error(&u, Reference::Analytic(&exact)).unwrap()
            };
            let (e1, e2) = (err(8), err(16));
            let order = (e1 / e2).log2();
            assert!(order > 1.8 && order < 2.2, "order {order}");
        }
        let grid = GridSpec::uniform(4);
        let t = effective_tensor(1.0, 1.0, [1.0 / 3.0; 3], Mode::Reticulated).unwrap();
        let (u, _) = solve_homogenized(&t, &SourceSpec::Constant(0.0), &grid, 1e-10, 10).unwrap();
        assert_eq!(l2_norm(&u), 0.0);
    }
}
