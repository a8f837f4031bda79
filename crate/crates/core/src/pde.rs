//! Fine-scale high-contrast conduction: per-cell conductivity, Q1 Galerkin
//! assembly on box cells, Jacobi-preconditioned conjugate gradients, norms.
//!
//! The weak problem is `a int_{Omega \ T} grad u . grad v + (b/|T|) int_T grad u . grad v = <f, v>`
//! with `u = 0` on the cube boundary. Because the grid is interface-aligned,
//! the coefficient is constant on every cell and the stiffness matrix is
//! integrated exactly.

use crate::field::{gauss_3d, mass_matrix, quadratic_form, shape, stiffness_matrix, stiffness_row, ScalarField};
use crate::functions::{Analytic, SmoothTestFunction};
use crate::geometry::{in_union, measures, LatticeParams};
use crate::mesh::GridSpec;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("conductivities must be positive (a = {a}, b = {b})")]
    NonPositiveConductivity { a: f64, b: f64 },
    #[error("CG did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
}

/// Diagonal conductivity per cell.
pub trait Coefficient: Sync {
    fn diag(&self, cell: usize) -> [f64; 3];
}

/// Constant diagonal conductivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform(pub [f64; 3]);

impl Coefficient for Uniform {
    fn diag(&self, _cell: usize) -> [f64; 3] {
        self.0
    }
}

/// `a` outside the layers, `b / |T|` inside, one value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    values: Vec<f64>,
    a: f64,
    b: f64,
    union_measure: f64,
}

impl ConductivityField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer_value(&self) -> f64 {
        self.b / self.union_measure
    }

    /// `(b / |T|) / a`
    pub fn contrast(&self) -> f64 {
        self.layer_value() / self.a
    }

    pub fn ambient(&self) -> f64 {
        self.a
    }

    /// `int sigma`, exactly `a (1 - |T|) + b` on an aligned grid.
    pub fn total_mass(&self, grid: &GridSpec) -> f64 {
        crate::field::sum_over_cells(grid, |c| {
            let s = grid.cell_size(c);
            self.values[grid.cell_index(c)] * s[0] * s[1] * s[2]
        })
    }
}

impl Coefficient for ConductivityField {
    fn diag(&self, cell: usize) -> [f64; 3] {
        [self.values[cell]; 3]
    }
}

/// Classifies each cell by its centre, which is exact on an aligned grid.
pub fn conductivity_field(
    lat: &LatticeParams,
    a: f64,
    b: f64,
    grid: &GridSpec,
) -> Result<ConductivityField, PdeError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(PdeError::NonPositiveConductivity { a, b });
    }
    let union_measure = measures(lat).union;
    let layer = b / union_measure;
    let values = (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| if in_union(grid.cell_center(grid.cell_ijk(idx)), lat) { layer } else { a })
        .collect();
    Ok(ConductivityField { values, a, b, union_measure })
}

/// Right-hand side of the conduction problem.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    Constant(f64),
    /// `amplitude * cos(pi x_1) cos(pi x_2) cos(pi x_3)`
    Cosine { amplitude: f64 },
    Smooth(SmoothTestFunction),
}

impl SourceSpec {
    pub fn value(&self, x: [f64; 3]) -> f64 {
        match self {
            SourceSpec::Constant(c) => *c,
            SourceSpec::Cosine { amplitude } => {
                amplitude * (PI * x[0]).cos() * (PI * x[1]).cos() * (PI * x[2]).cos()
            }
            SourceSpec::Smooth(f) => f.value(x),
        }
    }

    pub fn scaled(&self, s: f64) -> SourceSpec {
        match self {
            SourceSpec::Constant(c) => SourceSpec::Constant(c * s),
            SourceSpec::Cosine { amplitude } => SourceSpec::Cosine { amplitude: amplitude * s },
            SourceSpec::Smooth(f) => {
                let terms = f
                    .terms()
                    .iter()
                    .map(|t| crate::functions::Term { coef: t.coef * s, factors: t.factors })
                    .collect();
                SourceSpec::Smooth(SmoothTestFunction::new(f.name(), terms, f.cutoff()))
            }
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in a {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows: a.len(), row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].iter().zip(&self.values[lo..hi]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// Off-diagonal entries summed in column order, then the diagonal.
    pub fn row_sum(&self, i: usize) -> f64 {
        let mut diag = 0.0;
        let mut off = 0.0;
        for (j, v) in self.row(i) {
            if j == i {
                diag += v;
            } else {
                off += v;
            }
        }
        off + diag
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`, rows in parallel, each row summed sequentially.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().with_min_len(1024).for_each(|(i, yi)| {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut s = 0.0;
            for k in lo..hi {
                s += self.values[k] * x[self.col_idx[k] as usize];
            }
            *yi = s;
        });
    }

    /// Bitwise symmetry check.
    pub fn is_symmetric(&self) -> bool {
        (0..self.nrows).into_par_iter().all(|i| self.row(i).all(|(j, v)| self.get(j, i).to_bits() == v.to_bits()))
    }
}

/// Stiffness matrix and load vector after Dirichlet elimination.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Node index of each unknown.
    pub dof_nodes: Vec<usize>,
}

const ROW_CHUNK: usize = 2048;

/// Builds CSR rows for `rows` (node indices), keeping only columns accepted
/// by `col_of`. Each row gathers from its adjacent cells in ascending cell
/// order, so entry `(p, q)` and `(q, p)` accumulate the same terms in the same
/// order and the matrix is symmetric to the last bit.
fn gather_rows<C, M>(grid: &GridSpec, coeff: &C, rows: &[usize], col_of: M) -> CsrMatrix
where
    C: Coefficient + ?Sized,
    M: Fn(usize) -> Option<u32> + Sync,
{
    let dims = grid.dims();
    let cdims = grid.cell_dims();
    let chunks: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = rows
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut lens = Vec::with_capacity(chunk.len());
            let mut cols = Vec::with_capacity(chunk.len() * 27);
            let mut vals = Vec::with_capacity(chunk.len() * 27);
            for &node in chunk {
                let p = grid.node_ijk(node);
                // 3x3x3 neighbourhood, local offset o in {0,1,2}^3 for node p + o - 1
                let mut entry = [0.0f64; 27];
                let mut present = [false; 27];
                for cz in 0..2usize {
                    for cy in 0..2usize {
                        for cx in 0..2usize {
                            let c = [p[0] + cx, p[1] + cy, p[2] + cz];
                            if c.iter().zip(&cdims).any(|(&ci, &n)| ci == 0 || ci > n) {
                                continue;
                            }
                            let cell = [c[0] - 1, c[1] - 1, c[2] - 1];
                            // local corner of p within this cell
                            let a = (1 - cx) | ((1 - cy) << 1) | ((1 - cz) << 2);
                            let row = stiffness_row(grid.cell_size(cell), coeff.diag(grid.cell_index(cell)), a);
                            for (b, &kv) in row.iter().enumerate() {
                                let o = [
                                    cell[0] + (b & 1) + 1 - p[0],
                                    cell[1] + ((b >> 1) & 1) + 1 - p[1],
                                    cell[2] + ((b >> 2) & 1) + 1 - p[2],
                                ];
                                let slot = o[0] + 3 * (o[1] + 3 * o[2]);
                                entry[slot] += kv;
                                present[slot] = true;
                            }
                        }
                    }
                }
                // The diagonal is stored as minus the off-diagonal sum, so the
                // full row sums to exactly zero in the order of `row_sum`.
                let mut off = 0.0;
                for slot in (0..27).filter(|&s| s != 13 && present[s]) {
                    off += entry[slot];
                }
                entry[13] = -off;
                let mut len = 0;
                for slot in 0..27 {
                    if !present[slot] {
                        continue;
                    }
                    let q = [p[0] + slot % 3 - 1, p[1] + (slot / 3) % 3 - 1, p[2] + slot / 9 - 1];
                    debug_assert!(q.iter().zip(&dims).all(|(&x, &n)| x < n));
                    if let Some(col) = col_of(grid.node_index(q)) {
                        cols.push(col);
                        vals.push(entry[slot]);
                        len += 1;
                    }
                }
                lens.push(len);
            }
            (lens, cols, vals)
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    row_ptr.push(0);
    let total: usize = chunks.iter().map(|c| c.1.len()).sum();
    let mut col_idx = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for (lens, cols, vals) in chunks {
        for l in lens {
            row_ptr.push(row_ptr.last().expect("non-empty") + l);
        }
        col_idx.extend(cols);
        values.extend(vals);
    }
    // Slots are visited in neighbourhood order, which is ascending node order.
    CsrMatrix { nrows: rows.len(), row_ptr, col_idx, values }
}

/// Full stiffness matrix without boundary conditions.
pub fn assemble_neumann<C: Coefficient + ?Sized>(grid: &GridSpec, coeff: &C) -> CsrMatrix {
    let rows: Vec<usize> = (0..grid.node_count()).collect();
    gather_rows(grid, coeff, &rows, |q| Some(q as u32))
}

/// Per-cell load contributions `int_cell f N_a` with the 2x2x2 Gauss rule.
fn cell_loads(grid: &GridSpec, f: &SourceSpec) -> Vec<[f64; 8]> {
    let rule = gauss_3d(2);
    (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let cell = grid.cell_ijk(idx);
            let o = grid.cell_origin(cell);
            let s = grid.cell_size(cell);
            let vol = s[0] * s[1] * s[2];
            let mut out = [0.0; 8];
            for (xi, w) in &rule {
                let x = [o[0] + xi[0] * s[0], o[1] + xi[1] * s[1], o[2] + xi[2] * s[2]];
                let fv = f.value(x) * w * vol;
                if fv == 0.0 {
                    continue;
                }
                let n = shape(*xi);
                for a in 0..8 {
                    out[a] += fv * n[a];
                }
            }
            out
        })
        .collect()
}

/// Q1 Galerkin system with homogeneous Dirichlet rows and columns removed.
pub fn assemble<C: Coefficient + ?Sized>(grid: &GridSpec, coeff: &C, f: &SourceSpec) -> SparseSystem {
    let n = grid.node_count();
    let mut node_to_dof = vec![u32::MAX; n];
    let mut dof_nodes = Vec::with_capacity(grid.dofs());
    for idx in 0..n {
        if !grid.is_boundary_node(grid.node_ijk(idx)) {
            node_to_dof[idx] = dof_nodes.len() as u32;
            dof_nodes.push(idx);
        }
    }
    let matrix = gather_rows(grid, coeff, &dof_nodes, |q| {
        let d = node_to_dof[q];
        (d != u32::MAX).then_some(d)
    });
    let loads = cell_loads(grid, f);
    let cdims = grid.cell_dims();
    let rhs = dof_nodes
        .par_iter()
        .map(|&node| {
            let p = grid.node_ijk(node);
            let mut s = 0.0;
            for cz in 0..2usize {
                for cy in 0..2usize {
                    for cx in 0..2usize {
                        let c = [p[0] + cx, p[1] + cy, p[2] + cz];
                        if c.iter().zip(&cdims).any(|(&ci, &n)| ci == 0 || ci > n) {
                            continue;
                        }
                        let cell = [c[0] - 1, c[1] - 1, c[2] - 1];
                        let a = (1 - cx) | ((1 - cy) << 1) | ((1 - cz) << 2);
                        s += loads[grid.cell_index(cell)][a];
                    }
                }
            }
            s
        })
        .collect();
    SparseSystem { matrix, rhs, dof_nodes }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub dofs: usize,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` recomputed from the returned iterate.
    pub final_residual: f64,
}

/// Fixed-chunk parallel dot product; bit-reproducible.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    const CHUNK: usize = 8192;
    let partial: Vec<f64> = x
        .par_chunks(CHUNK)
        .zip(y.par_chunks(CHUNK))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
pub fn pcg(a: &CsrMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats), PdeError> {
    let n = a.nrows;
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((x, SolveStats { dofs: n, iterations: 0, final_residual: 0.0 }));
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut res = 1.0;
    while iterations < max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        iterations += 1;
        res = dot(&r, &r).sqrt() / b_norm;
        if res <= rel_tol {
            break;
        }
        z.par_iter_mut().zip(&r).zip(&inv_diag).for_each(|((z, r), d)| *z = r * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    a.matvec(&x, &mut ap);
    let true_res: Vec<f64> = b.iter().zip(&ap).map(|(b, ax)| b - ax).collect();
    let final_residual = dot(&true_res, &true_res).sqrt() / b_norm;
    if res > rel_tol {
        return Err(PdeError::NotConverged { iterations, residual: final_residual });
    }
    Ok((x, SolveStats { dofs: n, iterations, final_residual }))
}

/// Solves an assembled system and scatters the result to a nodal field with
/// zero boundary values.
pub fn solve_cg<'g>(
    grid: &'g GridSpec,
    system: &SparseSystem,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(ScalarField<'g>, SolveStats), PdeError> {
    let (x, stats) = pcg(&system.matrix, &system.rhs, rel_tol, max_iter)?;
    let mut values = vec![0.0; grid.node_count()];
    for (v, &node) in x.iter().zip(&system.dof_nodes) {
        values[node] = *v;
    }
    Ok((ScalarField::new(grid, values, true), stats))
}

pub const DEFAULT_REL_TOL: f64 = 1e-10;

pub fn l2_norm(u: &ScalarField) -> f64 {
    u.integral_sq_where(|_| true).sqrt()
}

pub fn h1_seminorm(u: &ScalarField) -> f64 {
    u.grad_sq_where(|_| true).sqrt()
}

/// Reference for error norms.
pub enum Reference<'a, 'g> {
    Field(&'a ScalarField<'g>),
    Analytic(&'a dyn Analytic),
}

/// `||u - reference||_{L^2}`. Field references are integrated exactly; analytic
/// ones with a 3x3x3 Gauss rule per cell.
pub fn l2_error(u: &ScalarField, reference: Reference) -> Result<f64, PdeError> {
    let grid = u.grid();
    match reference {
        Reference::Field(v) => {
            if !std::ptr::eq(v.grid(), grid) && v.grid() != grid {
                return Err(PdeError::GridMismatch);
            }
            let s = crate::field::sum_over_cells(grid, |c| {
                let a = u.cell_values(c);
                let b = v.cell_values(c);
                let d: [f64; 8] = std::array::from_fn(|i| a[i] - b[i]);
                quadratic_form(&mass_matrix(grid.cell_size(c)), &d)
            });
            Ok(s.sqrt())
        }
        Reference::Analytic(f) => {
            let rule = gauss_3d(3);
            let s = crate::field::sum_over_cells(grid, |c| {
                let o = grid.cell_origin(c);
                let h = grid.cell_size(c);
                let vol = h[0] * h[1] * h[2];
                rule.iter()
                    .map(|(xi, w)| {
                        let x = [o[0] + xi[0] * h[0], o[1] + xi[1] * h[1], o[2] + xi[2] * h[2]];
                        let d = u.eval_local(c, *xi) - f.value(x);
                        w * vol * d * d
                    })
                    .sum()
            });
            Ok(s.sqrt())
        }
    }
}

/// `|u - reference|_{H^1}` against an analytic gradient (3x3x3 Gauss).
pub fn h1_error(u: &ScalarField, reference: &dyn Analytic) -> f64 {
    let grid = u.grid();
    let rule = gauss_3d(3);
    crate::field::sum_over_cells(grid, |c| {
        let o = grid.cell_origin(c);
        let h = grid.cell_size(c);
        let vol = h[0] * h[1] * h[2];
        rule.iter()
            .map(|(xi, w)| {
                let x = [o[0] + xi[0] * h[0], o[1] + xi[1] * h[1], o[2] + xi[2] * h[2]];
                let g = u.grad_local(c, *xi);
                let e = reference.grad(x);
                let d = [g[0] - e[0], g[1] - e[1], g[2] - e[2]];
                w * vol * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            })
            .sum()
    })
    .sqrt()
}

/// Energy `u . (A u)` of a nodal field for the given coefficient, computed
/// cell by cell, split into the three directional parts
/// `int sigma_d (d u / d x_d)^2`.
pub fn directional_energies<C: Coefficient + ?Sized>(u: &ScalarField, coeff: &C) -> [f64; 3] {
    let grid = u.grid();
    crate::field::sum_over_cells_n(grid, |c| {
        let v = u.cell_values(c);
        let s = grid.cell_size(c);
        let k = coeff.diag(grid.cell_index(c));
        std::array::from_fn(|d| {
            let mut unit = [0.0; 3];
            unit[d] = k[d];
            quadratic_form(&stiffness_matrix(s, unit), &v)
        })
    })
}

/// CSV dump `ix,iy,iz,x,y,z,value`.
pub fn solution_csv(u: &ScalarField) -> String {
    let grid = u.grid();
    let mut out = String::from("ix,iy,iz,x,y,z,value\n");
    for (idx, v) in u.values().iter().enumerate() {
        let ijk = grid.node_ijk(idx);
        let x = grid.node_coord(ijk);
        writeln!(out, "{},{},{},{},{},{},{}", ijk[0], ijk[1], ijk[2], x[0], x[1], x[2], v).expect("write");
    }
    out
}

/// Stats line `dofs,iters,final_residual,contrast` with header.
pub fn stats_csv(stats: &SolveStats, contrast: f64) -> String {
    format!(
        "dofs,iters,final_residual,contrast\n{},{},{:e},{}\n",
        stats.dofs, stats.iterations, stats.final_residual, contrast
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_lattice, Mode};
    use crate::mesh::{build_grid, MeshConfig};
    use approx::assert_relative_eq;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        // Gaussian elimination with partial pivoting.
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| {
            let mut r = r.clone();
            r.push(bi);
            r
        }).collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
            m.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        x
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let a = CsrMatrix::from_dense(&eye);
        let b = vec![1.0, -2.0, 3.0, 0.5];
        let (x, stats) = pcg(&a, &b, 1e-12, 10).unwrap();
        assert_eq!(stats.iterations, 1);
        assert_eq!(x, b);
    }

    #[test]
    fn five_by_five_matches_dense_oracle() {
        let a = vec![
            vec![10.0, 1.0, 2.0, 0.0, 1.0],
            vec![1.0, 8.0, 0.5, 1.0, 0.0],
            vec![2.0, 0.5, 9.0, 0.3, 0.2],
            vec![0.0, 1.0, 0.3, 7.0, 1.5],
            vec![1.0, 0.0, 0.2, 1.5, 6.0],
        ];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let (x, _) = pcg(&CsrMatrix::from_dense(&a), &b, 1e-14, 100).unwrap();
        let oracle = dense_solve(&a, &b);
        for (u, v) in x.iter().zip(&oracle) {
            assert!((u - v).abs() <= 1e-9, "{u} vs {v}");
        }
    }

    #[test]
    fn max_iter_reports_non_convergence() {
        let grid = GridSpec::uniform(8);
        let sys = assemble(&grid, &Uniform([1.0; 3]), &SourceSpec::Constant(1.0));
        let err = pcg(&sys.matrix, &sys.rhs, 1e-12, 2).unwrap_err();
        assert!(matches!(err, PdeError::NotConverged { iterations: 2, .. }));
    }

    #[test]
    fn neumann_rows_sum_to_zero() {
        let lat = make_lattice(1, [0.01; 3], [0.05; 3], Mode::Reticulated).unwrap();
        let grid = build_grid(&lat, &MeshConfig { h_ambient: 0.1, ..Default::default() }).unwrap();
        let a = assemble_neumann(&grid, &Uniform([1.0; 3]));
        for i in 0..a.nrows {
            assert_eq!(a.row_sum(i), 0.0, "row {i}");
            // any summation order is zero up to round-off
            let s: f64 = a.row(i).map(|(_, v)| v).sum();
            assert!(s.abs() <= 1e-13 * a.get(i, i), "row {i}: {s}");
        }
        assert!(a.is_symmetric());
    }

    #[test]
    fn conductivity_examples() {
        let lat = make_lattice(1, [0.01; 3], [0.05; 3], Mode::Reticulated).unwrap();
        let grid = build_grid(&lat, &MeshConfig { h_ambient: 0.1, ..Default::default() }).unwrap();
        let sigma = conductivity_field(&lat, 1.0, 1.0, &grid).unwrap();
        assert_relative_eq!(sigma.layer_value(), 1.0 / 0.169416, max_relative = 1e-12);
        assert_relative_eq!(sigma.layer_value(), 5.902630, max_relative = 1e-6);
        assert_relative_eq!(sigma.total_mass(&grid), (1.0 - 0.169416) + 1.0, max_relative = 1e-12);
        let uniform = conductivity_field(&lat, 2.0, 2.0 * 0.169416, &grid).unwrap();
        assert!(uniform.values().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(conductivity_field(&lat, 0.0, 1.0, &grid).is_err());
        assert!(conductivity_field(&lat, 1.0, -1.0, &grid).is_err());
    }

    #[test]
    fn zero_source_gives_zero_rhs_and_solution() {
        let grid = GridSpec::uniform(4);
        let sys = assemble(&grid, &Uniform([1.0; 3]), &SourceSpec::Constant(0.0));
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
        let (u, stats) = solve_cg(&grid, &sys, 1e-10, 10).unwrap();
        assert_eq!(stats.iterations, 0);
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn norms_of_simple_fields() {
        let grid = GridSpec::uniform(8);
        assert_relative_eq!(l2_norm(&ScalarField::interpolate(&grid, |_| 1.0)), 1.0, max_relative = 1e-14);
        let x = ScalarField::interpolate(&grid, |p| p[0]);
        assert_relative_eq!(l2_norm(&x).powi(2), 1.0 / 12.0, max_relative = 1e-13);
        assert_relative_eq!(h1_seminorm(&x), 1.0, max_relative = 1e-13);
    }

    #[test]
    fn h1_seminorm_of_cosine_tends_to_pi_squared_over_two() {
        let err = |cells: usize| {
            let grid = GridSpec::uniform(cells);
            let u = ScalarField::interpolate(&grid, |p| (PI * p[0]).cos());
            (h1_seminorm(&u).powi(2) - PI * PI / 2.0).abs()
        };
        let (e1, e2) = (err(8), err(16));
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
        assert!(e2 < 0.02);
    }

    #[test]
    fn solve_is_linear_and_energy_consistent() {
        let grid = GridSpec::uniform(10);
        let f = SourceSpec::Cosine { amplitude: 3.0 * PI * PI };
        let sys = assemble(&grid, &Uniform([1.0; 3]), &f);
        let (u, _) = solve_cg(&grid, &sys, 1e-12, 1000).unwrap();
        let sys2 = assemble(&grid, &Uniform([1.0; 3]), &f.scaled(2.0));
        let (u2, _) = solve_cg(&grid, &sys2, 1e-12, 1000).unwrap();
        for (a, b) in u.values().iter().zip(u2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let x: Vec<f64> = sys.dof_nodes.iter().map(|&n| u.values()[n]).collect();
        let mut ax = vec![0.0; x.len()];
        sys.matrix.matvec(&x, &mut ax);
        let (uau, ub) = (dot(&x, &ax), dot(&x, &sys.rhs));
        assert!((uau - ub).abs() <= 1e-8 * ub.abs());
    }
}
