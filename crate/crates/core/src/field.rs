//! Nodal fields on a [`GridSpec`] and the trilinear (Q1) element algebra they
//! share: local basis, closed-form cell matrices, and Gauss rules.

use crate::mesh::GridSpec;
use rayon::prelude::*;

/// Corner `a` of a cell has offset bits `(a & 1, (a >> 1) & 1, (a >> 2) & 1)`.
#[inline]
pub fn corner_bit(a: usize, axis: usize) -> usize {
    (a >> axis) & 1
}

/// 1D linear-element mass matrix on a cell of width `h`.
#[inline]
pub fn mass_1d(h: f64) -> [[f64; 2]; 2] {
    let d = h / 3.0;
    let o = h / 6.0;
    [[d, o], [o, d]]
}

/// 1D linear-element stiffness matrix on a cell of width `h`.
#[inline]
pub fn stiffness_1d(h: f64) -> [[f64; 2]; 2] {
    let d = 1.0 / h;
    [[d, -d], [-d, d]]
}

/// Row `a` of the Q1 stiffness matrix of a box cell with diagonal
/// conductivity `coeff`: `K_ab = sum_d coeff_d * k_d * m_e * m_f`.
///
/// The products are formed in a fixed order from symmetric 1D factors, so
/// `row(a)[b]` and `row(b)[a]` are bitwise equal.
#[inline]
pub fn stiffness_row(size: [f64; 3], coeff: [f64; 3], a: usize) -> [f64; 8] {
    let k = size.map(stiffness_1d);
    let m = size.map(mass_1d);
    let (ax, ay, az) = (corner_bit(a, 0), corner_bit(a, 1), corner_bit(a, 2));
    std::array::from_fn(|b| {
        let (bx, by, bz) = (corner_bit(b, 0), corner_bit(b, 1), corner_bit(b, 2));
        coeff[0] * (k[0][ax][bx] * m[1][ay][by] * m[2][az][bz])
            + coeff[1] * (m[0][ax][bx] * k[1][ay][by] * m[2][az][bz])
            + coeff[2] * (m[0][ax][bx] * m[1][ay][by] * k[2][az][bz])
    })
}

pub fn stiffness_matrix(size: [f64; 3], coeff: [f64; 3]) -> [[f64; 8]; 8] {
    std::array::from_fn(|a| stiffness_row(size, coeff, a))
}

pub fn mass_matrix(size: [f64; 3]) -> [[f64; 8]; 8] {
    let m = size.map(mass_1d);
    std::array::from_fn(|a| {
        std::array::from_fn(|b| {
            m[0][corner_bit(a, 0)][corner_bit(b, 0)]
                * m[1][corner_bit(a, 1)][corner_bit(b, 1)]
                * m[2][corner_bit(a, 2)][corner_bit(b, 2)]
        })
    })
}

/// `v^T M v` for a positive semidefinite element matrix. Round-off can push
/// the sum for a null vector slightly below zero; it is clamped to 0.
#[inline]
pub fn quadratic_form(m: &[[f64; 8]; 8], v: &[f64; 8]) -> f64 {
    let mut s = 0.0;
    for a in 0..8 {
        let mut row = 0.0;
        for b in 0..8 {
            row += m[a][b] * v[b];
        }
        s += v[a] * row;
    }
    s.max(0.0)
}

/// Trilinear shape functions at local coordinates `xi` in `[0,1]^3`.
#[inline]
pub fn shape(xi: [f64; 3]) -> [f64; 8] {
    std::array::from_fn(|a| {
        (0..3)
            .map(|d| if corner_bit(a, d) == 1 { xi[d] } else { 1.0 - xi[d] })
            .product()
    })
}

/// Physical gradients of the trilinear shape functions on a cell of `size`.
#[inline]
pub fn shape_grad(xi: [f64; 3], size: [f64; 3]) -> [[f64; 3]; 8] {
    std::array::from_fn(|a| {
        let f: [f64; 3] = std::array::from_fn(|d| if corner_bit(a, d) == 1 { xi[d] } else { 1.0 - xi[d] });
        let df: [f64; 3] =
            std::array::from_fn(|d| if corner_bit(a, d) == 1 { 1.0 / size[d] } else { -1.0 / size[d] });
        [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]]
    })
}

/// Gauss-Legendre rule on `[0,1]` with `order` points (2 or 3).
pub fn gauss_1d(order: usize) -> Vec<(f64, f64)> {
    match order {
        1 => vec![(0.5, 1.0)],
        2 => {
            let d = 0.5 / 3f64.sqrt();
            vec![(0.5 - d, 0.5), (0.5 + d, 0.5)]
        }
        3 => {
            let d = 0.5 * (0.6f64).sqrt();
            vec![(0.5 - d, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + d, 5.0 / 18.0)]
        }
        _ => panic!("unsupported Gauss order {order}"),
    }
}

/// Tensor Gauss rule on `[0,1]^3`: `(local point, weight)`.
pub fn gauss_3d(order: usize) -> Vec<([f64; 3], f64)> {
    let g = gauss_1d(order);
    let mut out = Vec::with_capacity(g.len().pow(3));
    for &(z, wz) in &g {
        for &(y, wy) in &g {
            for &(x, wx) in &g {
                out.push(([x, y, z], wx * wy * wz));
            }
        }
    }
    out
}

/// Sums `f(cell)` over all cells in cell-index order. Cells are processed in
/// parallel in fixed-size chunks whose partial sums are combined sequentially,
/// so the result is bit-reproducible regardless of thread count.
pub fn sum_over_cells<F>(grid: &GridSpec, f: F) -> f64
where
    F: Fn([usize; 3]) -> f64 + Sync,
{
    const CHUNK: usize = 4096;
    let cells = grid.cell_count();
    let partial: Vec<f64> = (0..cells.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cells);
            (lo..hi).map(|idx| f(grid.cell_ijk(idx))).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// Like [`sum_over_cells`] for several accumulators at once.
pub fn sum_over_cells_n<const N: usize, F>(grid: &GridSpec, f: F) -> [f64; N]
where
    F: Fn([usize; 3]) -> [f64; N] + Sync,
{
    const CHUNK: usize = 4096;
    let cells = grid.cell_count();
    let partial: Vec<[f64; N]> = (0..cells.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cells);
            let mut acc = [0.0; N];
            for idx in lo..hi {
                let v = f(grid.cell_ijk(idx));
                for k in 0..N {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; N];
    for p in &partial {
        for k in 0..N {
            total[k] += p[k];
        }
    }
    total
}

/// Nodal values on a grid. With `dirichlet` set, boundary nodes hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<'g> {
    grid: &'g GridSpec,
    values: Vec<f64>,
    dirichlet: bool,
}

impl<'g> ScalarField<'g> {
    pub fn new(grid: &'g GridSpec, values: Vec<f64>, dirichlet: bool) -> Self {
        assert_eq!(values.len(), grid.node_count(), "value count must equal node count");
        let mut field = Self { grid, values, dirichlet };
        if dirichlet {
            field.zero_boundary();
        }
        field
    }

    pub fn zeros(grid: &'g GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.node_count()], dirichlet: true }
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate<F>(grid: &'g GridSpec, f: F) -> Self
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let values = (0..grid.node_count())
            .into_par_iter()
            .map(|idx| f(grid.node_coord(grid.node_ijk(idx))))
            .collect();
        Self { grid, values, dirichlet: false }
    }

    /// Nodal interpolant with boundary values forced to 0.
    pub fn interpolate_dirichlet<F>(grid: &'g GridSpec, f: F) -> Self
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let mut field = Self::interpolate(grid, f);
        field.dirichlet = true;
        field.zero_boundary();
        field
    }

    fn zero_boundary(&mut self) {
        for idx in 0..self.values.len() {
            if self.grid.is_boundary_node(self.grid.node_ijk(idx)) {
                self.values[idx] = 0.0;
            }
        }
    }

    pub fn grid(&self) -> &'g GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dirichlet(&self) -> bool {
        self.dirichlet
    }

    pub fn at(&self, ijk: [usize; 3]) -> f64 {
        self.values[self.grid.node_index(ijk)]
    }

    pub fn cell_values(&self, cell: [usize; 3]) -> [f64; 8] {
        self.grid.cell_nodes(cell).map(|i| self.values[i])
    }

    /// Value at local coordinates `xi` of `cell`.
    pub fn eval_local(&self, cell: [usize; 3], xi: [f64; 3]) -> f64 {
        let v = self.cell_values(cell);
        shape(xi).iter().zip(&v).map(|(n, x)| n * x).sum()
    }

    /// Gradient at local coordinates `xi` of `cell`.
    pub fn grad_local(&self, cell: [usize; 3], xi: [f64; 3]) -> [f64; 3] {
        let v = self.cell_values(cell);
        let g = shape_grad(xi, self.grid.cell_size(cell));
        let mut out = [0.0; 3];
        for a in 0..8 {
            for d in 0..3 {
                out[d] += g[a][d] * v[a];
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| v * s).collect(), dirichlet: self.dirichlet }
    }

    /// Largest nodal magnitude.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Exact integral of `|u|^2` over the cells accepted by `keep`.
    pub fn integral_sq_where<P>(&self, keep: P) -> f64
    where
        P: Fn([usize; 3]) -> bool + Sync,
    {
        let grid = self.grid;
        sum_over_cells(grid, |cell| {
            if !keep(cell) {
                return 0.0;
            }
            quadratic_form(&mass_matrix(grid.cell_size(cell)), &self.cell_values(cell))
        })
    }

    /// Exact integral of `|grad u|^2` over the cells accepted by `keep`.
    pub fn grad_sq_where<P>(&self, keep: P) -> f64
    where
        P: Fn([usize; 3]) -> bool + Sync,
    {
        let grid = self.grid;
        sum_over_cells(grid, |cell| {
            if !keep(cell) {
                return 0.0;
            }
            quadratic_form(&stiffness_matrix(grid.cell_size(cell), [1.0; 3]), &self.cell_values(cell))
        })
    }

    /// Exact integral of `|d u / d x_axis|^2` over the cells accepted by `keep`.
    pub fn partial_sq_where<P>(&self, axis: usize, keep: P) -> f64
    where
        P: Fn([usize; 3]) -> bool + Sync,
    {
        let grid = self.grid;
        let mut coeff = [0.0; 3];
        coeff[axis] = 1.0;
        sum_over_cells(grid, |cell| {
            if !keep(cell) {
                return 0.0;
            }
            quadratic_form(&stiffness_matrix(grid.cell_size(cell), coeff), &self.cell_values(cell))
        })
    }
}
