//! Interface-aligned tensor-product grids.
//!
//! Every layer face `eps k +- r_i` (and, on request, every control face
//! `eps k +- R_i`) is an exact grid coordinate, as are the period edges
//! `eps (k + 1/2)`. Each grid cell therefore lies entirely inside or entirely
//! outside every slab, and material data can live on cells.

use crate::geometry::LatticeParams;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh configuration: {0}")]
    InvalidConfig(String),
    #[error("axis {axis} needs {nodes} nodes, budget is {budget}")]
    AxisBudget { axis: usize, nodes: usize, budget: usize },
    #[error("grid needs {nodes} nodes, budget is {budget}")]
    TotalBudget { nodes: usize, budget: usize },
    #[error("coordinate {coord} is not a grid plane on axis {axis}")]
    Unaligned { axis: usize, coord: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Boundary,
    LayerFace,
    ControlFace,
    /// Edge between two periods, `eps (k + 1/2)`.
    PeriodEdge,
    Fill,
}

impl NodeKind {
    pub fn is_interface(self) -> bool {
        matches!(self, NodeKind::LayerFace | NodeKind::ControlFace)
    }

    fn priority(self) -> u8 {
        match self {
            NodeKind::Boundary => 4,
            NodeKind::LayerFace => 3,
            NodeKind::ControlFace => 2,
            NodeKind::PeriodEdge => 1,
            NodeKind::Fill => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisGrid {
    coords: Vec<f64>,
    kinds: Vec<NodeKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub h_ambient: f64,
    pub min_cells_per_layer: usize,
    pub axis_node_budget: usize,
    pub total_node_budget: usize,
    pub include_control: bool,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            h_ambient: 0.025,
            min_cells_per_layer: 2,
            axis_node_budget: 400,
            total_node_budget: 8_000_000,
            include_control: false,
        }
    }
}

/// Adjacent-cell size ratio never exceeds this after balancing.
pub const MAX_GRADING: f64 = 2.0;
const SLACK: f64 = 1.0 + 1e-9;

impl AxisGrid {
    /// A uniform axis with `cells` cells on `[-1/2, 1/2]`.
    pub fn uniform(cells: usize) -> Self {
        assert!(cells >= 1);
        let coords: Vec<f64> = (0..=cells)
            .map(|j| (2 * j as i64 - cells as i64) as f64 / (2 * cells) as f64)
            .collect();
        let mut kinds = vec![NodeKind::Fill; cells + 1];
        kinds[0] = NodeKind::Boundary;
        kinds[cells] = NodeKind::Boundary;
        Self { coords, kinds }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn cells(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn width(&self, cell: usize) -> f64 {
        self.coords[cell + 1] - self.coords[cell]
    }

    pub fn center(&self, cell: usize) -> f64 {
        0.5 * (self.coords[cell] + self.coords[cell + 1])
    }

    /// Index of the node at `x`, if `x` is a grid coordinate (to 1e-12).
    pub fn find(&self, x: f64) -> Option<usize> {
        let idx = self.coords.partition_point(|&c| c < x - 1e-12);
        (idx < self.coords.len() && (self.coords[idx] - x).abs() <= 1e-12).then_some(idx)
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.coords.windows(2).map(|w| w[1] - w[0])
    }
}

fn push_mandatory(points: &mut Vec<(f64, NodeKind)>, x: f64, kind: NodeKind) {
    points.push((x, kind));
}

/// Builds the axis grid for `axis` of `lat`.
///
/// Mandatory coordinates are the cube faces, period edges, layer faces with
/// `min_cells_per_layer` uniform cells inside each layer, and optionally the
/// control faces. Cells are then bisected until every cell is at most
/// `h_ambient` wide and no cell is more than twice as wide as a neighbour.
pub fn build_axis_grid(
    lat: &LatticeParams,
    axis: usize,
    h_ambient: f64,
    min_cells_per_layer: usize,
    include_control: bool,
    node_budget: usize,
) -> Result<AxisGrid, MeshError> {
    let eps = lat.epsilon();
    if !(h_ambient > 0.0 && h_ambient <= 0.5 * eps * SLACK) {
        return Err(MeshError::InvalidConfig(format!(
            "h_ambient = {h_ambient} must lie in (0, eps/2 = {}]",
            0.5 * eps
        )));
    }
    if min_cells_per_layer < 2 {
        return Err(MeshError::InvalidConfig("min_cells_per_layer must be at least 2".into()));
    }
    let periods = lat.periods() as i64;
    let mut pts: Vec<(f64, NodeKind)> = Vec::new();
    for j in (-periods..=periods).step_by(2) {
        let kind = if j.abs() == periods { NodeKind::Boundary } else { NodeKind::PeriodEdge };
        push_mandatory(&mut pts, j as f64 / (2 * periods) as f64, kind);
    }
    let r = lat.r()[axis];
    let m = min_cells_per_layer as i64;
    for k in lat.plane_indices() {
        let c = lat.plane(k);
        if r > 0.0 {
            for j in 0..=m {
                let t = (2 * j - m) as f64 * r / m as f64;
                let kind = if j == 0 || j == m { NodeKind::LayerFace } else { NodeKind::Fill };
                // Faces are written as c - r and c + r exactly, matching how
                // the operators locate them.
                let x = match j {
                    0 => c - r,
                    _ if j == m => c + r,
                    _ => c + t,
                };
                push_mandatory(&mut pts, x, kind);
            }
            if include_control {
                let rc = lat.control()[axis];
                push_mandatory(&mut pts, c - rc, NodeKind::ControlFace);
                push_mandatory(&mut pts, c + rc, NodeKind::ControlFace);
            }
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut coords: Vec<f64> = Vec::with_capacity(pts.len());
    let mut kinds: Vec<NodeKind> = Vec::with_capacity(pts.len());
    for (x, kind) in pts {
        match coords.last() {
            Some(&last) if (x - last).abs() <= 1e-14 => {
                let top = kinds.last_mut().expect("non-empty");
                if kind.priority() > top.priority() {
                    *top = kind;
                }
            }
            _ => {
                coords.push(x);
                kinds.push(kind);
            }
        }
    }

    loop {
        let widths: Vec<f64> = coords.windows(2).map(|w| w[1] - w[0]).collect();
        let split: Vec<bool> = (0..widths.len())
            .map(|c| {
                let w = widths[c];
                let left = if c > 0 { widths[c - 1] } else { f64::INFINITY };
                let right = widths.get(c + 1).copied().unwrap_or(f64::INFINITY);
                w > h_ambient * SLACK || w > MAX_GRADING * left.min(right) * SLACK
            })
            .collect();
        if !split.iter().any(|&s| s) {
            break;
        }
        let mut new_coords = Vec::with_capacity(coords.len() * 2);
        let mut new_kinds = Vec::with_capacity(coords.len() * 2);
        for c in 0..widths.len() {
            new_coords.push(coords[c]);
            new_kinds.push(kinds[c]);
            if split[c] {
                new_coords.push(0.5 * (coords[c] + coords[c + 1]));
                new_kinds.push(NodeKind::Fill);
            }
        }
        new_coords.push(*coords.last().expect("non-empty"));
        new_kinds.push(*kinds.last().expect("non-empty"));
        coords = new_coords;
        kinds = new_kinds;
        if coords.len() > node_budget {
            return Err(MeshError::AxisBudget { axis, nodes: coords.len(), budget: node_budget });
        }
    }
    if coords.len() > node_budget {
        return Err(MeshError::AxisBudget { axis, nodes: coords.len(), budget: node_budget });
    }
    Ok(AxisGrid { coords, kinds })
}

/// Tensor product of three axis grids. Nodes are numbered with the first axis
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    axes: [AxisGrid; 3],
}

pub fn build_grid(lat: &LatticeParams, config: &MeshConfig) -> Result<GridSpec, MeshError> {
    let mut axes = Vec::with_capacity(3);
    for axis in 0..3 {
        axes.push(build_axis_grid(
            lat,
            axis,
            config.h_ambient,
            config.min_cells_per_layer,
            config.include_control,
            config.axis_node_budget,
        )?);
    }
    let axes: [AxisGrid; 3] = axes.try_into().expect("three axes");
    let grid = GridSpec { axes };
    if grid.node_count() > config.total_node_budget {
        return Err(MeshError::TotalBudget { nodes: grid.node_count(), budget: config.total_node_budget });
    }
    Ok(grid)
}

impl GridSpec {
    pub fn new(axes: [AxisGrid; 3]) -> Self {
        Self { axes }
    }

    pub fn uniform(cells: usize) -> Self {
        Self::new([AxisGrid::uniform(cells), AxisGrid::uniform(cells), AxisGrid::uniform(cells)])
    }

    pub fn axis(&self, axis: usize) -> &AxisGrid {
        &self.axes[axis]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.axes[0].nodes(), self.axes[1].nodes(), self.axes[2].nodes()]
    }

    pub fn cell_dims(&self) -> [usize; 3] {
        [self.axes[0].cells(), self.axes[1].cells(), self.axes[2].cells()]
    }

    pub fn node_count(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.cell_dims().iter().product()
    }

    /// Interior (non-boundary) node count: the unknowns after Dirichlet
    /// elimination.
    pub fn dofs(&self) -> usize {
        self.dims().iter().map(|&d| d.saturating_sub(2)).product()
    }

    #[inline]
    pub fn node_index(&self, ijk: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims();
        ijk[0] + nx * (ijk[1] + ny * ijk[2])
    }

    #[inline]
    pub fn node_ijk(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims();
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn cell_index(&self, ijk: [usize; 3]) -> usize {
        let [cx, cy, _] = self.cell_dims();
        ijk[0] + cx * (ijk[1] + cy * ijk[2])
    }

    #[inline]
    pub fn cell_ijk(&self, idx: usize) -> [usize; 3] {
        let [cx, cy, _] = self.cell_dims();
        [idx % cx, (idx / cx) % cy, idx / (cx * cy)]
    }

    pub fn node_coord(&self, ijk: [usize; 3]) -> [f64; 3] {
        [self.axes[0].coords[ijk[0]], self.axes[1].coords[ijk[1]], self.axes[2].coords[ijk[2]]]
    }

    pub fn is_boundary_node(&self, ijk: [usize; 3]) -> bool {
        let dims = self.dims();
        (0..3).any(|a| ijk[a] == 0 || ijk[a] + 1 == dims[a])
    }

    pub fn cell_center(&self, ijk: [usize; 3]) -> [f64; 3] {
        [self.axes[0].center(ijk[0]), self.axes[1].center(ijk[1]), self.axes[2].center(ijk[2])]
    }

    pub fn cell_size(&self, ijk: [usize; 3]) -> [f64; 3] {
        [self.axes[0].width(ijk[0]), self.axes[1].width(ijk[1]), self.axes[2].width(ijk[2])]
    }

    /// Lower corner of a cell.
    pub fn cell_origin(&self, ijk: [usize; 3]) -> [f64; 3] {
        self.node_coord(ijk)
    }

    /// Global node indices of the eight corners of a cell, local corner `a`
    /// having offsets `(a & 1, (a >> 1) & 1, (a >> 2) & 1)`.
    pub fn cell_nodes(&self, ijk: [usize; 3]) -> [usize; 8] {
        std::array::from_fn(|a| {
            self.node_index([ijk[0] + (a & 1), ijk[1] + ((a >> 1) & 1), ijk[2] + ((a >> 2) & 1)])
        })
    }

    /// Node index of a plane coordinate on `axis`, or an alignment error.
    pub fn plane_index(&self, axis: usize, x: f64) -> Result<usize, MeshError> {
        self.axes[axis].find(x).ok_or(MeshError::Unaligned { axis, coord: x })
    }

    /// CSV dump with header `axis,index,coord,is_interface` (axes 1-based).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,index,coord,is_interface\n");
        for (a, ax) in self.axes.iter().enumerate() {
            for (i, (x, kind)) in ax.coords.iter().zip(&ax.kinds).enumerate() {
                writeln!(out, "{},{},{},{}", a + 1, i, x, kind.is_interface()).expect("write to string");
            }
        }
        out
    }
}
