//! Heat conduction through media reinforced by thin, highly conductive
//! periodic layers: geometry of the layer lattice, interface-aligned grids,
//! the fine-scale finite element problem, the homogenized limit problems, and
//! numerical checks of the analytical operators used to connect them.

pub mod field;
pub mod functions;
pub mod geometry;
pub mod harness;
pub mod homogenized;
pub mod mesh;
pub mod operators;
pub mod pde;

pub use field::ScalarField;
pub use functions::{Analytic, SmoothTestFunction};
pub use geometry::{make_lattice, LatticeParams, MeasureReport, Mode, Region};
pub use homogenized::{effective_tensor, EffectiveTensor};
pub use mesh::{build_grid, GridSpec, MeshConfig};
