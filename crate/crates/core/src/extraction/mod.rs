//! Iso-surface extraction, level-set sampling, sparse-region filling and
//! gradient normals.

mod fill;
mod grid;
mod mc;
mod tables;

pub use fill::{
    assign_normals, extract_mesh, inpaint, sample_level_set, FillReport, MAX_DEGENERATE_FRACTION,
};
pub use grid::{GridSpec, ScalarGrid};
pub use mc::{cleanup, marching_cubes, MIN_FACE_AREA, WELD_TOLERANCE};
