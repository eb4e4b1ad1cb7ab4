//! Analytic fields with known values, gradients and zero sets.

use super::ImplicitField;
use crate::autodiff::{Matrix, Tape, Var};
use crate::geometry::Vec3;

/// `g(x) = a·x + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearProbe {
    pub slope: Vec3,
    pub offset: f64,
}

impl LinearProbe {
    pub fn new(slope: Vec3, offset: f64) -> Self {
        Self { slope, offset }
    }
}

impl ImplicitField for LinearProbe {
    fn bind<'t>(&self, _tape: &'t Tape) -> Vec<Var<'t>> {
        Vec::new()
    }

    fn forward<'t>(&self, _params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let a = x
            .tape()
            .constant(Matrix::from_shape_vec((3, 1), self.slope.iter().copied().collect()).unwrap());
        x.matmul(a) + self.offset
    }
}

/// Exact signed distance to a sphere, negative inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereProbe {
    pub center: Vec3,
    pub radius: f64,
}

impl SphereProbe {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius }
    }
}

impl ImplicitField for SphereProbe {
    fn bind<'t>(&self, _tape: &'t Tape) -> Vec<Var<'t>> {
        Vec::new()
    }

    fn forward<'t>(&self, _params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let c = x
            .tape()
            .constant(Matrix::from_shape_vec((1, 3), self.center.iter().copied().collect()).unwrap());
        (x - c).norm_rows() - self.radius
    }
}
