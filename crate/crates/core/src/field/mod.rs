//! Implicit scalar fields built on the autodiff tape.
//!
//! [`ImplicitField`] is the one interface the rest of the pipeline needs: a
//! field records `g(x)` for a batch of points on a tape. Gradients, unit
//! normals and the projection `x ← x − g(x)·ν(x)` are derived from that
//! record, so the same code serves the trained network and analytic probes.

mod attentive;
mod probes;

pub use attentive::{encode, AttentiveField, FieldConfig};
pub use probes::{LinearProbe, SphereProbe};

use rayon::prelude::*;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Norms below this are treated as a vanishing gradient.
pub const GRADIENT_EPS: f64 = 1e-12;

/// Points per tape when evaluating large batches.
const CHUNK: usize = 2048;

pub trait ImplicitField: Sync {
    /// Places the field's parameters on `tape` (empty for analytic fields).
    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>>;

    /// Records `g` for each row of the `n × 3` matrix `x`, giving `n × 1`.
    fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t>;

    /// Field values at many points. Chunks are evaluated in parallel and
    /// each chunk's result is independent of scheduling.
    fn values(&self, points: &[Vec3]) -> Vec<f64> {
        points
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let tape = Tape::new();
                let params = self.bind(&tape);
                let x = tape.constant(points_matrix(chunk));
                let g = self.forward(&params, x).value();
                g.column(0).to_vec()
            })
            .collect()
    }

    /// Field values and spatial gradients at many points.
    fn values_and_gradients(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        let parts: Vec<(Vec<f64>, Vec<Vec3>)> = points
            .par_chunks(CHUNK)
            .map(|chunk| {
                let tape = Tape::new();
                let params = self.bind(&tape);
                let x = tape.var(points_matrix(chunk));
                let g = self.forward(&params, x);
                let grad = tape
                    .gradients(g.sum(), &[x])
                    .expect("sum is scalar")
                    .remove(0);
                (g.value().column(0).to_vec(), matrix_points(&grad))
            })
            .collect();
        let mut values = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for (v, g) in parts {
            values.extend(v);
            grads.extend(g);
        }
        (values, grads)
    }

    fn eval(&self, x: &Vec3) -> Result<f64> {
        check_point(x)?;
        Ok(self.values(std::slice::from_ref(x))[0])
    }

    fn gradient(&self, x: &Vec3) -> Result<Vec3> {
        check_point(x)?;
        Ok(self.values_and_gradients(std::slice::from_ref(x)).1[0])
    }

    /// Unit normal `∇g / ‖∇g‖`.
    fn normal(&self, x: &Vec3) -> Result<Vec3> {
        unit_or_degenerate(self.gradient(x)?, x)
    }

    /// Applies the projection `x ← x − g(x)·ν(x)` `steps` times.
    fn project(&self, x: &Vec3, steps: usize) -> Result<Vec3> {
        if steps == 0 {
            return Err(Error::Argument("projection needs at least one step".into()));
        }
        let mut p = *x;
        for _ in 0..steps {
            check_point(&p)?;
            let (g, grad) = self.values_and_gradients(std::slice::from_ref(&p));
            let n = unit_or_degenerate(grad[0], &p)?;
            p -= n * g[0];
        }
        Ok(p)
    }
}

/// Value, spatial gradient and clamped unit normal of a field at `x`, all
/// recorded so they can be differentiated again.
pub struct FieldSample<'t> {
    pub value: Var<'t>,
    pub gradient: Var<'t>,
    pub normal: Var<'t>,
}

impl<'t> FieldSample<'t> {
    pub fn record<F: ImplicitField + ?Sized>(
        field: &F,
        params: &[Var<'t>],
        x: Var<'t>,
    ) -> Result<Self> {
        let value = field.forward(params, x);
        let gradient = x.tape().grad(value.sum(), &[x])?.remove(0);
        let normal = gradient.normalize_rows(GRADIENT_EPS);
        Ok(Self {
            value,
            gradient,
            normal,
        })
    }

    /// `x − g(x)·ν(x)` for the point set this sample was recorded at.
    pub fn project(&self, x: Var<'t>) -> Var<'t> {
        x - self.value * self.normal
    }

    /// Per-row indicator (`1` or `0`) of a usable gradient.
    pub fn valid_mask(&self) -> Matrix {
        self.gradient
            .value()
            .map_axis(ndarray::Axis(1), |row| {
                let n2: f64 = row.iter().map(|v| v * v).sum();
                if n2.sqrt() > GRADIENT_EPS && n2.is_finite() {
                    1.0
                } else {
                    0.0
                }
            })
            .insert_axis(ndarray::Axis(1))
    }
}

pub fn points_matrix(points: &[Vec3]) -> Matrix {
    Matrix::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
}

pub fn matrix_points(m: &Matrix) -> Vec<Vec3> {
    m.rows()
        .into_iter()
        .map(|r| Vec3::new(r[0], r[1], r[2]))
        .collect()
}

fn check_point(x: &Vec3) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Argument(format!("non-finite query point {x:?}")))
    }
}

fn unit_or_degenerate(g: Vec3, x: &Vec3) -> Result<Vec3> {
    let n = g.norm();
    if n > GRADIENT_EPS && n.is_finite() {
        Ok(g / n)
    } else {
        Err(Error::DegenerateGradient([x.x, x.y, x.z]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_probe_gradient_is_exact() {
        let a = Vec3::new(0.3, -1.2, 2.5);
        let probe = LinearProbe::new(a, 0.0);
        assert_eq!(probe.gradient(&Vec3::new(0.1, 0.2, 0.3)).unwrap(), a);
    }

    #[test]
    fn plane_normal() {
        let probe = LinearProbe::new(Vec3::z(), 0.0);
        assert_eq!(probe.normal(&Vec3::new(0.4, -0.3, 0.9)).unwrap(), Vec3::z());
    }

    #[test]
    fn sphere_normal_and_projection() {
        let sphere = SphereProbe::new(Vec3::zeros(), 1.0);
        let x = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(sphere.normal(&x).unwrap(), Vec3::x());
        assert_eq!(sphere.project(&x, 1).unwrap(), Vec3::x());
    }

    #[test]
    fn zero_level_is_fixed_point() {
        let probe = LinearProbe::new(Vec3::new(0.0, 0.0, 1.0), 0.0);
        let x = Vec3::new(0.7, -0.2, 0.0);
        assert_eq!(probe.project(&x, 3).unwrap(), x);
    }

    #[test]
    fn projection_is_not_a_contraction_without_unit_gradient() {
        // g = 2z overshoots the plane and then bounces back: a 2-cycle.
        let probe = LinearProbe::new(Vec3::new(0.0, 0.0, 2.0), 0.0);
        let x = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(probe.project(&x, 1).unwrap(), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(probe.project(&x, 2).unwrap(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn vanishing_gradient_is_reported() {
        let probe = LinearProbe::new(Vec3::zeros(), 0.5);
        assert!(matches!(
            probe.normal(&Vec3::zeros()),
            Err(Error::DegenerateGradient(_))
        ));
        assert!(probe.project(&Vec3::zeros(), 1).is_err());
    }

    #[test]
    fn non_finite_query_is_rejected() {
        let probe = LinearProbe::new(Vec3::z(), 0.0);
        assert!(matches!(
            probe.eval(&Vec3::new(f64::NAN, 0.0, 0.0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn batch_and_single_evaluation_agree() {
        let sphere = SphereProbe::new(Vec3::new(0.1, 0.0, 0.0), 0.5);
        let pts: Vec<Vec3> = (0..5000)
            .map(|i| Vec3::new(i as f64 * 1e-3, 0.3, -0.2))
            .collect();
        let batch = sphere.values(&pts);
        for i in [0, 2047, 2048, 4999] {
            assert_eq!(batch[i], sphere.eval(&pts[i]).unwrap());
        }
    }
}
