//! The four self-supervised objectives.
//!
//! Off-surface and on-surface rows are stacked into one matrix `T` so the
//! field, its gradient and both projections are recorded once per batch.
//! Per-set means are taken with constant row masks. Rows whose gradient
//! vanishes at `x` or at `𝒫₁(x)` are masked out of every mean and counted.

use ndarray::s;

use super::queries::Batch;
use crate::autodiff::{Matrix, Var};
use crate::error::{Error, Result};
use crate::field::{points_matrix, FieldSample, ImplicitField};

/// Loss weights and the decay of the normal-consistency weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Global surface term.
    pub alpha: f64,
    /// Level-set term.
    pub beta: f64,
    /// Local displacement term.
    pub gamma: f64,
    /// Normal consistency term.
    pub delta: f64,
    /// Decay `ρ` in `exp(−ρ|g|)`.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 10.0,
            gamma: 1.0,
            delta: 0.01,
            rho: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.rho];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }

    /// Weighted sum of `[L_α, L_β, L_γ, L_δ]`.
    pub fn combine(&self, terms: [f64; 4]) -> f64 {
        self.alpha * terms[0] + self.beta * terms[1] + self.gamma * terms[2] + self.delta * terms[3]
    }
}

/// Component values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Rows dropped for a vanishing gradient.
    pub skipped: usize,
}

impl LossValues {
    pub fn components(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }
}

/// Recorded loss graph; every component can be differentiated.
pub struct LossGraph<'t> {
    pub total: Var<'t>,
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
    pub gamma: Var<'t>,
    pub delta: Var<'t>,
    pub skipped: usize,
}

impl LossGraph<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item(),
            alpha: self.alpha.item(),
            beta: self.beta.item(),
            gamma: self.gamma.item(),
            delta: self.delta.item(),
            skipped: self.skipped,
        }
    }

    /// Fails with the name of the first non-finite component.
    pub fn check_finite(&self, iteration: u64) -> Result<()> {
        let v = self.values();
        for (component, value) in [
            ("L_alpha", v.alpha),
            ("L_beta", v.beta),
            ("L_gamma", v.gamma),
            ("L_delta", v.delta),
            ("total", v.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component,
                    iteration,
                });
            }
        }
        Ok(())
    }
}

/// Records all four losses for `batch` on the tape that holds `params`.
pub fn record_losses<'t, F: ImplicitField + ?Sized>(
    field: &F,
    params: &[Var<'t>],
    tape: &'t crate::autodiff::Tape,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<LossGraph<'t>> {
    weights.validate()?;
    let nq = batch.queries.len();
    let ng = batch.surface.len();
    let n = nq + ng;
    if n == 0 {
        return Err(Error::Argument("empty training batch".into()));
    }

    let all: Vec<_> = batch.queries.iter().chain(&batch.surface).copied().collect();
    let x_val = points_matrix(&all);
    let x = tape.constant(x_val.clone());
    let s0 = FieldSample::record(field, params, x)?;
    let p1 = s0.project(x);
    let s1 = FieldSample::record(field, params, p1)?;
    let p2 = s1.project(p1);

    let valid = &s0.valid_mask() * &s1.valid_mask();
    let skipped = n - valid.sum() as usize;
    let mut off = valid.clone();
    off.slice_mut(s![nq.., ..]).fill(0.0);
    let mut on = valid.clone();
    on.slice_mut(s![..nq, ..]).fill(0.0);

    let mean = |rows: Var<'t>, mask: &Matrix| -> Var<'t> {
        let count = mask.sum();
        if count == 0.0 {
            tape.scalar(0.0)
        } else {
            (rows * tape.constant(mask.clone())).sum() * (1.0 / count)
        }
    };
    let sq_dist = |a: Var<'t>, b: Var<'t>| (a - b).square().sum_cols();

    // Off-surface rows pull toward their nearest cloud point, on-surface
    // rows toward themselves.
    let mut target = x_val;
    target
        .slice_mut(s![..nq, ..])
        .assign(&points_matrix(&batch.targets));
    let residual = sq_dist(p2, tape.constant(target));
    let alpha = mean(residual, &off) + mean(residual, &on);

    let g0_sq = s0.value.square();
    let beta = mean(g0_sq, &on) + mean(s1.value.square(), &valid);

    // (q − 𝒫₁(q)) − (q − c) = c − 𝒫₁(q).
    let mut gamma = tape.scalar(0.0);
    for centroids in &batch.centroids {
        let mut c = Matrix::zeros((n, 3));
        c.slice_mut(s![..nq, ..]).assign(&points_matrix(centroids));
        gamma = gamma + mean(sq_dist(tape.constant(c), p1), &off);
    }

    // 1 − cos(ν, ν′) written as ½‖ν − ν′‖², equal for unit vectors and
    // nonnegative in floating point.
    let decay = (s0.value.abs() * -weights.rho).exp();
    let turn = sq_dist(s0.normal, s1.normal) * 0.5;
    let delta = mean(decay * turn, &valid);

    let total = alpha * weights.alpha + beta * weights.beta + gamma * weights.gamma + delta * weights.delta;
    Ok(LossGraph {
        total,
        alpha,
        beta,
        gamma,
        delta,
        skipped,
    })
}

/// Evaluates the losses without keeping the tape.
pub fn evaluate_losses<F: ImplicitField + ?Sized>(
    field: &F,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<LossValues> {
    let tape = crate::autodiff::Tape::new();
    let params = field.bind(&tape);
    Ok(record_losses(field, &params, &tape, batch, weights)?.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{LinearProbe, SphereProbe};
    use crate::geometry::Vec3;

    fn batch(queries: Vec<Vec3>, targets: Vec<Vec3>, centroids: Vec<Vec<Vec3>>, surface: Vec<Vec3>) -> Batch {
        Batch {
            queries,
            targets,
            centroids,
            surface,
        }
    }

    #[test]
    fn default_weights_compose() {
        let w = LossWeights::default();
        assert!((w.combine([1.0; 4]) - 11.31).abs() < 1e-12);
        assert_eq!(w.combine([0.0; 4]), 0.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            ..w
        };
        assert_eq!(zero.combine([3.0, 1.0, 4.0, 1.5]), 0.0);
    }

    #[test]
    fn plane_probe_pulls_query_onto_target() {
        let plane = LinearProbe::new(Vec3::z(), 0.0);
        let b = batch(
            vec![Vec3::new(0.0, 0.0, 1.0)],
            vec![Vec3::zeros()],
            vec![],
            vec![],
        );
        let v = evaluate_losses(&plane, &b, &LossWeights::default()).unwrap();
        assert_eq!(v.alpha, 0.0);
        assert_eq!(v.delta, 0.0);
    }

    #[test]
    fn zero_field_leaves_surface_points_fixed() {
        // Every gradient vanishes, so every row is skipped and the terms
        // are zero rather than undefined.
        let zero = LinearProbe::new(Vec3::zeros(), 0.0);
        let b = batch(vec![], vec![], vec![], vec![Vec3::new(0.1, 0.2, 0.3)]);
        let v = evaluate_losses(&zero, &b, &LossWeights::default()).unwrap();
        assert_eq!(v.components(), [0.0; 4]);
        assert_eq!(v.skipped, 1);
    }

    #[test]
    fn offset_plane_level_set() {
        let plane = LinearProbe::new(Vec3::z(), 0.1);
        let b = batch(vec![], vec![], vec![], vec![Vec3::new(0.3, -0.2, 0.0)]);
        let v = evaluate_losses(&plane, &b, &LossWeights::default()).unwrap();
        assert!((v.beta - 0.01).abs() < 1e-15);
    }

    #[test]
    fn displacement_hand_case() {
        // The plane passes through q, so 𝒫₁(q) = q and the term is ‖𝒱‖².
        let plane = LinearProbe::new(Vec3::z(), 0.0);
        let patch = [Vec3::x(), Vec3::y(), Vec3::z()];
        let c = patch.iter().sum::<Vec3>() / 3.0;
        let b = batch(vec![Vec3::zeros()], vec![Vec3::zeros()], vec![vec![c]], vec![]);
        let v = evaluate_losses(&plane, &b, &LossWeights::default()).unwrap();
        assert!((v.gamma - 1.0 / 3.0).abs() < 1e-15);
        let doubled = batch(vec![Vec3::zeros()], vec![Vec3::zeros()], vec![vec![c], vec![c]], vec![]);
        let v2 = evaluate_losses(&plane, &doubled, &LossWeights::default()).unwrap();
        assert_eq!(v2.gamma, 2.0 * v.gamma);
    }

    #[test]
    fn sphere_normal_weight_off_surface() {
        let w = LossWeights::default();
        let sphere = SphereProbe::new(Vec3::zeros(), 1.0);
        let b = batch(vec![Vec3::new(2.0, 0.0, 0.0)], vec![Vec3::x()], vec![], vec![]);
        let v = evaluate_losses(&sphere, &b, &w).unwrap();
        assert_eq!(v.delta, 0.0);
        assert!(v.alpha < 1e-30);
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let sphere = SphereProbe::new(Vec3::new(0.05, 0.0, 0.0), 0.4);
        let q = vec![Vec3::new(0.5, 0.1, 0.0), Vec3::new(-0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 0.6)];
        let t = vec![Vec3::new(0.4, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.3), Vec3::new(0.0, 0.1, 0.5)];
        let c = vec![vec![Vec3::new(0.3, 0.1, 0.0), Vec3::zeros(), Vec3::new(0.1, 0.0, 0.4)]];
        let g = vec![Vec3::new(0.45, 0.0, 0.0), Vec3::new(0.05, 0.4, 0.0)];
        let w = LossWeights::default();
        let a = evaluate_losses(&sphere, &batch(q.clone(), t.clone(), c.clone(), g.clone()), &w).unwrap();
        let rev = |v: &Vec<Vec3>| v.iter().rev().copied().collect::<Vec<_>>();
        let b = evaluate_losses(
            &sphere,
            &batch(rev(&q), rev(&t), vec![rev(&c[0])], rev(&g)),
            &w,
        )
        .unwrap();
        for (x, y) in a.components().iter().zip(b.components()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}
