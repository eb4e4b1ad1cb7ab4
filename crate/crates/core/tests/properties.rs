use proptest::prelude::*;

use selfprior_core::autodiff::{Matrix, Tape};
use selfprior_core::extraction::{inpaint, marching_cubes, GridSpec, ScalarGrid};
use selfprior_core::geometry::{normalize_unit, PointCloud, Vec3};
use selfprior_core::metrics::{chamfer, directed_chamfer, f_score, hausdorff, oracle, rmse_oriented};

fn point() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn points(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(point(), 1..max)
}

fn unit() -> impl Strategy<Value = Vec3> {
    point().prop_filter("nonzero", |v| v.norm() > 1e-3).prop_map(|v| v.normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_are_symmetric(a in points(60), b in points(60)) {
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn indexed_metrics_match_brute_force(a in points(80), b in points(80), tau in 0.01..1.0f64) {
        prop_assert_eq!(chamfer(&a, &b).unwrap(), oracle::chamfer(&a, &b));
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), oracle::hausdorff(&a, &b));
        prop_assert_eq!(f_score(&a, &b, tau).unwrap(), oracle::f_score(&a, &b, tau));
    }

    #[test]
    fn growing_the_reconstruction_never_hurts_coverage(a in points(40), b in points(40), extra in points(20)) {
        let mut grown = b.clone();
        grown.extend(extra);
        prop_assert!(directed_chamfer(&a, &grown).unwrap() <= directed_chamfer(&a, &b).unwrap());
    }

    #[test]
    fn f_score_grows_with_tau(a in points(40), b in points(40), t1 in 0.01..0.5f64, dt in 0.0..0.5f64) {
        let lo = f_score(&a, &b, t1).unwrap();
        let hi = f_score(&a, &b, t1 + dt).unwrap();
        prop_assert!(lo.precision <= hi.precision && lo.recall <= hi.recall);
        prop_assert!((0.0..=1.0).contains(&lo.f1));
    }

    #[test]
    fn oriented_error_is_an_angle(pairs in prop::collection::vec((unit(), unit()), 1..30)) {
        let (p, t): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();
        let e = rmse_oriented(&p, &t).unwrap();
        prop_assert!((0.0..=180.0).contains(&e));
        let flipped: Vec<Vec3> = t.iter().map(|v| -v).collect();
        // acos turns unit-length rounding into about 1e-6 degrees near ±1.
        prop_assert!((rmse_oriented(&t, &flipped).unwrap() - 180.0).abs() < 1e-5);
    }

    #[test]
    fn normalization_fits_the_unit_box(pts in prop::collection::vec(point(), 2..50), scale in 0.1..10.0f64) {
        let cloud = PointCloud::new(pts.iter().map(|p| p * scale).collect());
        prop_assume!(cloud.diagonal() > 1e-6);
        let (out, t) = normalize_unit(&cloud).unwrap();
        let (lo, hi) = out.bounds().unwrap();
        prop_assert!(lo.min() >= -0.5 - 1e-12 && hi.max() <= 0.5 + 1e-12);
        prop_assert!(((hi - lo).max() - 1.0).abs() < 1e-12);
        for (p, q) in cloud.points.iter().zip(&out.points) {
            prop_assert!((t.invert(q) - p).norm() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn square_gradient_is_twice_the_input(values in prop::collection::vec(-5.0..5.0f64, 6)) {
        let m = Matrix::from_shape_vec((2, 3), values).unwrap();
        let tape = Tape::new();
        let x = tape.var(m.clone());
        let g = tape.gradients(x.square().sum(), &[x]).unwrap().remove(0);
        prop_assert_eq!(g, m.mapv(|v| 2.0 * v));
    }

    #[test]
    fn fill_points_are_far(input in points(60), candidates in points(60)) {
        let report = inpaint(&PointCloud::new(input), &PointCloud::new(candidates)).unwrap();
        for (d, kept) in report.distances.iter().zip(&report.kept) {
            prop_assert_eq!(*kept, report.sigma > 0.0 && *d >= 3.0 * report.sigma);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn marching_cubes_stays_near_spheres(
        c in (-0.1..0.1f64, -0.1..0.1f64, -0.1..0.1f64),
        r in 0.15..0.35f64,
    ) {
        let center = Vec3::new(c.0, c.1, c.2);
        let spec = GridSpec::unit(32);
        let grid = ScalarGrid::from_fn(spec, |p| (p - center).norm() - r).unwrap();
        let mesh = marching_cubes(&grid);
        prop_assert!(!mesh.faces.is_empty());
        let worst = mesh.vertices.iter().map(|v| ((v - center).norm() - r).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1.5 * spec.cell_size());
        prop_assert_eq!(mesh.euler_characteristic(), 2);
    }
}
