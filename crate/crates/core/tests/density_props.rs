use gaunet::density::{
    analytic_noise_moments, boundary_mass_loss, generate_density_map, monte_carlo_noise_moments,
    perturb_annotations_with, Displacement, PointAnnotations,
};
use proptest::prelude::*;

fn points_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    let (xh, yh) = ((w as f64).next_down(), (h as f64).next_down());
    prop::collection::vec((0.0..xh, 0.0..yh).prop_map(|(x, y)| [x, y]), 0..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_count_up_to_boundary_loss(pts in points_strategy(40, 48), beta in 1.0f64..9.0) {
        let ann = PointAnnotations::new(pts, 40, 48).unwrap();
        let map = generate_density_map(&ann, beta).unwrap();
        let n = ann.len() as f64;
        prop_assert!((map.sum() - n).abs() <= 0.01 * n + boundary_mass_loss(&ann, beta) + 1e-12);
        prop_assert!(map.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn map_is_additive_over_point_sets(a in points_strategy(24, 24), b in points_strategy(24, 24)) {
        let (pa, pb) = (PointAnnotations::new(a, 24, 24).unwrap(), PointAnnotations::new(b, 24, 24).unwrap());
        let joint = generate_density_map(&pa.merged(&pb).unwrap(), 4.0).unwrap();
        let (ma, mb) = (generate_density_map(&pa, 4.0).unwrap(), generate_density_map(&pb, 4.0).unwrap());
        for ((j, x), y) in joint.values.iter().zip(&ma.values).zip(&mb.values) {
            prop_assert!((j - x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_stays_within_radius_and_image(
        pts in points_strategy(32, 32),
        radius in 0.0f64..8.0,
        seed in any::<u64>(),
        per_axis in any::<bool>(),
    ) {
        let ann = PointAnnotations::new(pts, 32, 32).unwrap();
        let mode = if per_axis { Displacement::PerAxis } else { Displacement::Euclidean };
        let moved = perturb_annotations_with(&ann, radius, mode, seed).unwrap();
        prop_assert_eq!(moved.len(), ann.len());
        let bound = if per_axis { radius * 2f64.sqrt() } else { radius };
        for (p, q) in ann.points().iter().zip(moved.points()) {
            prop_assert!(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() <= bound + 1e-12);
            prop_assert!(q[0] >= 0.0 && q[0] < 32.0 && q[1] >= 0.0 && q[1] < 32.0);
        }
    }
}

#[test]
fn interior_point_mass_is_one_minus_truncation() {
    let ann = PointAnnotations::new(vec![[30.0, 30.0]], 64, 64).unwrap();
    let map = generate_density_map(&ann, 4.0).unwrap();
    assert!((map.sum() - 1.0).abs() < 0.01);
    assert!(boundary_mass_loss(&ann, 4.0) < 1e-12);
}

#[test]
fn monte_carlo_mean_agrees_with_closed_form() {
    let ann = PointAnnotations::new(vec![[8.3, 9.1], [12.0, 12.5], [20.7, 5.2], [3.0, 18.0]], 24, 24).unwrap();
    for eps in [1.0, 2.0] {
        let exact = analytic_noise_moments(&ann, 4.0, eps).unwrap();
        let mc = monte_carlo_noise_moments(&ann, 4.0, eps, 10_000, 17).unwrap();
        let within = exact
            .mean_map
            .iter()
            .zip(&exact.var_map)
            .zip(&mc.mean_map)
            .filter(|((m, v), s)| (*s - *m).abs() <= 3.0 * (*v / 10_000.0).sqrt() + 1e-15)
            .count();
        assert!(within as f64 >= 0.99 * exact.mean_map.len() as f64, "eps {eps}: {within}");
    }
}

#[test]
fn noise_moment_constants() {
    let ann = PointAnnotations::new(vec![[5.0, 5.0]], 11, 11).unwrap();
    let m = analytic_noise_moments(&ann, 4.0, 2.0).unwrap();
    assert_eq!(m.gamma, 8.0);
    assert_eq!(m.delta, 6.0);
    let zero = analytic_noise_moments(&ann, 4.0, 0.0).unwrap();
    let direct = generate_density_map(&ann, 4.0).unwrap();
    for (a, b) in zero.mean_map.iter().zip(&direct.values) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(zero.var_map.iter().all(|v| v.abs() < 1e-12));
}
