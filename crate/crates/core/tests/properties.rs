use dne_core::camera::{correct_camera, projection_residual, Camera, RidgeConfig};
use dne_core::features::FeatureGrid;
use dne_core::mesh::{make_template, mpvpe, NUM_JOINTS};
use dne_core::pack;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
}

fn camera() -> impl Strategy<Value = Camera> {
    (1.0f64..40.0, 1.0f64..40.0, -20.0f64..20.0, -20.0f64..20.0).prop_map(|(a, b, c, d)| Camera::new(a, b, c, d))
}

proptest! {
    #[test]
    fn correction_never_worsens_the_data_term(
        v in prop::collection::vec(point(), 3..80),
        noise in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 80),
        previous in camera(),
        other in camera(),
        xi in 0.0f64..1e-6,
    ) {
        let u: Vec<[f64; 2]> = other
            .project_all(&v)
            .iter()
            .zip(&noise)
            .map(|(p, e)| [p[0] + e[0], p[1] + e[1]])
            .collect();
        let fitted = correct_camera(&v, &u, &RidgeConfig { xi }).unwrap();
        let after = projection_residual(&v, &u, &fitted).unwrap();
        let before = projection_residual(&v, &u, &previous).unwrap();
        prop_assert!(after <= before + 1e-9);
    }

    #[test]
    fn exact_projections_are_recovered(v in prop::collection::vec(point(), 2..50), c in camera()) {
        let spread = |k: usize| {
            let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            hi - lo
        };
        prop_assume!(spread(0) > 1e-3 && spread(1) > 1e-3);
        let fit = correct_camera(&v, &c.project_all(&v), &RidgeConfig { xi: 0.0 }).unwrap();
        for (a, b) in fit.to_array().iter().zip(c.to_array()) {
            prop_assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn mpvpe_is_a_symmetric_translation_measure(
        seed in any::<u64>(),
        shift in point(),
    ) {
        let a = make_template(seed, &[0.2; NUM_JOINTS]);
        let b = a.with_vertices(a.vertices().iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect()).unwrap();
        let norm = (shift[0].powi(2) + shift[1].powi(2) + shift[2].powi(2)).sqrt();
        prop_assert!((mpvpe(&a, &b).unwrap() - norm).abs() < 1e-12);
        prop_assert_eq!(mpvpe(&a, &b).unwrap(), mpvpe(&b, &a).unwrap());
    }

    #[test]
    fn grids_survive_the_container(h in 2usize..6, w in 2usize..6, c in 1usize..4, seed in any::<u32>()) {
        let values: Vec<f64> = (0..h * w * c)
            .map(|i| (((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 * 1e-9) as f64)
            .collect();
        let grid = FeatureGrid::new(h, w, c, values).unwrap();
        let back = pack::decode_grid(&pack::encode_grid(&grid).unwrap()).unwrap();
        prop_assert_eq!(back, grid);
    }
}
