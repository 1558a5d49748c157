mod common;

use common::grad_scene;

#[test]
fn full_pipeline_matches_finite_differences() {
    for seed in 0..20 {
        let mut scene = grad_scene(seed, 32);
        let (err, k) = scene.max_relative_error(1e-4);
        assert!(err < 1e-3, "seed {seed}: parameter {k} relative error {err}");
    }
}
