mod common;

use common::*;
use tsaflow::model::Ablation;
use tsaflow::params::ParamStore;
use tsaflow::tensor::grad_check_many;

#[test]
fn whole_pipeline_gradient_matches_finite_differences() {
    let s = scene(32, 4);
    for (label, flags) in Ablation::grid() {
        let cfg = tiny_train_config(flags);
        let specs = specs_for(&cfg);
        let store = ParamStore::<f64>::init(&specs, 9);
        let pinned = base_detached(&store, &cfg, &s);
        let inputs: Vec<_> = specs.iter().map(|sp| store.get(&sp.key).unwrap().clone()).collect();
        let report = grad_check_many(
            |g, vs| pipeline_loss(g, vs, &specs, &cfg, &s, &pinned),
            &inputs,
            1e-6,
            Some(6),
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "row {label}: {report:?}");
    }
}
