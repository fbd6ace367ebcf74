//! End-to-end checks of the public pipeline API at smoke-test budgets.

use mrcom::meta_env::{sample_scenario, MorphologyId, ObsTransform, ScenarioSet};
use mrcom::numerics::RngStream;
use mrcom::pipeline::{adapt, evaluate_agent, train_world_model, Metrics, PipelineConfig, Trainer, Variant};

fn scenarios(seed: u64) -> ScenarioSet {
    ScenarioSet::sample(&MorphologyId::ALL, 1, 10.0, 50.0, ObsTransform::None, 0, &mut RngStream::new(seed, 50)).unwrap()
}

fn losses(ms: &[Metrics]) -> Vec<Option<f64>> {
    ms.iter().map(|m| m.loss_total).collect()
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let cfg = PipelineConfig::tiny();
    let set = scenarios(3);
    let run = || {
        let mut log = Vec::new();
        train_world_model(&cfg, &set, 7, &mut |m| log.push(m.clone())).unwrap();
        log
    };
    let (a, b) = (run(), run());
    assert_eq!(losses(&a), losses(&b));
    assert!(a.iter().all(|m| m.phase == "train"));
    assert!(a.iter().filter_map(|m| m.loss_total).all(f64::is_finite));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let mut cfg = PipelineConfig::tiny();
    cfg.train.outer_iters = 2;
    let set = scenarios(4);

    let mut straight = Trainer::new(&cfg, &set, 11).unwrap();
    let m1 = straight.run_iteration().unwrap();
    let m2 = straight.run_iteration().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&cfg, &set, 11).unwrap();
    assert_eq!(first.run_iteration().unwrap().loss_total, m1.loss_total);
    first.save(dir.path()).unwrap();
    let mut resumed = Trainer::load(dir.path(), &cfg, &set, 11).unwrap();
    assert_eq!(resumed.iteration(), 1);
    assert_eq!(resumed.run_iteration().unwrap().loss_total, m2.loss_total);
}

#[test]
fn adaptation_reports_counts_and_a_bounded_return() {
    let mut cfg = PipelineConfig::tiny();
    cfg.train.adapt_steps = 200;
    let set = scenarios(5);
    let trained = train_world_model(&cfg, &set, 1, &mut |_| {}).unwrap();
    let target = sample_scenario(MorphologyId::Walk, 10.0, 50.0, &mut RngStream::new(5, 51)).unwrap().with_id(1000);

    let mut log = Vec::new();
    let a = adapt(&trained, &target, 2, &mut |m| log.push(m.clone())).unwrap();
    assert_eq!(a.real_steps, 200);
    assert_eq!(a.model_transitions, 200 * cfg.train.horizon);
    assert!(a.normalized_return.is_finite());
    assert!(log.iter().all(|m| m.phase == "adapt"));

    let again = evaluate_agent(&a.agent, &target, 2, 2).unwrap();
    assert!(again.is_finite());
}

#[test]
fn every_variant_trains() {
    let set = scenarios(6);
    for v in Variant::ALL {
        let mut cfg = PipelineConfig::tiny();
        cfg.model = v.apply(&cfg.model);
        let t = train_world_model(&cfg, &set, 0, &mut |_| {});
        assert!(t.is_ok(), "{}: {:?}", v.as_str(), t.err());
    }
}
