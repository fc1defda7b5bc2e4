use ael_core::adnn::{train_exit, train_skip, ConditionalSkipNet, EarlyExitNet, ExitConfig, SkipConfig, TrainConfig};
use ael_core::dataset;

fn data() -> dataset::LabeledDataset {
    dataset::generate(600, 4, 0.8, 1).unwrap()
}

#[test]
fn skip_net_is_accurate_and_adaptive() {
    let ds = data();
    let mut m = ConditionalSkipNet::new(SkipConfig::default(), 2);
    let r = train_skip(&mut m, &ds, &TrainConfig { sparsity: 0.05, seed: 2, ..Default::default() }).unwrap();
    assert!(r.accuracy >= 0.9, "accuracy {}", r.accuracy);
    assert!(r.distinct_active() >= 3, "distinct {}", r.distinct_active());
}

#[test]
fn strong_sparsity_lowers_activity() {
    let ds = data();
    let run = |sparsity| {
        let mut m = ConditionalSkipNet::new(SkipConfig::default(), 4);
        train_skip(&mut m, &ds, &TrainConfig { sparsity, seed: 4, epochs: 20, ..Default::default() }).unwrap().mean_active()
    };
    assert!(run(10.0) < run(0.0));
}

#[test]
fn exit_net_uses_several_exits() {
    let ds = data();
    let mut e = EarlyExitNet::new(ExitConfig { entropy_threshold: 0.3, ..Default::default() }, 2);
    let r = train_exit(&mut e, &ds, &TrainConfig { seed: 2, epochs: 30, ..Default::default() }).unwrap();
    let mut used = r.exit_indices.clone();
    used.sort_unstable();
    used.dedup();
    assert!(used.len() >= 2, "exits {used:?}");
}
