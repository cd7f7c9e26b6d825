use std::collections::BTreeMap;

use vclab_core::continual::{train_on_task, BetaMode, TrainConfig};
use vclab_core::data::make_synthetic_blobs;
use vclab_core::heuristics::{measure_similarity, probe_difficulty, HeuristicConfig};
use vclab_core::numerics::Rng;
use vclab_core::vbnn::{Architecture, PosteriorSnapshot};

fn arch() -> Architecture {
    Architecture::new(784, &[32, 32], 2)
}

#[test]
fn unlearnable_blobs_probe_as_hard() {
    let task = make_synthetic_blobs(0.0, 0.0, 2000, &mut Rng::seed_from(1)).unwrap();
    let probe = probe_difficulty(&task, &arch(), &HeuristicConfig::default(), 7).unwrap();
    println!("sep 0: d={} accs={:?}", probe.difficulty, probe.accuracies);
    assert!((0.8..=1.0).contains(&probe.difficulty), "d = {}", probe.difficulty);
}

#[test]
fn separated_blobs_probe_as_easy() {
    let task = make_synthetic_blobs(10.0, 0.0, 2000, &mut Rng::seed_from(1)).unwrap();
    let probe = probe_difficulty(&task, &arch(), &HeuristicConfig::default(), 7).unwrap();
    println!("sep 10: d={} accs={:?}", probe.difficulty, probe.accuracies);
    assert!((0.0..=0.2).contains(&probe.difficulty), "d = {}", probe.difficulty);
}

#[test]
fn probes_are_reproducible() {
    let task = make_synthetic_blobs(3.0, 0.4, 2000, &mut Rng::seed_from(2)).unwrap();
    let cfg = HeuristicConfig {
        probe_repeats: 2,
        ..HeuristicConfig::default()
    };
    let a = probe_difficulty(&task, &arch(), &cfg, 11).unwrap();
    let b = probe_difficulty(&task, &arch(), &cfg, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn repeated_and_flipped_tasks_look_similar() {
    let mut rng = Rng::seed_from(3);
    let task = make_synthetic_blobs(10.0, 0.0, 2000, &mut rng).unwrap();
    let mut net = arch().build(&mut rng).unwrap();
    net.add_head(0, &mut rng);
    let prior = PosteriorSnapshot::standard_normal(&net);
    let cfg = TrainConfig {
        epochs: 2,
        beta_mode: BetaMode::Fixed(1.0),
        ..TrainConfig::default()
    };
    train_on_task(&mut net, &prior, &task, 1.0, &cfg, &mut rng).unwrap();

    let hcfg = HeuristicConfig::default();
    let repeat = make_synthetic_blobs(10.0, 0.0, 2000, &mut rng).unwrap().with_head(1);
    let flipped = repeat
        .clone()
        .with_label_map(BTreeMap::from([(0, 1), (1, 0)]), "flipped")
        .unwrap();
    let s_repeat = measure_similarity(&repeat, &net, &hcfg, &mut rng).unwrap();
    let s_flip = measure_similarity(&flipped, &net, &hcfg, &mut rng).unwrap();
    println!("repeat {s_repeat:?} flipped {s_flip:?}");
    assert!(s_repeat.similarity >= 0.8);
    assert!(s_flip.similarity >= 0.8);
    assert!(s_flip.a_star.unwrap() < 0.1);
    assert_eq!(s_repeat.head_used, Some(0));
}
