use poar::catalog::synthetic_catalog;
use poar::config::TrainConfig;
use poar::synth::{generate_dataset, SyntheticSpec};
use poar::train::{train, Samples};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn loss_falls_over_thirty_epochs() {
    let cat = synthetic_catalog();
    let spec = SyntheticSpec::for_catalog(&cat, 32, 32, 0.03).unwrap();
    let ds = generate_dataset(&spec, &cat, 64, 0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        eval_every: 0,
        ..TrainConfig::desk()
    };
    let samples = Samples {
        images: &ds.train.images,
        labels: &ds.train.labels,
    };
    let out = train(&cfg, &cat, samples, None, |_| {}).unwrap();
    let first = out.log[0].loss;
    let last = out.log[29].loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(out.checkpoint.step, 30 * 8);
}
