use std::path::PathBuf;

use poar::config::{LossMode, TrainConfig};

fn preset(name: &str) -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    TrainConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}")).1
}

#[test]
fn desk_preset_matches_builtin_defaults() {
    assert_eq!(preset("desk.conf"), TrainConfig::desk());
}

#[test]
fn ablation_presets_differ_only_in_their_toggle() {
    let desk = TrainConfig::desk();
    let mut sc = desk;
    sc.model.single_token = true;
    assert_eq!(preset("desk-sc.conf"), sc);
    let mut mc = desk;
    mc.model.token_mask = false;
    mc.model.region_mask = false;
    assert_eq!(preset("desk-mc.conf"), mc);
    let mut mc_cm = desk;
    mc_cm.model.region_mask = false;
    assert_eq!(preset("desk-mc-cm.conf"), mc_cm);
    assert_eq!(preset("desk-otoc.conf"), TrainConfig { loss: LossMode::Otoc, ..desk });
    assert_eq!(preset("desk-both.conf"), TrainConfig { loss: LossMode::Both, ..desk });
}

#[test]
fn paper_preset_validates() {
    let cfg = preset("paper.conf");
    assert_eq!((cfg.model.height, cfg.model.patch, cfg.model.layers), (224, 16, 12));
    assert_eq!((cfg.lr, cfg.weight_decay, cfg.tau, cfg.epochs), (0.05, 0.2, 1.0, 100));
    assert!(cfg.augment);
    cfg.validate().unwrap();
}
