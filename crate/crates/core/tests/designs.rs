use std::path::{Path, PathBuf};

use diffloco_core::checkpoint::Checkpoint;
use diffloco_core::trainer::{validate, TrainConfig};
use diffloco_core::load_design;

fn designs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../designs")
}

/// Actuator groups counted by hand from the design files: one per actuated
/// spring, or the listed particle regions of the block.
#[test]
fn bundled_designs_have_the_hand_counted_actuator_groups() {
    for (name, nodes, groups) in [
        ("square", 4, 6),
        ("quadruped", 18, 16),
        ("stool", 18, 12),
        ("huge_stool", 18, 22),
        ("mpm_block", 16, 2),
    ] {
        let d = load_design(designs().join(format!("{name}.json"))).unwrap();
        assert_eq!(d.num_nodes(), nodes, "{name}");
        assert_eq!(d.num_actuators(), groups, "{name}");
        let cfg = TrainConfig::default();
        let p = cfg.init_params(&d);
        assert_eq!(p.b2.len(), groups, "{name}");
        let input = cfg.effective_features().input_dim(&d);
        assert_eq!(p.num_params(), (input + 1) * 64 + 65 * groups, "{name}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_validation() {
    let design = load_design(designs().join("square.json")).unwrap();
    let cfg = TrainConfig { hidden_dim: 8, seed: 4, ..Default::default() };
    let mut params = cfg.init_params(&design);
    params.b2.iter_mut().for_each(|b| *b += 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::new(&params, &cfg, &design, 7).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params().unwrap(), params);
    assert_eq!(loaded.metadata.iteration, 7);
    let before = validate(&params, &cfg, &design).unwrap();
    let after = validate(&loaded.params().unwrap(), &loaded.config, &loaded.agent().unwrap()).unwrap();
    assert_eq!(before, after);
}
