use std::path::Path;

use serde_json::{json, Value};

use cil_cli::config::{apply_overrides, load_config, parse_config, schema, Dataset, StrategyName};
use cil_cli::grid::{expand, Cell};
use cil_core::distill::KdScope;

fn quickstart() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let quick = load_config(&root.join("quickstart.json"), &[]).unwrap();
    assert!(matches!(quick.dataset, Dataset::Synthetic(_)));
    let fsc = load_config(&root.join("fsc.json"), &[]).unwrap();
    assert_eq!(fsc.model.input_channels, 40);
    assert_eq!(fsc.memory_sizes, vec![930, 465, 231]);
}

#[test]
fn unknown_keys_are_reported_with_their_path() {
    let mut doc = quickstart();
    doc["train"]["optimizer"]["learning_rate"] = json!(0.1);
    let err = format!("{:#}", parse_config(doc).unwrap_err());
    assert!(err.contains("train.optimizer"), "{err}");
    assert!(err.contains("learning_rate"), "{err}");

    let mut doc = quickstart();
    doc["kd_configs"][1]["pred"] = json!("everything");
    let err = format!("{:#}", parse_config(doc).unwrap_err());
    assert!(err.contains("kd_configs[1].pred"), "{err}");
}

#[test]
fn semantic_checks() {
    let mut doc = quickstart();
    doc["schema_version"] = json!(2);
    assert!(format!("{:#}", parse_config(doc).unwrap_err()).contains("schema_version"));

    let mut doc = quickstart();
    doc["model"]["input_channels"] = json!(9);
    assert!(format!("{:#}", parse_config(doc).unwrap_err()).contains("input_channels"));

    let mut doc = quickstart();
    doc["seeds"] = json!([]);
    assert!(parse_config(doc).is_err());

    let mut doc = quickstart();
    doc["memory_sizes"] = json!([]);
    assert!(parse_config(doc.clone()).is_err());
    doc["strategies"] = json!(["finetune", "offline"]);
    assert!(parse_config(doc).is_ok());
}

#[test]
fn overrides_reach_nested_fields_and_array_items() {
    let mut doc = quickstart();
    apply_overrides(
        &mut doc,
        &[
            "train.epochs_per_task=3".into(),
            "seeds.1.train=42".into(),
            "train.optimizer.lr=1e-4".into(),
            "strategies=[\"gem\"]".into(),
            "kd_configs.0.feature=DR".into(),
        ],
    )
    .unwrap();
    let cfg = parse_config(doc).unwrap();
    assert_eq!(cfg.train.epochs_per_task, 3);
    assert_eq!(cfg.seeds[1].train, 42);
    assert_eq!(cfg.train.optimizer.lr, 1e-4);
    assert_eq!(cfg.strategies, vec![StrategyName::Gem]);
    assert_eq!(cfg.kd_configs[0].feature, KdScope::All);

    let mut doc = quickstart();
    assert!(apply_overrides(&mut doc, &["no_equals_sign".into()]).is_err());
    assert!(apply_overrides(&mut doc, &["seeds.9.train=1".into()]).is_err());
    assert!(apply_overrides(&mut doc, &["seeds.x.train=1".into()]).is_err());
    assert!(apply_overrides(&mut doc, &["schema_version.deeper=1".into()]).is_err());
}

#[test]
fn grid_expansion_counts() {
    let mut doc = quickstart();
    doc["strategies"] = json!(["finetune", "rehearsal_icarl", "gem", "offline"]);
    doc["memory_sizes"] = json!([10, 20, 20]);
    let cfg = parse_config(doc).unwrap();
    let cells = expand(&cfg);
    // finetune: 2 KD × 2 seeds; icarl and gem: 2 KD × 2 distinct memories × 2 seeds;
    // offline: 2 seeds.
    assert_eq!(cells.len(), 4 + 8 + 8 + 2);
    assert!(cells
        .iter()
        .filter(|c| !c.strategy.uses_memory())
        .all(|c| c.memory == 0));
    assert!(cells
        .iter()
        .filter(|c| c.strategy == StrategyName::Offline)
        .all(|c| c.kd.feature == KdScope::None && c.kd.pred == KdScope::None));
    let names: std::collections::BTreeSet<String> = cells.iter().map(Cell::dir_name).collect();
    assert_eq!(names.len(), cells.len());
    assert!(names.contains("rehearsal_icarl_feat-R_pred-DR_m20_o1-t1"));
}

#[test]
fn schema_describes_the_config() {
    let s = schema();
    let props = s["properties"].as_object().unwrap();
    for key in ["schema_version", "dataset", "model", "train", "strategies", "kd_configs", "memory_sizes", "seeds"] {
        assert!(props.contains_key(key), "{key} missing from schema");
    }
    let checked_in = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/schema.json");
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(checked_in).unwrap()).unwrap();
    assert_eq!(on_disk, s, "configs/schema.json is stale; regenerate it with `cil schema`");
}
