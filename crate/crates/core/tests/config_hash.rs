use dapt_bench::cli::{ExperimentConfig, UNHASHED_FIELDS};
use proptest::prelude::*;
use serde_json::Value;

/// A config with every optional section filled in.
const FULL: &str = r#"
task = "ablation"
seeds = [0, 1]
output_dir = "out"
format = "markdown"
mode = "full"
inits = ["random", "dapt", { name = "Legal", checkpoint = "legal.bin" }]
ratios = [1.0, 0.1]
threshold = 0.5
top_k = 5

[data]
domain_corpus = "domain.txt"
split_seed = 4

[data.synthetic]

[data.classification]
path = "docs.jsonl"
format = "canonical-jsonl"

[data.cases]
path = "cases.jsonl"
format = "canonical-jsonl"

[tokenizer]
vocab = "vocab.txt"
seed = 2

[adapter]
bottleneck_dim = 8

[train]
grad_clip = 1.0

[pretrain]
grad_clip = 0.5
"#;

const ENUM_VALUES: [&str; 17] = [
    "dapt",
    "classify",
    "retrieve",
    "ablation",
    "adapter-compare",
    "markdown",
    "csv",
    "full",
    "adapter-only",
    "random",
    "cls",
    "mean",
    "f32",
    "f64",
    "canonical-jsonl",
    "eurlex-json-dir",
    "aus-xml-dir",
];

fn leaves(v: &Value, path: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                path.push(k.clone());
                leaves(child, path, out);
                path.pop();
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                path.push(i.to_string());
                leaves(child, path, out);
                path.pop();
            }
        }
        _ => out.push(path.clone()),
    }
}

fn leaf_mut<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |node, key| match node {
        Value::Object(map) => map.get_mut(key).expect("leaf path exists"),
        Value::Array(items) => &mut items[key.parse::<usize>().expect("array index")],
        _ => unreachable!("leaf paths only descend through containers"),
    })
}

/// Every valid single-leaf mutation of `base` at `path`.
fn mutations(base: &Value, path: &[String]) -> Vec<ExperimentConfig> {
    let current = {
        let mut v = base.clone();
        leaf_mut(&mut v, path).clone()
    };
    let candidates: Vec<Value> = match &current {
        Value::Bool(b) => vec![Value::Bool(!b)],
        Value::Number(n) if n.is_u64() => vec![Value::from(n.as_u64().unwrap() + 1)],
        Value::Number(n) => vec![Value::from(n.as_f64().unwrap() * 0.5 + 0.01)],
        Value::String(s) => ENUM_VALUES
            .iter()
            .filter(|e| *e != s)
            .map(|e| Value::from(*e))
            .chain([Value::from(format!("{s}.alt"))])
            .collect(),
        Value::Null => vec![Value::from(0.25)],
        _ => unreachable!("containers are not leaves"),
    };
    candidates
        .into_iter()
        .filter_map(|c| {
            let mut v = base.clone();
            *leaf_mut(&mut v, path) = c;
            serde_json::from_value(v).ok()
        })
        .collect()
}

#[test]
fn every_hashed_leaf_changes_the_hash() {
    let cfg = ExperimentConfig::from_toml_str(FULL).unwrap();
    let base = serde_json::to_value(&cfg).unwrap();
    let original = cfg.hash().unwrap();
    let mut paths = Vec::new();
    leaves(&base, &mut Vec::new(), &mut paths);
    assert!(paths.len() > 60, "only {} leaves enumerated", paths.len());

    for path in &paths {
        let variants = mutations(&base, path);
        assert!(!variants.is_empty(), "no valid mutation for {}", path.join("."));
        let unhashed = UNHASHED_FIELDS.contains(&path[0].as_str());
        for variant in variants {
            let changed = variant.hash().unwrap() != original;
            assert_eq!(changed, !unhashed, "leaf {} (unhashed: {unhashed})", path.join("."));
        }
    }
}

#[test]
fn run_root_uses_task_and_hash_prefix() {
    let cfg = ExperimentConfig::from_toml_str(FULL).unwrap();
    let root = cfg.run_root().unwrap();
    let name = root.file_name().unwrap().to_str().unwrap();
    assert_eq!(name, format!("ablation-{}", &cfg.hash().unwrap()[..16]));
    assert_eq!(root.parent().unwrap(), std::path::Path::new("out"));
}

proptest! {
    #[test]
    fn seeds_output_and_format_do_not_move_the_hash(
        seeds in proptest::collection::vec(any::<u64>(), 1..5),
        dir in "[a-z]{1,8}",
        csv in any::<bool>(),
    ) {
        let base = ExperimentConfig::from_toml_str(FULL).unwrap();
        let mut cfg = base.clone();
        cfg.seeds = seeds;
        cfg.output_dir = dir.into();
        cfg.format = if csv { dapt_bench::cli::TableFormat::Csv } else { dapt_bench::cli::TableFormat::Markdown };
        prop_assert_eq!(cfg.hash().unwrap(), base.hash().unwrap());
    }

    #[test]
    fn hash_is_stable_across_a_toml_round_trip(threshold in 0.05f64..0.95, top_k in 1usize..20) {
        let mut cfg = ExperimentConfig::from_toml_str(FULL).unwrap();
        cfg.threshold = threshold;
        cfg.top_k = top_k;
        let reparsed = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(reparsed.hash().unwrap(), cfg.hash().unwrap());
    }
}
