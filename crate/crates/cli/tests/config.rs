use mima_cli::config::SCHEMA_VERSION;
use mima_cli::{presets, CliError, ExperimentConfig};

type Mutation = Box<dyn Fn(&mut ExperimentConfig)>;

fn config_key(err: CliError) -> String {
    match err {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn presets_validate() {
    for name in presets::PRESETS {
        let cfg = presets::preset(name).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(cfg.schema_version, SCHEMA_VERSION);
        assert_eq!(cfg.name, name);
    }
    assert!(presets::preset("4concept").is_none());
}

#[test]
fn bundled_groups_have_five_sets() {
    for (name, n) in [("2concept", 2), ("3concept", 3)] {
        let cfg = presets::preset(name).unwrap();
        assert_eq!(cfg.groups.len(), 5);
        assert!(cfg.groups.iter().all(|g| g.targets.len() == n && g.others.len() == n));
        assert_eq!(cfg.seeds.len(), 5);
    }
}

#[test]
fn toml_round_trip_is_a_fixed_point() {
    for name in presets::PRESETS {
        let cfg = presets::preset(name).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn hash_tracks_content() {
    let a = presets::two_concept();
    let mut b = a.clone();
    b.immunize.beta *= 2.0;
    assert_eq!(a.hash().unwrap().len(), 64);
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let text = presets::minimal().to_toml().unwrap();
    let top = format!("learning_rate = 0.1\n{text}");
    assert_eq!(config_key(ExperimentConfig::from_toml_str(&top).unwrap_err()), "learning_rate");

    let nested = text.replace("[world]\n", "[world]\nconcept_pol = 3\n");
    assert_ne!(nested, text);
    assert_eq!(config_key(ExperimentConfig::from_toml_str(&nested).unwrap_err()), "concept_pol");
}

#[test]
fn missing_keys_are_named() {
    let text = presets::minimal().to_toml().unwrap();
    let without: String = text.lines().filter(|l| !l.starts_with("seeds =")).map(|l| format!("{l}\n")).collect();
    assert_eq!(config_key(ExperimentConfig::from_toml_str(&without).unwrap_err()), "seeds");
}

#[test]
fn validation_names_the_offending_key() {
    let cases: Vec<(&str, Mutation)> = vec![
        ("schema_version", Box::new(|c| c.schema_version = 2)),
        ("seeds", Box::new(|c| c.seeds.clear())),
        ("seeds", Box::new(|c| c.seeds = vec![1, 1])),
        ("methods", Box::new(|c| c.methods = vec![c.methods[0], c.methods[0]])),
        ("world.pool_radius", Box::new(|c| c.world.pool_radius = 0.0)),
        ("world.max_cosine", Box::new(|c| c.world.max_cosine = 1.5)),
        ("immunize", Box::new(|c| c.immunize.alpha = -1.0)),
        ("attacks", Box::new(|c| c.attacks.clear())),
        ("attacks[0]", Box::new(|c| c.attacks[0].steps = 0)),
        ("attacks[1].kind", Box::new(|c| c.attacks.push(c.attacks[0].clone()))),
        ("attacks[0].steps", Box::new(|c| c.evaluation.checkpoints = vec![0, 1000])),
        ("evaluation.checkpoints", Box::new(|c| c.evaluation.checkpoints = vec![5, 5])),
        ("evaluation.metrics", Box::new(|c| c.evaluation.metrics.clear())),
        ("groups", Box::new(|c| c.groups.clear())),
        ("groups[0].name", Box::new(|c| c.groups[0].name = "a-b".into())),
        ("groups[0].targets", Box::new(|c| c.groups[0].targets = vec![7])),
        ("groups[0].targets", Box::new(|c| c.groups[0].others = vec![0])),
    ];
    for (key, mutate) in cases {
        let mut cfg = presets::minimal();
        mutate(&mut cfg);
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert_eq!(config_key(err), key);
    }
}

#[test]
fn group_concepts_list_targets_first() {
    let cfg = presets::two_concept();
    assert_eq!(ExperimentConfig::group_concepts(&cfg.groups[0]), vec![0, 1, 4, 5]);
}
