use super::*;

const TINY: &str = r#"
seed = 3
out = "unused"

[backbone]
d_model = 16
n_layers = 2
n_heads = 2
vocab_size = 128
max_seq_len = 48
patch_grid = 4
ffn_mult = 2

[pretrain]
steps = 6
batch_size = 4

[data]
pretrain_explicit = 24
pretrain_reasoning = 8
adapt_train = 16
eval = 8
diagnose_per_tier = 6

[trainer]
learning_rate = 0.02
total_steps = 5
batch_size = 4

[readout]
n_queries = 2
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY).unwrap()
}

#[test]
fn default_config_is_valid_and_round_trips() {
    let mut d = RunConfig::default();
    d.resolve();
    d.validate().unwrap();
    assert_eq!(RunConfig::from_toml_str(&d.to_toml().unwrap()).unwrap(), d);
    let t = tiny();
    assert_eq!(t.backbone.d_model, 16);
    assert_eq!(t.trainer.learning_rate, DESK_LEARNING_RATE);
    assert_eq!(t.trainer.seed, seeds::derive(3, "adapt"));
    assert_eq!(RunConfig::from_toml_str(&t.to_toml().unwrap()).unwrap(), t);
}

#[test]
fn unknown_keys_are_config_errors_naming_the_key() {
    for (src, key) in [
        ("bogus = 1", "bogus"),
        ("[trainer]\nlearning_rat = 0.1", "learning_rat"),
        ("[readout]\nvariant = \"shared-queries\"\nnqueries = 3", "nqueries"),
    ] {
        match RunConfig::from_toml_str(src) {
            Err(Error::Config(m)) => assert!(m.contains(key), "{m}"),
            other => panic!("{src}: {other:?}"),
        }
    }
    assert!(matches!(
        RunConfig::from_toml_str("[readout]\nvariant = \"nope\""),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::from_toml_str("[data]\npretrain_explicit = 0\npretrain_reasoning = 0"),
        Err(Error::Config(_))
    ));
}

#[test]
fn adapt_data_is_split_and_disjoint() {
    let cfg = tiny();
    let ds = adapt_dataset(&cfg).unwrap();
    let train = ds.split_pairs(Split::AdaptTrain);
    let eval = ds.split_pairs(Split::Eval);
    assert_eq!((train.len(), eval.len()), (16, 8));
    let ids: Vec<String> = train.iter().map(|p| p.id.clone()).collect();
    check_contamination(&ids, &eval).unwrap();
    assert!(matches!(check_contamination(&ids, &train[..1]), Err(Error::Contamination(_))));
}

#[test]
fn tiny_pipeline_runs_and_reruns_identically() {
    let cfg = tiny();
    let run = |dir: &Path| {
        let sink = Sink::new(dir, true).unwrap();
        let b = run_pretrain(&cfg, &sink).unwrap();
        let b2 = load_backbone(&sink.path(BACKBONE_FILE)).unwrap();
        assert_eq!(b.checksum(), b2.checksum());
        let a = run_adapt(&cfg, &b2, &sink).unwrap();
        let (a2, ids) = load_adapter(&sink.path(ADAPTER_FILE), b2.config()).unwrap();
        assert_eq!(a.named_params().len(), a2.named_params().len());
        assert_eq!(ids.len(), 16);
        let out = run_eval(&cfg, &b2, &a2, &ids, &sink).unwrap();
        assert_eq!(out.retrieval.len(), 2);
        assert!(out.geometry.is_some());
        run_diagnose(&cfg, &b2, &sink).unwrap();
    };
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(x.path());
    run(y.path());
    let mut names: Vec<String> = fs::read_dir(x.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for f in [
        "adapt_log.jsonl",
        "adapt_metrics.csv",
        ADAPTER_FILE,
        BACKBONE_FILE,
        CONFIG_FILE,
        "diagnose.csv",
        "embeddings.jsonl",
        "geometry.csv",
        "margins.csv",
        "pca.svg",
        "pretrain_log.jsonl",
        "retrieval.csv",
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
    for n in &names {
        assert_eq!(fs::read(x.path().join(n)).unwrap(), fs::read(y.path().join(n)).unwrap(), "{n}");
    }
    let header = fs::read_to_string(x.path().join("adapt_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["trainable"], 2 * 16 + 1);
}

#[test]
fn zero_steps_writes_the_untrained_adapter() {
    let mut cfg = tiny();
    cfg.trainer.total_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::new(dir.path(), true).unwrap();
    let b = run_pretrain(&cfg, &sink).unwrap();
    let a = run_adapt(&cfg, &b, &sink).unwrap();
    assert_eq!(a.to_container().unwrap().entries, fresh_adapter(&cfg, b.config()).unwrap().to_container().unwrap().entries);
    let c = Container::load(&sink.path(ADAPTER_FILE)).unwrap();
    assert!(c.entries.iter().all(|e| !e.name.starts_with("blocks") && e.name != "tok_emb"));
}

#[test]
fn ablation_rows_share_data_seeds() {
    let mut cfg = tiny();
    cfg.ablate = AblateConfig {
        axis: AblationAxis::Pooling,
        settings: vec!["mean".into(), "max".into()],
        seeds: vec![1],
    };
    cfg.trainer.total_steps = 2;
    let dir = tempfile::tempdir().unwrap();
    let sink = Sink::new(dir.path(), true).unwrap();
    let b = run_pretrain(&cfg, &sink).unwrap();
    let rows = run_ablate(&cfg, &b, &sink).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].data_seed, rows[1].data_seed);
    let csv = fs::read_to_string(sink.path("ablation.csv")).unwrap();
    assert!(csv.starts_with("axis,setting,seed,data_seed,trainable,r1_i2t,r1_t2i,mean_recall\npooling,mean,1,"));
    assert!(ablation_config(&cfg, AblationAxis::Queries, "many", 0).is_err());
}
