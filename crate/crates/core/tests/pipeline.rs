use mrn_core::engine::{evaluate, load_model, load_run_dataset, save_model, train, RunConfig};
use mrn_core::episodes::{load_dataset, synth_dataset, write_dataset};

fn quick(extra: &[&str]) -> RunConfig {
    let mut kv = vec!["queries=5".to_string(), "episodes=40".to_string()];
    kv.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::default().with_overrides(&kv).unwrap()
}

#[test]
fn dataset_file_and_checkpoint_reproduce_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.mrnd");
    let mem_cfg = quick(&[]);
    let ds = synth_dataset(&mem_cfg.synth).unwrap();
    write_dataset(&ds, &data).unwrap();
    let file_cfg = quick(&[&format!("dataset={}", data.display())]);
    let from_file = load_run_dataset(&file_cfg).unwrap();
    assert_eq!(from_file.items(), ds.items());
    assert_eq!(load_dataset(&data).unwrap().split_map(), ds.split_map());

    let a = train(&mem_cfg, &ds, 7).unwrap();
    let b = train(&file_cfg, &from_file, 7).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params, b.params);

    let ckpt = dir.path().join("m.mrnc");
    save_model(&ckpt, &file_cfg, &b.params).unwrap();
    let (cfg, params) = load_model(&ckpt).unwrap();
    let r1 = evaluate(&mem_cfg, &a.params, &ds, 30, 2).unwrap();
    let r2 = evaluate(&cfg, &params, &load_run_dataset(&cfg).unwrap(), 30, 2).unwrap();
    assert_eq!(r1.per_episode, r2.per_episode);
}

#[test]
fn training_loss_falls() {
    for seed in 0..5 {
        let cfg = quick(&["episodes=500"]);
        let ds = synth_dataset(&cfg.synth).unwrap();
        let losses = train(&cfg, &ds, seed).unwrap().losses;
        let window = |r: std::ops::Range<usize>| losses[r].iter().sum::<f64>() / 100.0;
        assert!(window(400..500) < window(0..100), "seed {seed}");
    }
}

#[test]
fn variants_differ_only_where_expected() {
    let ds = synth_dataset(&quick(&[]).synth).unwrap();
    let mrn = train(&quick(&[]), &ds, 3).unwrap();
    let euclid = train(&quick(&["variant=mrn_euclid"]), &ds, 3).unwrap();
    assert_ne!(mrn.losses, euclid.losses);
    let mean = train(&quick(&["variant=mrn_mean"]), &ds, 3).unwrap();
    let strategy_mean = train(&quick(&["strategy=mean"]), &ds, 3).unwrap();
    assert_eq!(mean.losses, strategy_mean.losses);
}
