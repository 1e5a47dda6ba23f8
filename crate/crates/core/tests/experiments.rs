use echelon::config::Config;
use echelon::experiments::{run_experiment, ExperimentKind, ExperimentManifest, ParamRange, TrialRecord};

fn tiny() -> Config {
    let mut c = Config::default();
    c.ppo.n_steps = 128;
    c.ppo.batch_size = 64;
    c.search.n_configs = 3;
    c.search.seeds_per_config = 2;
    c.search.trial_timesteps = 256;
    c.search.space.actor_layers = ParamRange::fixed(1.0);
    c.search.space.actor_width = ParamRange::fixed(8.0);
    c.search.space.n_epochs = ParamRange::new(2.0, 3.0, echelon::experiments::Scaling::Linear);
    c
}

#[test]
fn leaderboard_scores_recompute_from_trial_records() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(ExperimentKind::Sweep, &tiny(), &[], dir.path()).unwrap();
    let mut board = csv::Reader::from_path(dir.path().join("leaderboard.csv")).unwrap();
    let mut rows = 0;
    for rec in board.records() {
        let rec = rec.unwrap();
        let trial: usize = rec[1].parse().unwrap();
        let score: f64 = rec[2].parse().unwrap();
        let text = std::fs::read_to_string(dir.path().join(format!("trials/trial_{trial:02}.json"))).unwrap();
        let record: TrialRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(record.seed_returns.len(), 2);
        let mean = record.seed_returns.iter().sum::<f64>() / record.seed_returns.len() as f64;
        assert_eq!(score, mean);
        assert!(tiny().search.space.contains(&record.config));
        rows += 1;
    }
    assert_eq!(rows, 3);
    let incumbent = Config::load(Some(&dir.path().join("incumbent.toml")), &[]).unwrap();
    assert_eq!(incumbent.actor.width, 8);
}

#[test]
fn manifest_is_written_before_the_run_starts() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let err = run_experiment(ExperimentKind::Evaluate, &tiny(), &[missing.clone()], dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing.json"), "{err}");
    let manifest = ExperimentManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.kind, ExperimentKind::Evaluate);
    assert_eq!(manifest.checkpoints, vec![missing]);
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    ExperimentManifest::new(ExperimentKind::Train, &tiny(), &[]).save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"n_steps\": 128", "\"n_steps\": 256");
    std::fs::write(&path, text).unwrap();
    assert!(ExperimentManifest::load(&path).is_err());
}
