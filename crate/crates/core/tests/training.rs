use stainprompt::datasets::{generate_synthetic_corpus, load_corpus, SyntheticConfig};
use stainprompt::diffusion::{
    load_checkpoint, save_checkpoint, train_conditional_denoiser, Checkpoint, ScheduleConfig, TrainConfig, UNetConfig,
};
use stainprompt::schedule::{ConditionLabel, EpsilonModel};
use stainprompt::Tensor;

fn tiny_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        learning_rate: 1e-3,
        weight_decay: 1e-4,
        warmup: 2,
        image_size: 16,
        num_classes: 5,
        seed: 11,
        flip_horizontal: true,
        flip_vertical: true,
        p_null: 0.2,
        ema_decay: 0.9,
        model: UNetConfig { channels: vec![8, 16], embed_dim: 16, time_features: 8, groups: 4, ..UNetConfig::default() },
        schedule: ScheduleConfig::default(),
    }
}

fn tiny_corpus(dir: &std::path::Path) -> stainprompt::datasets::Corpus {
    let cfg: SyntheticConfig = serde_json::from_str(r#"{"n_samples":5,"image_size":16,"seed":3}"#).unwrap();
    generate_synthetic_corpus(dir, &cfg).unwrap();
    load_corpus(&dir.join("manifest.json")).unwrap()
}

fn probe(model: &dyn EpsilonModel<f32>, sched: &stainprompt::schedule::NoiseSchedule) -> Tensor<f32> {
    let x = Tensor::<f32>::full(&[1, 3, 16, 16], 0.25);
    model.predict(&x, 500, sched, ConditionLabel::Domain(1)).unwrap()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());

    let full = train_conditional_denoiser(&corpus, &tiny_config(4), None, |_, _| {}).unwrap();

    let half = train_conditional_denoiser(&corpus, &tiny_config(2), None, |_, _| {}).unwrap();
    let path = dir.path().join("half.ckpt");
    let ckpt = Checkpoint { model: half.model, train_config: tiny_config(2), iteration: 2, state: Some(half.state) };
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.iteration, 2);
    let rest = train_conditional_denoiser(&corpus, &tiny_config(4), loaded.state, |_, _| {}).unwrap();

    assert_eq!(full.losses[2..], rest.losses[..]);
    assert_eq!(full.model.net.params().hash(), rest.model.net.params().hash());
    assert_eq!(full.state.raw.hash(), rest.state.raw.hash());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let out = train_conditional_denoiser(&corpus, &tiny_config(2), None, |_, _| {}).unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint { model: out.model.clone(), train_config: tiny_config(2), iteration: 2, state: None };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.state.is_none());
    assert_eq!(back.model.vocab, ckpt.model.vocab);
    assert_eq!(back.model.weights_hash(), ckpt.model.weights_hash());
    let sched = back.model.schedule.clone();
    assert_eq!(probe(&back.model, &sched), probe(&out.model, &sched));
}

#[test]
fn truncated_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let out = train_conditional_denoiser(&corpus, &tiny_config(1), None, |_, _| {}).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint { model: out.model, train_config: tiny_config(1), iteration: 1, state: None }).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn mismatched_class_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let mut cfg = tiny_config(1);
    cfg.num_classes = 4;
    cfg.model.num_labels = 4;
    let err = train_conditional_denoiser(&corpus, &cfg, None, |_, _| {}).err().unwrap();
    assert!(err.to_string().contains("num_classes"), "{err}");
}
