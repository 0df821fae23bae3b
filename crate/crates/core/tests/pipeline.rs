use lemma::data::write_synthetic_dataset;
use lemma::model::LemmaConfig;
use lemma::{evaluate, train, Checkpoint, Dataset, LossConfig, LossKind, Split, Tensor, TrainConfig};
use tempfile::TempDir;

fn dataset(count: usize, size: usize) -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    write_synthetic_dataset(dir.path(), count, size, 4, 11, 0.25).unwrap();
    let data = Dataset::load(dir.path().join("manifest.json")).unwrap();
    (dir, data)
}

fn config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(LemmaConfig::new(1, 1, 1, 4), LossConfig::new(LossKind::Focal));
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.seed = 5;
    cfg
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn training_reduces_loss() {
    let (_dir, data) = dataset(16, 32);
    let out = train(&data, &config(4), None).unwrap();
    assert_eq!(out.log.len(), 4);
    assert_eq!(out.step, 12);
    let (first, last) = (out.log[0].train_loss, out.log[3].train_loss);
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.log.iter().all(|r| r.val_miou.is_some()));
    assert!(out.best_val_miou.unwrap() >= out.log[3].val_miou.unwrap());
}

#[test]
fn checkpoint_file_round_trip_is_bit_identical() {
    let (dir, data) = dataset(8, 32);
    let mut cfg = config(1);
    cfg.last_checkpoint = Some(dir.path().join("last.ckpt"));
    let out = train(&data, &cfg, None).unwrap();
    let loaded = Checkpoint::load(dir.path().join("last.ckpt")).unwrap();
    assert_eq!(loaded.step, out.step);
    let batch = data.ordered_batches(Split::Val, 2).unwrap().next().unwrap().unwrap();
    let a = out.model.scores(&batch.images).unwrap();
    let b = loaded.model.scores(&batch.images).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(loaded.to_bytes(), out.last.to_bytes());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (dir, data) = dataset(16, 32);
    let full = train(&data, &config(3), None).unwrap();

    let mut first = config(3);
    first.max_steps = Some(4);
    first.last_checkpoint = Some(dir.path().join("part.ckpt"));
    first.log_path = Some(dir.path().join("log.jsonl"));
    let part = train(&data, &first, None).unwrap();
    assert!(part.interrupted);
    assert_eq!(part.step, 4);

    let mut rest = config(3);
    rest.log_path = first.log_path.clone();
    let resumed = train(&data, &rest, Some(Checkpoint::load(dir.path().join("part.ckpt")).unwrap())).unwrap();
    assert!(!resumed.interrupted);
    assert_eq!(resumed.step, full.step);
    for ((na, a), (nb, b)) in full.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(bits(a), bits(b), "{na} differs after resume");
    }
    let tail = &full.log[full.log.len() - resumed.log.len()..];
    for (a, b) in tail.iter().zip(&resumed.log) {
        assert_eq!((a.epoch, a.step, a.train_loss, a.val_miou), (b.epoch, b.step, b.train_loss, b.val_miou));
    }
    let lines = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), part.log.len() + resumed.log.len());
}

#[test]
fn evaluation_is_deterministic() {
    let (_dir, data) = dataset(8, 32);
    let out = train(&data, &config(1), None).unwrap();
    let a = evaluate(&out.model, &data, Split::Val, 2).unwrap();
    let b = evaluate(&out.model, &data, Split::Val, 3).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&out.model, &data, Split::Test, 2).is_err());
}

#[test]
fn resume_rejects_other_config() {
    let (_dir, data) = dataset(8, 32);
    let out = train(&data, &config(1), None).unwrap();
    let mut other = config(2);
    other.model = LemmaConfig::new(0, 1, 1, 4);
    assert!(train(&data, &other, Some(out.last)).is_err());
}
