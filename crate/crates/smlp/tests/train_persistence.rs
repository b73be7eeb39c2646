//! Checkpoint round-trips, tamper detection, and small training runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smlp::analyzer::count_params;
use smlp::arch::{build_variant, Model, Overrides};
use smlp::layers::Mode;
use smlp::params::ParamKind;
use smlp::tape::Tape;
use smlp::tensor::Tensor;
use smlp::train::{
    evaluate, load_checkpoint, save_checkpoint, train, AdamState, Dataset, Normalize, TrainConfig,
};

fn tiny_model(seed: u64) -> Model<f32> {
    build_variant(
        "smlpnet-t",
        &Overrides {
            resolution: Some((32, 32)),
            embed_dim: Some(8),
            depths: Some(vec![1, 1, 1, 1]),
            num_classes: Some(10),
            ..Overrides::default()
        },
        seed,
    )
    .unwrap()
}

fn fixed_input() -> Tensor<f32> {
    Tensor::from_fn(&[2, 32, 32, 3], |i| ((i * 31) % 97) as f32 / 97.0)
}

fn logits_of(model: &mut Model<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let x = tape.leaf(fixed_input());
    let y = model.forward(&mut tape, x, Mode::Eval, None).unwrap();
    tape.value(y).clone()
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = tiny_model(3);
    // make running stats non-trivial so buffers are exercised as well
    {
        let mut tape = Tape::new();
        let x = tape.leaf(fixed_input());
        model.forward(&mut tape, x, Mode::Train, None).unwrap();
    }
    let before = logits_of(&mut model);
    let opt = AdamState::new(&model.params);
    let rng = ChaCha8Rng::seed_from_u64(11);
    save_checkpoint(&path, &model, Some(&opt), 7, &rng, &Normalize::default()).unwrap();

    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.epoch, 7);
    let (mut restored, opt2, rng2) = ckpt.restore().unwrap();
    assert!(opt2.is_some());
    assert_eq!(rng2.get_seed(), rng.get_seed());
    assert_eq!(rng2.get_word_pos(), rng.get_word_pos());
    let after = logits_of(&mut restored);
    assert_eq!(before, after, "logits diverged after round-trip");
}

#[test]
fn checkpoint_has_one_record_per_counted_parameter_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = tiny_model(5);
    let rng = ChaCha8Rng::seed_from_u64(0);
    save_checkpoint(&path, &model, None, 0, &rng, &Normalize::default()).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();

    let trainable = model
        .params
        .entries()
        .filter(|(_, e)| e.kind != ParamKind::Buffer)
        .count();
    let param_records: Vec<_> = ckpt
        .records
        .iter()
        .filter(|r| r.name.starts_with("param."))
        .collect();
    assert_eq!(param_records.len(), trainable);

    // and the record payloads add up to the analyzer's exact parameter walk
    let report = count_params(&model);
    let recorded: u64 = param_records.iter().map(|r| r.data.len() as u64).sum();
    assert_eq!(recorded, report.params);
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = tiny_model(1);
    save_checkpoint(
        &path,
        &model,
        None,
        0,
        &ChaCha8Rng::seed_from_u64(0),
        &Normalize::default(),
    )
    .unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn tampered_config_fails_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = tiny_model(1);
    save_checkpoint(
        &path,
        &model,
        None,
        0,
        &ChaCha8Rng::seed_from_u64(0),
        &Normalize::default(),
    )
    .unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // flip a digit inside the embedded config text ("embed_dim = 8")
    let needle = b"embed_dim = 8";
    let pos = bytes
        .windows(needle.len())
        .position(|win| win == needle)
        .unwrap();
    bytes[pos + needle.len() - 1] = b'9';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(smlp::Error::DigestMismatch { .. })
    ));
}

#[test]
fn single_sample_memorization_reaches_perfect_accuracy() {
    // one record, one class: a few steps suffice to memorize it, and that is
    // the perfectly-memorized accuracy = 1.0 case
    let mut bytes = vec![0u8; 3073];
    bytes[0] = 4;
    for (i, b) in bytes.iter_mut().enumerate().skip(1) {
        *b = ((i * 7) % 256) as u8;
    }
    let ds = Dataset::from_records(&bytes, "mem").unwrap();
    let mut model = tiny_model(2);
    let config = TrainConfig {
        total_epochs: 150,
        warmup_epochs: 5,
        batch_size: 1,
        augment: false,
        label_smoothing: 0.0,
        weight_decay: 0.0,
        lr_max: 5e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let (log, _, _) = train(&mut model, &ds, None, &config, &Normalize::default(), None).unwrap();
    assert!(
        log.epochs.last().unwrap().eval_acc == 1.0,
        "final eval acc {}",
        log.epochs.last().unwrap().eval_acc
    );
    let (acc, _) = evaluate(&mut model, &ds, &Normalize::default(), 1).unwrap();
    assert_eq!(acc, 1.0);
}
