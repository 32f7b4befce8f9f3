use mrvpc_core::data::{gen_corpus, WorldSpec};
use mrvpc_core::model::{ModelConfig, Mvpc};
use mrvpc_core::timetok::build_vocab;
use mrvpc_harness::checkpoint::{from_bytes, load, save, to_bytes, vocab_hash, Checkpoint, CheckpointMeta};
use mrvpc_harness::HarnessError;

fn sample(d: usize) -> Checkpoint {
    let spec = WorldSpec {
        frames: 8,
        feature_dim: 6,
        ..WorldSpec::default()
    };
    let corpus = gen_corpus(&spec, 6, 1).unwrap();
    let vocab = build_vocab(&corpus, 20).unwrap();
    let cfg = ModelConfig {
        d,
        heads: 2,
        video_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        max_caption_len: 24,
        max_aux_len: 40,
        ..ModelConfig::new(8, 6, vocab.len())
    };
    let model = Mvpc::new(cfg, 3).unwrap();
    Checkpoint::new(
        &model,
        &vocab,
        CheckpointMeta {
            mode: "vanilla".into(),
            epochs: 2,
            seed: 3,
            config_hash: "0123456789abcdef".into(),
        },
    )
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = sample(16);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save(&a, &ck).unwrap();
    let loaded = load(&a).unwrap();
    save(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.meta, ck.meta);
    assert_eq!(vocab_hash(&loaded.vocab), vocab_hash(&ck.vocab));
    assert_eq!(loaded.model().unwrap().params.values, ck.params.values);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = to_bytes(&sample(16));
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        assert!(matches!(from_bytes(&bytes[..cut]), Err(HarnessError::Checkpoint(_))), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(from_bytes(&longer).is_err());
}

#[test]
fn version_and_magic_are_checked() {
    let mut bytes = to_bytes(&sample(16));
    bytes[8] = 9;
    let err = from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    bytes[0] = b'X';
    assert!(from_bytes(&bytes).is_err());
}

#[test]
fn parameters_from_another_config_fail_shape_validation() {
    let mut ck = sample(16);
    ck.config = sample(32).config;
    let err = from_bytes(&to_bytes(&ck)).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}
