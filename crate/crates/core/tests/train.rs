use mrvpc_core::data::{gen_corpus, Instance, WorldSpec};
use mrvpc_core::model::{ModelConfig, Mvpc};
use mrvpc_core::nn::Tensor;
use mrvpc_core::rng::stream;
use mrvpc_core::timetok::{build_vocab, Vocab};
use mrvpc_core::train::*;
use mrvpc_core::{Error, Result};

fn world() -> WorldSpec {
    WorldSpec {
        frames: 8,
        feature_dim: 6,
        k_min: 1,
        k_max: 3,
        ..WorldSpec::default()
    }
}

fn setup(n: usize) -> (Vec<Instance>, Vocab, Mvpc<f32>) {
    let spec = world();
    let corpus = gen_corpus(&spec, n, 21).unwrap();
    let vocab = build_vocab(&corpus, 20).unwrap();
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        video_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        max_caption_len: 32,
        max_aux_len: 48,
        ..ModelConfig::new(spec.frames, spec.feature_dim, vocab.len())
    };
    let model = Mvpc::new(cfg, 5).unwrap();
    (corpus, vocab, model)
}

fn plan(mode: Mode, epochs: usize) -> TrainPlan {
    TrainPlan {
        mode,
        epochs,
        batch_size: 4,
        lr: 1e-3,
        seed: 9,
        ..TrainPlan::default()
    }
}

#[test]
fn drop_am_rates_over_100k_calls() {
    let (corpus, _, _) = setup(1);
    let inst = &corpus[0];
    let mut rng = stream(1, "dropam-test", 0);
    let n = 100_000;
    let (mut a, mut e, mut both) = (0, 0, 0);
    for _ in 0..n {
        let out = drop_am(inst, 0.5, 0.5, false, &mut rng);
        assert_eq!(out.video, inst.video);
        assert_eq!(out.caption, inst.caption);
        let (da, de) = (out.asr.is_none(), out.events.is_none());
        a += da as usize;
        e += de as usize;
        both += (da && de) as usize;
    }
    let f = |c: usize| c as f64 / n as f64;
    assert!((f(a) - 0.5).abs() <= 0.006, "asr {}", f(a));
    assert!((f(e) - 0.5).abs() <= 0.006, "events {}", f(e));
    assert!((f(both) - 0.25).abs() <= 0.006, "joint {}", f(both));
}

#[test]
fn vanilla_never_drops_and_zero_epochs_is_identity() {
    let (corpus, vocab, model) = setup(12);
    let mut m = model.clone();
    let log = train(&mut m, &corpus, &vocab, &plan(Mode::Vanilla, 0), None).unwrap();
    assert_eq!(m.params.values, model.params.values);
    assert_eq!(log.steps, 0);

    let log = train(&mut m, &corpus, &vocab, &plan(Mode::Vanilla, 1), None).unwrap();
    assert_eq!(log.drop_calls, 0);
    assert_eq!(log.steps, 3);
    let mut d = model.clone();
    let log = train(&mut d, &corpus, &vocab, &plan(Mode::DropAm, 1), None).unwrap();
    assert_eq!(log.drop_calls, 12);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (corpus, vocab, model) = setup(16);
    let run = || {
        let mut m = model.clone();
        let log = train(&mut m, &corpus, &vocab, &plan(Mode::DropAm, 6), None).unwrap();
        (log, m)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la.initial_loss.unwrap().to_bits(), lb.initial_loss.unwrap().to_bits());
    assert_eq!(la.epoch_loss, lb.epoch_loss);
    assert_eq!(ma.params.values, mb.params.values);
    assert!(la.epoch_loss.iter().all(|l| l.is_finite()));
    assert!(la.epoch_loss.last().unwrap() < &la.epoch_loss[0]);
}

#[test]
fn nan_input_aborts_with_diagnostics() {
    let (mut corpus, vocab, model) = setup(8);
    corpus[5].video.data_mut()[0] = f32::NAN;
    let bad = corpus[5].id.clone();
    let mut m = model.clone();
    match train(&mut m, &corpus, &vocab, &plan(Mode::Vanilla, 1), None) {
        Err(Error::NonFinite { batch_ids, .. }) => assert!(batch_ids.contains(&bad)),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

struct Oracle;

impl Captioner for Oracle {
    fn caption(&self, inst: &Instance) -> Result<Vec<String>> {
        Ok(inst.caption.clone())
    }
}

struct Silent;

impl Captioner for Silent {
    fn caption(&self, _: &Instance) -> Result<Vec<String>> {
        Ok(vec![])
    }
}

#[test]
fn identity_teacher_distill_set() {
    let (corpus, _, _) = setup(10);
    let kd = build_distill_set(&Oracle, &corpus).unwrap();
    assert_eq!(kd.len(), corpus.len());
    for (d, src) in kd.items.iter().zip(&corpus) {
        assert_eq!(d.source_id, src.id);
        assert_eq!(d.instance.caption, src.caption);
        assert_eq!(d.instance.video, src.video);
        assert_eq!(d.instance.asr, src.asr);
        assert_eq!(d.instance.events, src.events);
        assert!(!d.empty);
    }
    let aug = make_augmented(&corpus, &kd).unwrap();
    assert_eq!(aug.len(), 2 * corpus.len());
    for (i, src) in corpus.iter().enumerate() {
        assert_eq!(&aug[2 * i], src);
        assert_eq!(aug[2 * i + 1].id, format!("{}#kd", src.id));
    }
    let short = make_augmented(&corpus[1..], &kd);
    assert!(matches!(short, Err(Error::Argument(_))));
}

#[test]
fn empty_teacher_captions_are_flagged_and_skipped() {
    let (corpus, vocab, model) = setup(6);
    let kd = build_distill_set(&Silent, &corpus).unwrap();
    assert_eq!(kd.empty_count(), 6);
    let aug = make_augmented(&corpus, &kd).unwrap();
    let mut m = model.clone();
    let log = train(&mut m, &aug, &vocab, &plan(Mode::Mrvpc, 1), None).unwrap();
    assert_eq!(log.skipped_empty, 6);
    assert_eq!(log.steps, 2);
}

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

#[test]
fn word_kd_matches_high_precision_oracle() {
    let s = t(&[1.0, -0.5, 2.0, 0.3]);
    let te = t(&[0.2, 1.5, -1.0, 0.7]);
    // 50-digit evaluations of lambda*CE + (1 - lambda)*tau^2*KL(teacher || student).
    let ce = 0.490_203_214_415_327_5;
    for (tau, expected) in [(2.0, 1.012_787_640_308_932_3), (100.0, 1.076_215_970_063_129_4)] {
        let got = word_kd_loss(&s, &te, tau, 0.5, &[2]).unwrap();
        assert!((got - expected).abs() < 1e-9, "tau {tau}: {got} vs {expected}");
    }
    // The unscaled divergence vanishes like 1/tau^2.
    let kd_100 = (word_kd_loss(&s, &te, 100.0, 0.0, &[2]).unwrap()) / 1e4;
    assert!((kd_100 - 1.662_228_725_710_931_4e-4).abs() < 1e-12);
    assert!((word_kd_loss(&s, &s, 2.0, 0.5, &[2]).unwrap() - 0.5 * ce).abs() < 1e-12);
    assert!((word_kd_loss(&s, &te, 2.0, 1.0, &[2]).unwrap() - ce).abs() < 1e-12);
    assert!(word_kd_loss(&s, &t(&[0.0; 3]), 2.0, 0.5, &[2]).is_err());
}
