use mrvpc_core::data::{gen_corpus, WorldSpec};
use mrvpc_core::model::{position_loss, ModelConfig, Mvpc, SpecialTokens, TokenLoss};
use mrvpc_core::nn::{grad_check, ParamStore, Tensor};
use mrvpc_core::timetok::{build_vocab, serialize_instance, Vocab};

fn small_world() -> WorldSpec {
    WorldSpec {
        frames: 8,
        feature_dim: 6,
        k_min: 1,
        k_max: 3,
        ..WorldSpec::default()
    }
}

fn small_config(spec: &WorldSpec, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        video_layers: 1,
        text_layers: 1,
        decoder_layers: 2,
        max_caption_len: 32,
        max_aux_len: 40,
        ..ModelConfig::new(spec.frames, spec.feature_dim, vocab.len())
    }
}

struct Fixture {
    vocab: Vocab,
    frames: Tensor<f64>,
    aux: Vec<u32>,
    caption: Vec<u32>,
    model: Mvpc<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let spec = small_world();
    let corpus = gen_corpus(&spec, 4, seed).unwrap();
    let vocab = build_vocab(&corpus, 20).unwrap();
    let inst = &corpus[0];
    let aux = serialize_instance(inst, &vocab, 40).unwrap().ids;
    let caption = vocab.encode_words(&inst.caption);
    let model = Mvpc::<f32>::new(small_config(&spec, &vocab), seed).unwrap().cast::<f64>();
    Fixture {
        frames: inst.video.cast(),
        aux,
        caption,
        vocab,
        model,
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let f = fixture(3);
    let tokens = SpecialTokens::of(&f.vocab);
    let mut params = f.model.params.clone();
    let cfg = f.model.cfg.clone();
    let report = grad_check(
        |p, g| {
            let m = Mvpc::from_params(cfg.clone(), p.clone())?;
            m.check_loss(&f.frames, &f.aux, &f.caption, tokens, g)
        },
        &mut params,
        1e-5,
        6,
        9,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
}

#[test]
fn word_kd_logit_gradients_match_finite_differences() {
    let teacher = Tensor::matrix(3, 5, vec![0.3, -1.2, 2.0, 0.1, 0.0, 1.5, 1.5, -0.4, 0.9, -2.2, 0.0, 0.7, 0.2, -0.3, 1.1]).unwrap();
    let targets = [2usize, 0, 4];
    let mut params = ParamStore::new();
    params
        .add("logits", Tensor::matrix(3, 5, vec![0.5, 0.1, -0.7, 1.3, 0.2, -0.9, 0.4, 0.0, 2.1, 0.6, 1.0, -1.5, 0.3, 0.8, -0.2]).unwrap())
        .unwrap();
    for (tau, lambda) in [(2.0, 0.3), (1.0, 0.0), (5.0, 1.0)] {
        let rule = TokenLoss::WordKd {
            teacher: &teacher,
            tau,
            lambda,
        };
        let report = grad_check(
            |p, g| {
                let logits = &p.values[0];
                let mut total = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    let (l, d) = position_loss(logits.row(i), t, &rule, Some(teacher.row(i)))?;
                    total += l;
                    g[0].row_mut(i).copy_from_slice(&d);
                }
                Ok(total)
            },
            &mut params,
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "tau {tau} lambda {lambda}: {}", report.max_rel_error);
    }
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let f = fixture(5);
    let t = SpecialTokens::of(&f.vocab);
    let mem = f.model.memory(&f.frames, &f.aux, Some(t.pad)).unwrap();
    let full = f.model.caption_logits(&mem, &f.caption, t.bos, t.eos).unwrap();
    let (mut state, mut logits) = f.model.start_decoding(&mem, t.bos).unwrap();
    for (pos, &tok) in f.caption.iter().enumerate() {
        for (a, b) in logits.iter().zip(full.row(pos)) {
            assert!((a - b).abs() < 1e-10, "position {pos}: {a} vs {b}");
        }
        (state, logits) = f.model.step(&state, tok).unwrap();
    }
    assert_eq!(state.len(), f.caption.len() + 1);
}

#[test]
fn decoder_is_causal() {
    let f = fixture(6);
    let t = SpecialTokens::of(&f.vocab);
    let mem = f.model.memory(&f.frames, &f.aux, Some(t.pad)).unwrap();
    let base = f.model.caption_logits(&mem, &f.caption, t.bos, t.eos).unwrap();
    let mut altered = f.caption.clone();
    let last = altered.len() - 1;
    altered[last] = (altered[last] + 1) % f.vocab.n_words() as u32;
    let other = f.model.caption_logits(&mem, &altered, t.bos, t.eos).unwrap();
    for pos in 0..=last {
        assert_eq!(base.row(pos), other.row(pos));
    }
    assert_ne!(base.row(last + 1), other.row(last + 1));
}

#[test]
fn padding_does_not_change_outputs() {
    let f = fixture(7);
    let t = SpecialTokens::of(&f.vocab);
    let mem = f.model.memory(&f.frames, &f.aux, Some(t.pad)).unwrap();
    let mut padded = f.aux.clone();
    padded.resize(f.aux.len() + 5, t.pad);
    let mem_pad = f.model.memory(&f.frames, &padded, Some(t.pad)).unwrap();
    let a = f.model.caption_logits(&mem, &f.caption, t.bos, t.eos).unwrap();
    let b = f.model.caption_logits(&mem_pad, &f.caption, t.bos, t.eos).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn video_pathway_ignores_text() {
    let f = fixture(8);
    let t = SpecialTokens::of(&f.vocab);
    let v = f.model.encode_video(&f.frames).unwrap();
    let mem = f.model.memory(&f.frames, &f.aux, Some(t.pad)).unwrap();
    assert_eq!(mem.video_rows, v.rows());
    assert_eq!(&mem.rows.data()[..v.len()], v.data());
    let other = f.model.memory(&f.frames, &[f.vocab.sep_asr(), f.vocab.null_asr()], Some(t.pad)).unwrap();
    assert_eq!(&other.rows.data()[..v.len()], v.data());
}

#[test]
fn rejects_mismatched_inputs() {
    let f = fixture(9);
    let wrong = Tensor::<f64>::zeros(&[3, 3]);
    assert!(f.model.encode_video(&wrong).is_err());
    let big = vec![f.vocab.len() as u32];
    assert!(f.model.encode_text(&big, None).is_err());
    let mut params = f.model.params.clone();
    params.values.pop();
    params.grads.pop();
    assert!(Mvpc::from_params(f.model.cfg.clone(), f.model.params.clone()).is_ok());
}

