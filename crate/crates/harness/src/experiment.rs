//! Experiment drivers: training per mode, scenario evaluation, the ablation
//! grid, the ASR-missing curve, the drop-rate sweep and the full pipeline.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mrvpc_core::data::{gen_corpus, Instance};
use mrvpc_core::metrics::{evaluate, mean_consistency, MetricReport};
use mrvpc_core::model::{Mvpc, SpecialTokens};
use mrvpc_core::nn::{grad_check, GradCheckReport};
use mrvpc_core::noise::{apply_scenario, null_asr_fraction, ABLATION_SCENARIOS};
use mrvpc_core::rng::derive_seed;
use mrvpc_core::timetok::{build_vocab, serialize_instance, Vocab};
use mrvpc_core::train::{build_distill_set, caption_all, make_augmented, train, DistillSet, Mode, ModelCaptioner, TrainLog};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus;
use crate::plot;
use crate::report::{self, Provenance, Row};
use crate::{HarnessError, Result};

pub struct Data {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub vocab: Vocab,
}

/// Train and test splits from the configured world.
pub fn generate(cfg: &RunConfig) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let train = gen_corpus(&cfg.world, cfg.data.n_train, derive_seed(cfg.data.seed, "split", 0))?;
    let test = gen_corpus(&cfg.world, cfg.data.n_test, derive_seed(cfg.data.seed, "split", 1))?;
    Ok((train, test))
}

/// Reads the configured JSONL splits, or generates them when no paths are set.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let (train, test) = match (&cfg.data.train_path, &cfg.data.test_path) {
        (Some(tr), Some(te)) => (
            corpus::instances(corpus::load(tr, Some(&cfg.world))?),
            corpus::instances(corpus::load(te, Some(&cfg.world))?),
        ),
        (None, None) => generate(cfg)?,
        _ => return Err(HarnessError::Config("set both data.train_path and data.test_path or neither".into())),
    };
    let vocab = build_vocab(&train, cfg.time_bins)?;
    Ok(Data { train, test, vocab })
}

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

pub fn new_model(cfg: &RunConfig, vocab: &Vocab) -> Result<Mvpc<f32>> {
    Ok(Mvpc::new(cfg.model_config(vocab.len())?, cfg.seed)?)
}

pub struct Trained {
    pub model: Mvpc<f32>,
    pub log: TrainLog,
    pub distill: Option<DistillSet>,
}

/// Sequence-level distillation: the teacher's captions of the complete
/// training inputs.
pub fn distill(cfg: &RunConfig, data: &Data, teacher: &Mvpc<f32>) -> Result<DistillSet> {
    let captioner = ModelCaptioner {
        model: teacher,
        vocab: &data.vocab,
        decode: cfg.train.decode.clone(),
    };
    Ok(build_distill_set(&captioner, &data.train)?)
}

/// Trains one model under `mode`. `mrvpc` distills from `teacher` unless a
/// distill set is supplied; `wordkd` uses the teacher's logits.
pub fn train_mode(
    cfg: &RunConfig,
    data: &Data,
    mode: Mode,
    teacher: Option<&Mvpc<f32>>,
    distilled: Option<DistillSet>,
) -> Result<Trained> {
    let plan = mrvpc_core::train::TrainPlan {
        mode,
        ..cfg.plan()
    };
    let mut model = new_model(cfg, &data.vocab)?;
    let need_teacher = || HarnessError::Config(format!("mode {} needs a teacher", mode.name()));
    match mode {
        Mode::Vanilla | Mode::DropAm => {
            let log = train(&mut model, &data.train, &data.vocab, &plan, None)?;
            Ok(Trained {
                model,
                log,
                distill: None,
            })
        }
        Mode::WordKd => {
            let t = teacher.ok_or_else(need_teacher)?;
            let log = train(&mut model, &data.train, &data.vocab, &plan, Some(t))?;
            Ok(Trained {
                model,
                log,
                distill: None,
            })
        }
        Mode::Mrvpc => {
            let kd = match distilled {
                Some(kd) => kd,
                None => distill(cfg, data, teacher.ok_or_else(need_teacher)?)?,
            };
            let aug = make_augmented(&data.train, &kd)?;
            let log = train(&mut model, &aug, &data.vocab, &plan, None)?;
            Ok(Trained {
                model,
                log,
                distill: Some(kd),
            })
        }
    }
}

/// Trains DropAM-only models at the given rates.
pub fn train_dropam_at(cfg: &RunConfig, data: &Data, p_asr: f64, p_events: f64) -> Result<Trained> {
    let mut c = cfg.clone();
    c.train.p_asr = p_asr;
    c.train.p_events = p_events;
    train_mode(&c, data, Mode::DropAm, None, None)
}

/// Test-set predictions, memoized per (model label, scenario).
pub struct Bench<'a> {
    cfg: &'a RunConfig,
    vocab: &'a Vocab,
    test: &'a [Instance],
    ids: Vec<String>,
    refs: Vec<Vec<String>>,
    cache: HashMap<(String, String), Vec<Vec<String>>>,
}

impl<'a> Bench<'a> {
    pub fn new(cfg: &'a RunConfig, vocab: &'a Vocab, test: &'a [Instance]) -> Self {
        Bench {
            cfg,
            vocab,
            test,
            ids: test.iter().map(|i| i.id.clone()).collect(),
            refs: test.iter().map(|i| i.caption.clone()).collect(),
            cache: HashMap::new(),
        }
    }

    fn decode(&self, model: &Mvpc<f32>, inputs: &[Instance]) -> Result<Vec<Vec<String>>> {
        let captioner = ModelCaptioner {
            model,
            vocab: self.vocab,
            decode: self.cfg.train.decode.clone(),
        };
        Ok(caption_all(&captioner, inputs)?)
    }

    /// Captions of the test set under a named scenario.
    pub fn predict(&mut self, label: &str, model: &Mvpc<f32>, scenario: &str) -> Result<Vec<Vec<String>>> {
        let key = (label.to_string(), scenario.to_string());
        if let Some(p) = self.cache.get(&key) {
            return Ok(p.clone());
        }
        let sc = self.cfg.scenario(scenario)?;
        let noisy = apply_scenario(self.test, &sc, &self.cfg.world.words())?;
        let preds = self.decode(model, &noisy)?;
        self.cache.insert(key, preds.clone());
        Ok(preds)
    }

    pub fn score(&self, scenario: &str, label: &str, preds: &[Vec<String>]) -> Result<MetricReport> {
        Ok(evaluate(scenario, label, &self.ids, preds, &self.refs)?)
    }

    /// Scores one scenario. Consistency is measured against the complete
    /// scenario's predictions.
    pub fn report(&mut self, label: &str, model: &Mvpc<f32>, scenario: &str, shown_as: &str) -> Result<MetricReport> {
        let preds = self.predict(label, model, scenario)?;
        let mut r = self.score(shown_as, label, &preds)?;
        if scenario != "complete" {
            let complete = self.predict(label, model, "complete")?;
            r.consistency = Some(mean_consistency(&complete, &preds)?);
        }
        Ok(r)
    }

    /// Test-set captions with the ASR of `percent`% of the instances nulled.
    /// Every instance is either untouched or ASR-null, so the result is
    /// assembled from the complete and no-ASR predictions.
    pub fn predict_missing(&mut self, label: &str, model: &Mvpc<f32>, percent: f64) -> Result<Vec<Vec<String>>> {
        let mask = null_asr_fraction(self.test, percent, derive_seed(self.cfg.seed, "missing_curve", 0))?;
        let complete = self.predict(label, model, "complete")?;
        let nulled = self.predict(label, model, "no_asr")?;
        Ok(mask
            .iter()
            .zip(self.test)
            .zip(complete.into_iter().zip(nulled))
            .map(|((m, orig), (c, n))| if m.asr.is_none() && orig.asr.is_some() { n } else { c })
            .collect())
    }
}

/// Scores every configured scenario.
pub fn run_eval(bench: &mut Bench<'_>, label: &str, model: &Mvpc<f32>, scenarios: &[String]) -> Result<Vec<MetricReport>> {
    scenarios.iter().map(|s| bench.report(label, model, s, s)).collect()
}

/// Model x modality grid over V+E+A, V+E, V+A and V.
pub fn run_ablation(bench: &mut Bench<'_>, prov: &Provenance, models: &[(&str, &Mvpc<f32>)]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for &(label, model) in models {
        for &(shown, scenario) in ABLATION_SCENARIOS {
            rows.extend(prov.rows(&bench.report(label, model, scenario, shown)?));
        }
    }
    Ok(rows)
}

pub fn curve_label(percent: f64) -> String {
    format!("asr_missing_{percent}")
}

/// Mean metrics per ASR-missing percentage.
pub fn run_missing_curve(bench: &mut Bench<'_>, prov: &Provenance, models: &[(&str, &Mvpc<f32>)], percents: &[f64]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for &(label, model) in models {
        for &q in percents {
            let preds = bench.predict_missing(label, model, q)?;
            rows.extend(prov.rows(&bench.score(&curve_label(q), label, &preds)?));
        }
    }
    Ok(rows)
}

pub fn sweep_label(p_asr: f64, p_events: f64) -> String {
    format!("dropam_{p_asr}_{p_events}")
}

/// Trains one DropAM-only model per grid point (unless `pretrained` has one)
/// and reports CIDEr and METEOR-lite on the four modality views plus their
/// average.
pub fn run_drop_sweep(
    cfg: &RunConfig,
    data: &Data,
    prov: &Provenance,
    grid: &[(f64, f64)],
    pretrained: &[((f64, f64), &Mvpc<f32>)],
) -> Result<Vec<Row>> {
    let mut bench = Bench::new(cfg, &data.vocab, &data.test);
    let mut rows = Vec::new();
    for &(pa, pe) in grid {
        let label = sweep_label(pa, pe);
        let owned;
        let model = match pretrained.iter().find(|(p, _)| *p == (pa, pe)) {
            Some((_, m)) => *m,
            None => {
                owned = train_dropam_at(cfg, data, pa, pe)?.model;
                &owned
            }
        };
        let mut sums = [0.0; 2];
        for &(shown, scenario) in ABLATION_SCENARIOS {
            let r = bench.report(&label, model, scenario, shown)?;
            sums[0] += r.cider;
            sums[1] += r.meteor;
            rows.push(prov.row(shown, &label, "cider", r.cider));
            rows.push(prov.row(shown, &label, "meteor", r.meteor));
        }
        let n = ABLATION_SCENARIOS.len() as f64;
        rows.push(prov.row("avg", &label, "cider", sums[0] / n));
        rows.push(prov.row("avg", &label, "meteor", sums[1] / n));
    }
    Ok(rows)
}

/// Finite-difference check of the full network in 64-bit precision on the
/// first `gradcheck.instances` training instances.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<(GradCheckReport, usize)> {
    let data = load_data(cfg)?;
    let model = new_model(cfg, &data.vocab)?.cast::<f64>();
    let tokens = SpecialTokens::of(&data.vocab);
    let batch = data
        .train
        .iter()
        .filter(|i| !i.caption.is_empty())
        .take(cfg.gradcheck.instances)
        .map(|inst| {
            let aux = serialize_instance(inst, &data.vocab, model.cfg.max_aux_len)?.ids;
            let mut caption = data.vocab.encode_words(&inst.caption);
            caption.truncate(model.cfg.max_caption_len - 1);
            Ok((inst.video.cast::<f64>(), aux, caption))
        })
        .collect::<mrvpc_core::Result<Vec<_>>>()?;
    let mut params = model.params.clone();
    let n_params = params.num_scalars();
    let mcfg = model.cfg.clone();
    let report = grad_check(
        |p, g| {
            let m = Mvpc::from_params(mcfg.clone(), p.clone())?;
            let mut total = 0.0;
            for (frames, aux, caption) in &batch {
                total += m.check_loss(frames, aux, caption, tokens, g)?;
            }
            Ok(total)
        },
        &mut params,
        cfg.gradcheck.eps,
        cfg.gradcheck.samples,
        derive_seed(cfg.seed, "gradcheck", 0),
    )?;
    Ok((report, n_params))
}

pub fn checkpoint_for(cfg: &RunConfig, model: &Mvpc<f32>, vocab: &Vocab, mode: Mode) -> Checkpoint {
    Checkpoint::new(
        model,
        vocab,
        CheckpointMeta {
            mode: mode.name().to_string(),
            epochs: cfg.train.epochs,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
    )
}

pub fn log_rows(prov: &Provenance, label: &str, log: &TrainLog) -> Vec<Row> {
    let mut rows = Vec::new();
    if let Some(l) = log.initial_loss {
        rows.push(prov.row("train", label, "initial_loss", l));
    }
    for (i, l) in log.epoch_loss.iter().enumerate() {
        rows.push(prov.row("train", label, &format!("epoch_loss_{}", i + 1), *l));
    }
    rows
}

/// Files and timings of one pipeline run.
pub struct PipelineOutput {
    pub dir: PathBuf,
    pub eval: Vec<Row>,
    pub curve: Vec<Row>,
    pub teacher_log: TrainLog,
    pub student_log: TrainLog,
    pub distill_empty: usize,
    pub elapsed: Duration,
}

pub const PIPELINE_FILES: [&str; 10] = [
    "train.jsonl",
    "test.jsonl",
    "vanilla.ckpt",
    "distill.jsonl",
    "mrvpc.ckpt",
    "training.csv",
    "eval.csv",
    "curve.csv",
    "eval.svg",
    "curve.svg",
];

/// generate, teacher training, distillation, student training, evaluation
/// of both models on every configured scenario, the ASR-missing curve and
/// plots, all written under `dir`.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineOutput> {
    let start = Instant::now();
    let prov = provenance(cfg);
    let (train_set, test_set) = generate(cfg)?;
    corpus::save(&dir.join("train.jsonl"), &corpus::plain(&train_set))?;
    corpus::save(&dir.join("test.jsonl"), &corpus::plain(&test_set))?;
    let vocab = build_vocab(&train_set, cfg.time_bins)?;
    let data = Data {
        train: train_set,
        test: test_set,
        vocab,
    };

    let teacher = train_mode(cfg, &data, Mode::Vanilla, None, None)?;
    checkpoint::save(&dir.join("vanilla.ckpt"), &checkpoint_for(cfg, &teacher.model, &data.vocab, Mode::Vanilla))?;
    let kd = distill(cfg, &data, &teacher.model)?;
    let kd_entries: Vec<corpus::Entry> = kd
        .items
        .iter()
        .map(|d| corpus::Entry {
            instance: d.instance.clone(),
            source: Some(d.source_id.clone()),
        })
        .collect();
    corpus::save(&dir.join("distill.jsonl"), &kd_entries)?;
    let distill_empty = kd.empty_count();
    let student = train_mode(cfg, &data, Mode::Mrvpc, None, Some(kd))?;
    checkpoint::save(&dir.join("mrvpc.ckpt"), &checkpoint_for(cfg, &student.model, &data.vocab, Mode::Mrvpc))?;

    let mut training = log_rows(&prov, "vanilla", &teacher.log);
    training.extend(log_rows(&prov, "mrvpc", &student.log));
    report::save(&dir.join("training.csv"), &training)?;

    let models = [("vanilla", &teacher.model), ("mrvpc", &student.model)];
    let mut bench = Bench::new(cfg, &data.vocab, &data.test);
    let mut eval = Vec::new();
    for (label, model) in models {
        for r in run_eval(&mut bench, label, model, &cfg.scenarios)? {
            eval.extend(prov.rows(&r));
        }
    }
    report::save(&dir.join("eval.csv"), &eval)?;
    let curve = run_missing_curve(&mut bench, &prov, &models, &cfg.curve_percents)?;
    report::save(&dir.join("curve.csv"), &curve)?;
    plot::emit_plot(&dir.join("eval.csv"), &dir.join("eval.svg"), Some("cider"))?;
    plot::emit_plot(&dir.join("curve.csv"), &dir.join("curve.svg"), Some("cider"))?;

    Ok(PipelineOutput {
        dir: dir.to_path_buf(),
        eval,
        curve,
        teacher_log: teacher.log,
        student_log: student.log,
        distill_empty,
        elapsed: start.elapsed(),
    })
}
