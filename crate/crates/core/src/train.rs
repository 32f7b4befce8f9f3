//! Training strategies: vanilla, missing-modality dropout (DropAM), dropout on
//! a distillation-augmented set (the full MR-VPC recipe) and word-level
//! distillation.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::Instance;
use crate::model::{DecodeConfig, Mvpc, SpecialTokens, TokenLoss};
use crate::nn::{adam_step, clip_global_norm, cosine_lr, AdamConfig, AdamState, ScheduleSpec, Tensor};
use crate::rng::{derive_seed, key_id, stream, Rng};
use crate::timetok::{serialize_instance, Vocab};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Vanilla,
    DropAm,
    /// DropAM over the union of ground-truth and teacher-captioned instances.
    Mrvpc,
    WordKd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::DropAm => "dropam",
            Mode::Mrvpc => "mrvpc",
            Mode::WordKd => "wordkd",
        }
    }

    pub fn uses_dropout(self) -> bool {
        !matches!(self, Mode::Vanilla)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "dropam" => Ok(Mode::DropAm),
            "mrvpc" => Ok(Mode::Mrvpc),
            "wordkd" => Ok(Mode::WordKd),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub p_asr: f64,
    pub p_events: f64,
    /// One shared draw decides both drops instead of two independent draws.
    pub coupled: bool,
    pub decode: DecodeConfig,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: Mode::Vanilla,
            epochs: 30,
            batch_size: 16,
            lr: 2e-4,
            warmup_frac: 0.05,
            weight_decay: 5e-2,
            grad_clip: 1.0,
            p_asr: 0.5,
            p_events: 0.5,
            coupled: false,
            decode: DecodeConfig::default(),
            tau: 2.0,
            lambda: 0.5,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup fraction must lie in [0, 1)");
        }
        if !unit(self.p_asr) || !unit(self.p_events) {
            return fail("drop rates must lie in [0, 1]");
        }
        if !unit(self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail("temperature must be positive");
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("clip norm must be positive and weight decay non-negative");
        }
        self.decode.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Whether to drop (ASR, events). A modality is dropped when its uniform draw
/// is at most its rate.
pub fn drop_decision(p_asr: f64, p_events: f64, coupled: bool, rng: &mut Rng) -> (bool, bool) {
    let a: f64 = rng.random();
    let e: f64 = if coupled { a } else { rng.random() };
    (a <= p_asr, e <= p_events)
}

/// Replaces ASR and/or events with the absent marker. Video and caption are
/// never touched.
pub fn drop_am(inst: &Instance, p_asr: f64, p_events: f64, coupled: bool, rng: &mut Rng) -> Instance {
    let (da, de) = drop_decision(p_asr, p_events, coupled, rng);
    let mut out = inst.clone();
    if da {
        out.asr = None;
    }
    if de {
        out.events = None;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean per-token loss of the first batch before any update.
    pub initial_loss: Option<f64>,
    /// Mean per-token loss over each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub drop_calls: u64,
    /// Instances skipped because their caption was empty.
    pub skipped_empty: usize,
}

struct Prepared {
    id: String,
    frames: Tensor<f32>,
    aux: Vec<u32>,
    caption: Vec<u32>,
    teacher: Option<Tensor<f32>>,
}

fn prepare(
    inst: &Instance,
    model: &Mvpc<f32>,
    vocab: &Vocab,
    plan: &TrainPlan,
    epoch: usize,
    teacher: Option<&Mvpc<f32>>,
    drop_calls: &mut u64,
) -> Result<Prepared> {
    let tokens = SpecialTokens::of(vocab);
    let caption = vocab.encode_words(&inst.caption);
    let teacher_logits = match (plan.mode, teacher) {
        (Mode::WordKd, Some(t)) => {
            let aux = serialize_instance(inst, vocab, t.cfg.max_aux_len)?.ids;
            let frames = inst.video.clone();
            let mem = t.memory(&frames, &aux, Some(tokens.pad))?;
            Some(t.caption_logits(&mem, &caption, tokens.bos, tokens.eos)?)
        }
        (Mode::WordKd, None) => return Err(Error::Argument("word-level distillation needs a teacher".into())),
        _ => None,
    };
    let view = if plan.mode.uses_dropout() {
        *drop_calls += 1;
        let mut rng = stream(derive_seed(plan.seed, "dropam", epoch as u64), "instance", key_id(&inst.id));
        drop_am(inst, plan.p_asr, plan.p_events, plan.coupled, &mut rng)
    } else {
        inst.clone()
    };
    let aux = serialize_instance(&view, vocab, model.cfg.max_aux_len)?.ids;
    Ok(Prepared {
        id: inst.id.clone(),
        frames: view.video,
        aux,
        caption,
        teacher: teacher_logits,
    })
}

/// Trains `model` in place on `corpus` under `plan`.
///
/// Per-instance gradients inside a batch are computed in parallel and summed
/// in batch order, so results do not depend on the thread count.
pub fn train(
    model: &mut Mvpc<f32>,
    corpus: &[Instance],
    vocab: &Vocab,
    plan: &TrainPlan,
    teacher: Option<&Mvpc<f32>>,
) -> Result<TrainLog> {
    plan.validate()?;
    if vocab.len() != model.cfg.vocab_size {
        return Err(Error::Argument(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.cfg.vocab_size
        )));
    }
    let mut log = TrainLog::default();
    let usable: Vec<&Instance> = corpus.iter().filter(|i| !i.caption.is_empty()).collect();
    log.skipped_empty = corpus.len() - usable.len();
    if plan.epochs == 0 || usable.is_empty() {
        return Ok(log);
    }
    let per_epoch = usable.len().div_ceil(plan.batch_size);
    let total = per_epoch * plan.epochs;
    let warmup = ((total as f64) * plan.warmup_frac).floor() as usize;
    let schedule = ScheduleSpec::new(plan.lr, total, warmup.min(total - 1))?;
    let adam_cfg = plan.adam();
    let mut adam = AdamState::new(&model.params);
    let tokens = SpecialTokens::of(vocab);

    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..plan.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(plan.seed, "shuffle", epoch as u64));
        let (mut epoch_loss, mut epoch_tokens) = (0.0, 0usize);
        for batch in order.chunks(plan.batch_size) {
            let prepared = batch
                .iter()
                .map(|&i| prepare(usable[i], model, vocab, plan, epoch, teacher, &mut log.drop_calls))
                .collect::<Result<Vec<_>>>()?;
            let n_tokens: usize = prepared.iter().map(|p| p.caption.len() + 1).sum();
            let weight = 1.0 / n_tokens as f64;
            let m: &Mvpc<f32> = model;
            let results = prepared
                .par_iter()
                .map(|p| {
                    let mut g = m.params.grad_buffer();
                    let rule = match &p.teacher {
                        Some(t) => TokenLoss::WordKd {
                            teacher: t,
                            tau: plan.tau,
                            lambda: plan.lambda,
                        },
                        None => TokenLoss::CrossEntropy,
                    };
                    let (loss, _) = m.loss_and_grad(&p.frames, &p.aux, &p.caption, tokens, &rule, weight, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                model.params.accumulate(g);
            }
            let mean = batch_loss * weight;
            if !mean.is_finite() || !model.params.grads.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite {
                    step: log.steps,
                    loss: mean,
                    batch_ids: prepared.iter().map(|p| p.id.clone()).collect(),
                });
            }
            if log.initial_loss.is_none() {
                log.initial_loss = Some(mean);
            }
            clip_global_norm(&mut model.params, plan.grad_clip);
            adam_step(&mut model.params, &mut adam, cosine_lr(log.steps, &schedule), &adam_cfg);
            log.steps += 1;
            epoch_loss += batch_loss;
            epoch_tokens += n_tokens;
        }
        log.epoch_loss.push(epoch_loss / epoch_tokens as f64);
    }
    Ok(log)
}

/// Anything that can caption an instance.
pub trait Captioner: Sync {
    fn caption(&self, inst: &Instance) -> Result<Vec<String>>;
}

/// Beam-search captions from a trained model.
pub struct ModelCaptioner<'a> {
    pub model: &'a Mvpc<f32>,
    pub vocab: &'a Vocab,
    pub decode: DecodeConfig,
}

impl Captioner for ModelCaptioner<'_> {
    fn caption(&self, inst: &Instance) -> Result<Vec<String>> {
        let aux = serialize_instance(inst, self.vocab, self.model.cfg.max_aux_len)?.ids;
        let mem = self.model.memory(&inst.video, &aux, Some(self.vocab.pad()))?;
        let out = self.model.decode(&mem, self.vocab, &self.decode)?;
        Ok(self.vocab.decode_words(&out.tokens))
    }
}

/// Captions every instance in parallel, preserving order.
pub fn caption_all(captioner: &dyn Captioner, corpus: &[Instance]) -> Result<Vec<Vec<String>>> {
    corpus.par_iter().map(|i| captioner.caption(i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub instance: Instance,
    pub source_id: String,
    /// The teacher produced an empty caption.
    pub empty: bool,
}

/// Training instances with captions replaced by teacher predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSet {
    pub items: Vec<Distilled>,
}

impl DistillSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn empty_count(&self) -> usize {
        self.items.iter().filter(|d| d.empty).count()
    }
}

/// Captions each training instance from its complete inputs.
pub fn build_distill_set(teacher: &dyn Captioner, train_set: &[Instance]) -> Result<DistillSet> {
    let captions = caption_all(teacher, train_set)?;
    let items = train_set
        .iter()
        .zip(captions)
        .map(|(inst, caption)| Distilled {
            empty: caption.is_empty(),
            source_id: inst.id.clone(),
            instance: Instance {
                id: format!("{}#kd", inst.id),
                caption,
                ..inst.clone()
            },
        })
        .collect();
    Ok(DistillSet { items })
}

/// Interleaves ground-truth and distilled instances: `x0, kd0, x1, kd1, ...`.
pub fn make_augmented(train_set: &[Instance], distilled: &DistillSet) -> Result<Vec<Instance>> {
    if train_set.len() != distilled.len() {
        return Err(Error::Argument(format!(
            "{} training instances but {} distilled",
            train_set.len(),
            distilled.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * train_set.len());
    for (src, d) in train_set.iter().zip(&distilled.items) {
        if d.source_id != src.id {
            return Err(Error::Argument(format!(
                "distilled item {} does not match source {}",
                d.source_id, src.id
            )));
        }
        out.push(src.clone());
        out.push(d.instance.clone());
    }
    Ok(out)
}

/// `lambda * CE + (1 - lambda) * tau^2 * KL` averaged over positions.
pub fn word_kd_loss(
    student: &Tensor<f64>,
    teacher: &Tensor<f64>,
    tau: f64,
    lambda: f64,
    targets: &[u32],
) -> Result<f64> {
    if student.shape() != teacher.shape() || student.rows() != targets.len() {
        return Err(Error::Argument(format!(
            "student {:?}, teacher {:?}, {} targets",
            student.shape(),
            teacher.shape(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let rule = TokenLoss::WordKd { teacher, tau, lambda };
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total += crate::model::position_loss(student.row(i), t as usize, &rule, Some(teacher.row(i)))?.0;
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_and_one_rates() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(drop_decision(0.0, 0.0, false, &mut rng), (false, false));
            assert_eq!(drop_decision(1.0, 1.0, false, &mut rng), (true, true));
        }
    }

    #[test]
    fn coupled_draw_drops_together() {
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (a, e) = drop_decision(0.5, 0.5, true, &mut rng);
            assert_eq!(a, e);
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Vanilla, Mode::DropAm, Mode::Mrvpc, Mode::WordKd] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("teacher".parse::<Mode>().is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        for bad in [
            TrainPlan { p_asr: 1.5, ..Default::default() },
            TrainPlan { lambda: -0.1, ..Default::default() },
            TrainPlan { tau: 0.0, ..Default::default() },
            TrainPlan { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn kd_with_identical_logits_is_scaled_ce() {
        let s = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]).unwrap();
        let ce = word_kd_loss(&s, &s, 2.0, 1.0, &[1, 2]).unwrap();
        let mixed = word_kd_loss(&s, &s, 2.0, 0.3, &[1, 2]).unwrap();
        assert!((mixed - 0.3 * ce).abs() < 1e-12);
        let t = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((word_kd_loss(&s, &t, 2.0, 1.0, &[1, 2]).unwrap() - ce).abs() < 1e-12);
        assert!(word_kd_loss(&s, &t, 2.0, 0.5, &[1]).is_err());
    }
}
