//! Test-time corruption of the ASR and event modalities.
//!
//! No operation here ever touches the video or the caption.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{Event, Instance};
use crate::rng::{derive_seed, key_id, stream, Rng};
use crate::{Error, Result};

/// Half-width of the span an inverted event collapses to.
pub const REPAIR_HALF_WIDTH: f32 = 0.005;

pub fn null_asr(inst: &mut Instance) {
    inst.asr = None;
}

pub fn null_events(inst: &mut Instance) {
    inst.events = None;
}

/// Nulls ASR and events independently, each with probability `p`.
pub fn random_missing(inst: &mut Instance, p: f64, rng: &mut Rng) {
    if rng.random::<f64>() < p {
        null_asr(inst);
    }
    if rng.random::<f64>() < p {
        null_events(inst);
    }
}

pub fn asr_sentence_delete(inst: &mut Instance, rate: f64, rng: &mut Rng) {
    if let Some(asr) = inst.asr.take() {
        let kept: Vec<_> = asr.into_iter().filter(|_| rng.random::<f64>() >= rate).collect();
        inst.asr = (!kept.is_empty()).then_some(kept);
    }
}

/// Deletes each ASR token with probability `del_rate`, otherwise substitutes
/// a uniformly drawn word from `words` with probability `sub_rate`.
/// Sentences left empty are dropped; no sentences left means absent ASR.
pub fn asr_degrade(inst: &mut Instance, sub_rate: f64, del_rate: f64, words: &[String], rng: &mut Rng) {
    let Some(asr) = inst.asr.take() else { return };
    let mut out = Vec::with_capacity(asr.len());
    for mut s in asr {
        let mut toks = Vec::with_capacity(s.tokens.len());
        for t in s.tokens {
            let u: f64 = rng.random();
            if u < del_rate {
                continue;
            }
            if u < del_rate + sub_rate && !words.is_empty() {
                toks.push(words[rng.random_range(0..words.len())].clone());
            } else {
                toks.push(t);
            }
        }
        if !toks.is_empty() {
            s.tokens = toks;
            out.push(s);
        }
    }
    inst.asr = (!out.is_empty()).then_some(out);
}

pub fn event_delete(inst: &mut Instance, rate: f64, rng: &mut Rng) {
    if let Some(ev) = inst.events.take() {
        let kept: Vec<_> = ev.into_iter().filter(|_| rng.random::<f64>() >= rate).collect();
        inst.events = (!kept.is_empty()).then_some(kept);
    }
}

/// Shifts one event by the given offsets, clamps to `[0, 1]` and repairs
/// inverted spans.
pub fn shift_event(e: &mut Event, d_start: f32, d_end: f32) {
    let s = (e.start + d_start).clamp(0.0, 1.0);
    let t = (e.end + d_end).clamp(0.0, 1.0);
    if s < t {
        e.start = s;
        e.end = t;
    } else {
        let mid = 0.5 * (s + t);
        e.start = (mid - REPAIR_HALF_WIDTH).max(0.0);
        e.end = (mid + REPAIR_HALF_WIDTH).min(1.0);
    }
}

pub fn boundary_perturb(inst: &mut Instance, radius: f32, rng: &mut Rng) {
    if radius <= 0.0 {
        return;
    }
    if let Some(ev) = inst.events.as_mut() {
        for e in ev {
            let a = rng.random_range(-radius..=radius);
            let b = rng.random_range(-radius..=radius);
            shift_event(e, a, b);
        }
    }
}

/// Replaces the events with `k` equal contiguous spans covering `[0, 1]`.
pub fn uniform_boundaries(inst: &mut Instance, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("uniform_boundaries needs k >= 1".into()));
    }
    inst.events = Some(
        (0..k)
            .map(|i| Event::span(i as f32 / k as f32, (i + 1) as f32 / k as f32))
            .collect(),
    );
    Ok(())
}

/// One registered corruption step.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseOp {
    NullAsr,
    NullEvents,
    RandomNullAsr(f64),
    RandomNullEvents(f64),
    AsrSentenceDelete(f64),
    AsrDegrade { sub: f64, del: f64 },
    EventDelete(f64),
    BoundaryPerturb(f32),
    UniformBoundaries(usize),
}

impl NoiseOp {
    fn check_rate(name: &str, p: f64) -> Result<f64> {
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            Err(Error::Config(format!("{name}: rate {p} outside [0, 1]")))
        }
    }

    /// Parses `name` or `name:arg[:arg]`, e.g. `asr_degrade:0.15:0.1`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{name}: bad argument {a:?}"))),
            }
        };
        let op = match name {
            "null_asr" => NoiseOp::NullAsr,
            "null_events" => NoiseOp::NullEvents,
            "random_null_asr" => NoiseOp::RandomNullAsr(Self::check_rate(name, num(0, 0.5)?)?),
            "random_null_events" => NoiseOp::RandomNullEvents(Self::check_rate(name, num(0, 0.5)?)?),
            "asr_sentence_delete" => NoiseOp::AsrSentenceDelete(Self::check_rate(name, num(0, 0.5)?)?),
            "asr_degrade" => {
                let sub = Self::check_rate(name, num(0, 0.15)?)?;
                let del = Self::check_rate(name, num(1, 0.10)?)?;
                if sub + del > 1.0 {
                    return Err(Error::Config(format!("{name}: rates sum above 1")));
                }
                NoiseOp::AsrDegrade { sub, del }
            }
            "event_delete" => NoiseOp::EventDelete(Self::check_rate(name, num(0, 0.5)?)?),
            "boundary_perturb" => {
                let r = num(0, 0.05)?;
                if !(r >= 0.0) {
                    return Err(Error::Config(format!("{name}: negative radius")));
                }
                NoiseOp::BoundaryPerturb(r as f32)
            }
            "uniform_boundaries" => {
                let k = num(0, 4.0)?;
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Config(format!("{name}: k must be a positive integer")));
                }
                NoiseOp::UniformBoundaries(k as usize)
            }
            other => return Err(Error::Config(format!("unknown noise op {other:?}"))),
        };
        if args.len() > op.arity() {
            return Err(Error::Config(format!("{name}: too many arguments")));
        }
        Ok(op)
    }

    fn arity(&self) -> usize {
        match self {
            NoiseOp::NullAsr | NoiseOp::NullEvents => 0,
            NoiseOp::AsrDegrade { .. } => 2,
            _ => 1,
        }
    }

    pub fn apply(&self, inst: &mut Instance, words: &[String], rng: &mut Rng) -> Result<()> {
        match *self {
            NoiseOp::NullAsr => null_asr(inst),
            NoiseOp::NullEvents => null_events(inst),
            NoiseOp::RandomNullAsr(p) => {
                if rng.random::<f64>() < p {
                    null_asr(inst)
                }
            }
            NoiseOp::RandomNullEvents(p) => {
                if rng.random::<f64>() < p {
                    null_events(inst)
                }
            }
            NoiseOp::AsrSentenceDelete(r) => asr_sentence_delete(inst, r, rng),
            NoiseOp::AsrDegrade { sub, del } => asr_degrade(inst, sub, del, words, rng),
            NoiseOp::EventDelete(r) => event_delete(inst, r, rng),
            NoiseOp::BoundaryPerturb(r) => boundary_perturb(inst, r, rng),
            NoiseOp::UniformBoundaries(k) => uniform_boundaries(inst, k)?,
        }
        Ok(())
    }
}

impl fmt::Display for NoiseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseOp::NullAsr => write!(f, "null_asr"),
            NoiseOp::NullEvents => write!(f, "null_events"),
            NoiseOp::RandomNullAsr(p) => write!(f, "random_null_asr:{p}"),
            NoiseOp::RandomNullEvents(p) => write!(f, "random_null_events:{p}"),
            NoiseOp::AsrSentenceDelete(r) => write!(f, "asr_sentence_delete:{r}"),
            NoiseOp::AsrDegrade { sub, del } => write!(f, "asr_degrade:{sub}:{del}"),
            NoiseOp::EventDelete(r) => write!(f, "event_delete:{r}"),
            NoiseOp::BoundaryPerturb(r) => write!(f, "boundary_perturb:{r}"),
            NoiseOp::UniformBoundaries(k) => write!(f, "uniform_boundaries:{k}"),
        }
    }
}

/// A named, seeded sequence of ASR and event corruptions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub asr_ops: Vec<NoiseOp>,
    pub event_ops: Vec<NoiseOp>,
    pub seed: u64,
}

pub const BUILTIN_SCENARIOS: &[&str] = &[
    "complete",
    "video_only",
    "random_missing",
    "asr_low_quality",
    "asr_sentence_del",
    "event_del",
    "boundary_perturb",
    "uniform_boundaries",
];

/// Ablation views: all modalities, no ASR, no events, video only.
pub const ABLATION_SCENARIOS: &[(&str, &str)] = &[
    ("V+E+A", "complete"),
    ("V+E", "no_asr"),
    ("V+A", "no_events"),
    ("V", "video_only"),
];

impl Scenario {
    pub fn new(name: &str, asr_ops: Vec<NoiseOp>, event_ops: Vec<NoiseOp>, seed: u64) -> Self {
        Scenario {
            name: name.to_string(),
            asr_ops,
            event_ops,
            seed,
        }
    }

    /// A registered scenario by name. Besides the names in
    /// [`BUILTIN_SCENARIOS`], `no_asr` and `no_events` are available.
    pub fn builtin(name: &str, seed: u64) -> Result<Self> {
        use NoiseOp::*;
        let (a, e) = match name {
            "complete" => (vec![], vec![]),
            "video_only" => (vec![NullAsr], vec![NullEvents]),
            "no_asr" => (vec![NullAsr], vec![]),
            "no_events" => (vec![], vec![NullEvents]),
            "random_missing" => (vec![RandomNullAsr(0.5)], vec![RandomNullEvents(0.5)]),
            "asr_low_quality" => (vec![AsrDegrade { sub: 0.15, del: 0.10 }], vec![]),
            "asr_sentence_del" => (vec![AsrSentenceDelete(0.5)], vec![]),
            "event_del" => (vec![], vec![EventDelete(0.5)]),
            "boundary_perturb" => (vec![], vec![BoundaryPerturb(0.05)]),
            "uniform_boundaries" => (vec![], vec![UniformBoundaries(4)]),
            other => return Err(Error::Config(format!("unknown scenario {other:?}"))),
        };
        Ok(Scenario::new(name, a, e, seed))
    }

    /// Parses comma-separated op lists, e.g. `"asr_degrade:0.2:0.1"`.
    pub fn from_ops(name: &str, asr_ops: &str, event_ops: &str, seed: u64) -> Result<Self> {
        let parse = |s: &str| -> Result<Vec<NoiseOp>> {
            s.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(NoiseOp::parse)
                .collect()
        };
        Ok(Scenario::new(name, parse(asr_ops)?, parse(event_ops)?, seed))
    }

    pub fn apply_one(&self, inst: &Instance, words: &[String]) -> Result<Instance> {
        let mut out = inst.clone();
        let mut rng = stream(derive_seed(self.seed, "noise", key_id(&self.name)), "instance", key_id(&inst.id));
        for op in self.asr_ops.iter().chain(&self.event_ops) {
            op.apply(&mut out, words, &mut rng)?;
        }
        Ok(out)
    }
}

/// Corrupts every instance. `words` is the substitution pool for ASR noise.
pub fn apply_scenario(corpus: &[Instance], scenario: &Scenario, words: &[String]) -> Result<Vec<Instance>> {
    corpus.par_iter().map(|i| scenario.apply_one(i, words)).collect()
}

/// Nulls the ASR of exactly `round(percent / 100 * n)` instances. The
/// instances are a prefix of one seeded permutation, so a higher percentage
/// always nulls a superset of a lower one.
pub fn null_asr_fraction(corpus: &[Instance], percent: f64, seed: u64) -> Result<Vec<Instance>> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::Argument(format!("percentage {percent} outside [0, 100]")));
    }
    let n = corpus.len();
    let k = ((percent / 100.0) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "missing_curve", 0));
    let mut chosen = vec![false; n];
    for &i in order.iter().take(k) {
        chosen[i] = true;
    }
    Ok(corpus
        .iter()
        .zip(chosen)
        .map(|(inst, c)| {
            let mut out = inst.clone();
            if c {
                null_asr(&mut out);
            }
            out
        })
        .collect())
}
