//! Synthetic multimodal corpora.
//!
//! Each video is a sequence of `k` events; every event is an (action, object)
//! pair drawn uniformly. Frame features inside an event are the sum of an
//! action prototype and an object prototype plus Gaussian noise, and frames
//! in the gaps between events show a background prototype. The first
//! `n_confusable_pairs` action pairs `(2i, 2i + 1)` share one visual
//! prototype, so their identity is only recoverable from the ASR sentence
//! that names each event.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::nn::Tensor;
use crate::rng::{derive_seed, stream, Rng};
use crate::{Error, Result};

pub const MIN_EVENT_DURATION: f32 = 0.05;
/// Gap pieces get this share of the stick relative to event pieces.
const GAP_WEIGHT: f64 = 0.35;

const VERBS: &[&str] = &[
    "cut", "chop", "slice", "dice", "mix", "stir", "pour", "add", "fry", "boil", "bake", "grill",
    "peel", "wash", "roll", "mash", "whisk", "season", "drain", "spread", "fold", "knead",
    "toast", "serve",
];
const NOUNS: &[&str] = &[
    "onion", "tomato", "garlic", "carrot", "potato", "egg", "flour", "butter", "rice", "noodle",
    "pepper", "cheese", "bread", "chicken", "beef", "fish", "sauce", "dough", "lettuce", "apple",
    "lemon", "oil", "sugar", "salt",
];

pub fn verb(action: usize) -> String {
    VERBS
        .get(action)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("verb{action}"))
}

pub fn noun(object: usize) -> String {
    NOUNS
        .get(object)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("noun{object}"))
}

/// Parameters of a synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub n_actions: usize,
    pub n_objects: usize,
    pub n_confusable_pairs: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub visual_noise: f64,
    pub asr_fidelity: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_actions: 12,
            n_objects: 10,
            n_confusable_pairs: 2,
            frames: 48,
            feature_dim: 16,
            k_min: 2,
            k_max: 6,
            visual_noise: 0.3,
            asr_fidelity: 0.95,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n_actions == 0 || self.n_objects == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.n_confusable_pairs > self.n_actions / 2 {
            return bad(format!(
                "{} confusable pairs need at least {} actions",
                self.n_confusable_pairs,
                2 * self.n_confusable_pairs
            ));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return bad(format!("bad event range [{}, {}]", self.k_min, self.k_max));
        }
        if self.frames == 0 || self.feature_dim == 0 {
            return bad("frames and feature_dim must be positive".into());
        }
        if !(self.visual_noise >= 0.0) {
            return bad(format!("visual noise {} must be >= 0", self.visual_noise));
        }
        if !(0.0..=1.0).contains(&self.asr_fidelity) {
            return bad(format!("asr fidelity {} outside [0, 1]", self.asr_fidelity));
        }
        if self.k_max as f32 * MIN_EVENT_DURATION > 1.0 {
            return Err(Error::Generation(format!(
                "{} events of minimum duration {} do not fit in one video",
                self.k_max, MIN_EVENT_DURATION
            )));
        }
        Ok(())
    }

    /// Index of the visual prototype used by `action`.
    pub fn visual_class(&self, action: usize) -> usize {
        if action < 2 * self.n_confusable_pairs {
            action / 2
        } else {
            action - self.n_confusable_pairs
        }
    }

    /// All ASR/caption word tokens this world can emit.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = (0..self.n_actions).map(verb).collect();
        w.extend((0..self.n_objects).map(noun));
        w
    }
}

/// One event: what happens and when, as fractions of the video duration.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub start: f32,
    pub end: f32,
    /// Ground-truth (action, object); absent for boundaries produced by
    /// noise operators.
    pub label: Option<(usize, usize)>,
}

impl Event {
    pub fn span(start: f32, end: f32) -> Self {
        Event {
            start,
            end,
            label: None,
        }
    }
}

/// One timed ASR sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrSentence {
    pub tokens: Vec<String>,
    pub start: f32,
    pub end: f32,
}

/// One sample `(V, A, E, C)`. `None` marks an absent modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub video: Tensor<f32>,
    pub asr: Option<Vec<AsrSentence>>,
    pub events: Option<Vec<Event>>,
    pub caption: Vec<String>,
}

/// Ground-truth paragraph: `<verb> the <noun> .` per event, in order.
/// Unlabelled events contribute nothing.
pub fn render_caption(events: &[Event]) -> Vec<String> {
    let mut out = Vec::with_capacity(events.len() * 4);
    for e in events {
        if let Some((a, o)) = e.label {
            out.push(verb(a));
            out.push("the".to_string());
            out.push(noun(o));
            out.push(".".to_string());
        }
    }
    out
}

struct Prototypes {
    visual: Vec<Vec<f32>>,
    object: Vec<Vec<f32>>,
    background: Vec<f32>,
}

fn prototypes(spec: &WorldSpec) -> Prototypes {
    let mut rng = stream(spec.seed, "prototypes", 0);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let vec_of = |rng: &mut Rng| -> Vec<f32> {
        (0..spec.feature_dim)
            .map(|_| normal.sample(rng) as f32)
            .collect()
    };
    let n_visual = spec.n_actions - spec.n_confusable_pairs;
    let visual = (0..n_visual).map(|_| vec_of(&mut rng)).collect();
    let object = (0..spec.n_objects).map(|_| vec_of(&mut rng)).collect();
    let background = vec_of(&mut rng);
    Prototypes {
        visual,
        object,
        background,
    }
}

/// Clean frame feature for an event (no noise).
pub fn event_prototype(spec: &WorldSpec, action: usize, object: usize) -> Vec<f32> {
    let p = prototypes(spec);
    combine(&p, spec, action, object)
}

fn combine(p: &Prototypes, spec: &WorldSpec, action: usize, object: usize) -> Vec<f32> {
    p.visual[spec.visual_class(action)]
        .iter()
        .zip(&p.object[object])
        .map(|(a, b)| a + b)
        .collect()
}

fn layout(k: usize, rng: &mut Rng) -> Vec<(f32, f32)> {
    // Stick-breaking over [0, 1]: 2k + 1 alternating gap/event pieces, each
    // event padded to the minimum duration.
    let pieces: Vec<f64> = (0..2 * k + 1)
        .map(|i| {
            let u: f64 = rng.random::<f64>() + 1e-3;
            if i % 2 == 0 {
                u * GAP_WEIGHT
            } else {
                u
            }
        })
        .collect();
    let total: f64 = pieces.iter().sum();
    let free = 1.0 - k as f64 * MIN_EVENT_DURATION as f64;
    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(k);
    for (i, w) in pieces.iter().enumerate() {
        let len = free * w / total;
        if i % 2 == 0 {
            t += len;
        } else {
            let start = t;
            t += len + MIN_EVENT_DURATION as f64;
            out.push((start, t));
        }
    }
    out.into_iter()
        .map(|(s, e)| (s as f32, (e.min(1.0)) as f32))
        .collect()
}

fn generate(spec: &WorldSpec, protos: &Prototypes, seed: u64, id: String) -> Instance {
    let mut rng = stream(seed, "instance", 0);
    let k = rng.random_range(spec.k_min..=spec.k_max);
    let spans = layout(k, &mut rng);
    let events: Vec<Event> = spans
        .into_iter()
        .map(|(start, end)| Event {
            start,
            end,
            label: Some((
                rng.random_range(0..spec.n_actions),
                rng.random_range(0..spec.n_objects),
            )),
        })
        .collect();

    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let (f, d) = (spec.frames, spec.feature_dim);
    let mut video = Vec::with_capacity(f * d);
    for row in 0..f {
        let t = (row as f32 + 0.5) / f as f32;
        let clean = events
            .iter()
            .find(|e| e.start <= t && t < e.end)
            .and_then(|e| e.label)
            .map(|(a, o)| combine(protos, spec, a, o))
            .unwrap_or_else(|| protos.background.clone());
        for v in clean {
            let noise = if spec.visual_noise > 0.0 {
                (normal.sample(&mut rng) * spec.visual_noise) as f32
            } else {
                0.0
            };
            video.push(v + noise);
        }
    }

    let words = spec.words();
    let asr = events
        .iter()
        .map(|e| {
            let (a, o) = e.label.expect("generated events are labelled");
            let tokens = [verb(a), "the".to_string(), noun(o)]
                .into_iter()
                .map(|tok| {
                    if rng.random::<f64>() < 1.0 - spec.asr_fidelity {
                        words[rng.random_range(0..words.len())].clone()
                    } else {
                        tok
                    }
                })
                .collect();
            AsrSentence {
                tokens,
                start: e.start,
                end: e.end,
            }
        })
        .collect();

    let caption = render_caption(&events);
    Instance {
        id,
        video: Tensor::matrix(f, d, video).expect("frame matrix"),
        asr: Some(asr),
        events: Some(events),
        caption,
    }
}

pub fn gen_instance(spec: &WorldSpec, seed: u64) -> Result<Instance> {
    spec.validate()?;
    Ok(generate(spec, &prototypes(spec), seed, format!("{seed:016x}")))
}

/// `n` instances; instance `i` uses seed `derive_seed(split_seed, "instance", i)`.
pub fn gen_corpus(spec: &WorldSpec, n: usize, split_seed: u64) -> Result<Vec<Instance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("corpus size must be positive".into()));
    }
    let protos = prototypes(spec);
    Ok((0..n)
        .map(|i| {
            let seed = derive_seed(split_seed, "instance", i as u64);
            generate(spec, &protos, seed, format!("{split_seed}-{i:05}"))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub instances: usize,
    pub event_histogram: BTreeMap<usize, usize>,
    pub mean_events: f64,
    pub caption_tokens: usize,
    pub asr_tokens: usize,
    pub mean_event_duration: f64,
    pub min_event_duration: f64,
    pub max_event_duration: f64,
}

pub fn corpus_stats(corpus: &[Instance]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Argument("statistics of an empty corpus".into()));
    }
    let mut hist = BTreeMap::new();
    let (mut caption_tokens, mut asr_tokens, mut n_events) = (0, 0, 0usize);
    let (mut dsum, mut dmin, mut dmax) = (0.0f64, f64::INFINITY, 0.0f64);
    for inst in corpus {
        let events = inst.events.as_deref().unwrap_or(&[]);
        *hist.entry(events.len()).or_insert(0) += 1;
        n_events += events.len();
        for e in events {
            let d = (e.end - e.start) as f64;
            dsum += d;
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        caption_tokens += inst.caption.len();
        asr_tokens += inst
            .asr
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|s| s.tokens.len())
            .sum::<usize>();
    }
    Ok(CorpusStats {
        instances: corpus.len(),
        event_histogram: hist,
        mean_events: n_events as f64 / corpus.len() as f64,
        caption_tokens,
        asr_tokens,
        mean_event_duration: if n_events > 0 { dsum / n_events as f64 } else { 0.0 },
        min_event_duration: if n_events > 0 { dmin } else { 0.0 },
        max_event_duration: dmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_caption_templates() {
        assert!(render_caption(&[]).is_empty());
        let one = render_caption(&[Event {
            start: 0.1,
            end: 0.2,
            label: Some((3, 7)),
        }]);
        assert_eq!(one, vec!["dice", "the", "butter", "."]);
        let a = Event {
            start: 0.1,
            end: 0.2,
            label: Some((0, 0)),
        };
        let b = Event {
            start: 0.3,
            end: 0.4,
            label: Some((1, 1)),
        };
        let ab = render_caption(&[a.clone(), b.clone()]);
        let ba = render_caption(&[b, a]);
        assert_eq!(&ab[..4], &ba[4..]);
        assert_eq!(&ab[4..], &ba[..4]);
    }

    #[test]
    fn spec_validation() {
        let s = WorldSpec {
            n_confusable_pairs: 7,
            ..WorldSpec::default()
        };
        assert!(s.validate().is_err());
        let s = WorldSpec {
            k_min: 1,
            k_max: 21,
            ..WorldSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::Generation(_))));
        assert!(gen_corpus(&WorldSpec::default(), 0, 1).is_err());
    }

    #[test]
    fn corpus_stats_counts() {
        let mut inst = gen_instance(&WorldSpec::default(), 5).unwrap();
        let mut ev = inst.events.clone().unwrap();
        ev.truncate(3);
        if ev.len() < 3 {
            ev = vec![Event::span(0.0, 0.1), Event::span(0.2, 0.3), Event::span(0.4, 0.5)];
        }
        inst.events = Some(ev);
        let stats = corpus_stats(std::slice::from_ref(&inst)).unwrap();
        assert_eq!(stats.event_histogram, BTreeMap::from([(3, 1)]));
        assert!(corpus_stats(&[]).is_err());
    }

    #[test]
    fn visual_classes_merge_confusable_pairs() {
        let s = WorldSpec {
            n_confusable_pairs: 3,
            ..WorldSpec::default()
        };
        assert_eq!(s.visual_class(0), s.visual_class(1));
        assert_eq!(s.visual_class(4), s.visual_class(5));
        assert_ne!(s.visual_class(5), s.visual_class(6));
        assert_eq!(s.visual_class(11), 8);
    }
}
