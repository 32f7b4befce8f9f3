//! Vocabulary and relative time tokens.
//!
//! Timestamps are fractions of the video duration and map to one of `N`
//! percentage-progress tokens. ASR sentences and event boundaries are
//! serialized into the single text-encoder input:
//!
//! ```text
//! <sep_asr> (<time(start)> word*)* <sep_evt> (<time(start)> <time(end)>)*
//! ```
//!
//! with `<null_asr>` / `<null_evt>` standing in for an absent block.

use std::collections::HashMap;

use crate::data::{AsrSentence, Event, Instance};
use crate::{Error, Result};

pub const DEFAULT_TIME_BINS: usize = 100;
pub const DEFAULT_MAX_AUX_LEN: usize = 256;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const SEP_ASR: &str = "<sep_asr>";
pub const SEP_EVT: &str = "<sep_evt>";
pub const NULL_ASR: &str = "<null_asr>";
pub const NULL_EVT: &str = "<null_evt>";
pub const UNK: &str = "<unk>";

const CONTROL: [&str; 8] = [BOS, EOS, PAD, SEP_ASR, SEP_EVT, NULL_ASR, NULL_EVT, UNK];

/// `min(floor(t * n), n - 1)`. Values outside `[0, 1]` are clamped; the
/// boolean reports whether clamping happened.
pub fn time_to_token(t: f64, n: usize) -> Result<(usize, bool)> {
    if t.is_nan() {
        return Err(Error::Argument("timestamp is NaN".into()));
    }
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 time bins, got {n}")));
    }
    let clamped = !(0.0..=1.0).contains(&t);
    let t = t.clamp(0.0, 1.0);
    Ok((((t * n as f64).floor() as usize).min(n - 1), clamped))
}

/// Bin center `(index + 0.5) / n`.
pub fn token_to_time(index: usize, n: usize) -> Result<f64> {
    if index >= n {
        return Err(Error::Argument(format!("time bin {index} out of range {n}")));
    }
    Ok((index as f64 + 0.5) / n as f64)
}

/// Dense token ids: word tokens, then `N` time tokens, then control tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_words: usize,
    time_bins: usize,
}

fn time_name(i: usize) -> String {
    format!("<time_{i}>")
}

impl Vocab {
    pub fn new(words: Vec<String>, time_bins: usize) -> Result<Self> {
        if time_bins < 2 {
            return Err(Error::Argument(format!("need at least 2 time bins, got {time_bins}")));
        }
        let mut tokens = Vec::with_capacity(words.len() + time_bins + CONTROL.len());
        for w in words {
            if w.is_empty() || w.starts_with('<') || w.chars().any(char::is_whitespace) {
                return Err(Error::Argument(format!("invalid word token {w:?}")));
            }
            tokens.push(w);
        }
        let n_words = tokens.len();
        tokens.extend((0..time_bins).map(time_name));
        tokens.extend(CONTROL.iter().map(|s| s.to_string()));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            n_words,
            time_bins,
        })
    }

    /// Rebuilds a vocabulary from its ordered token list (checkpoint form).
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let time_bins = tokens.iter().filter(|t| t.starts_with("<time_")).count();
        let n_words = tokens
            .len()
            .checked_sub(time_bins + CONTROL.len())
            .ok_or_else(|| Error::Argument("token list too short".into()))?;
        let v = Vocab::new(tokens[..n_words].to_vec(), time_bins)?;
        if v.tokens != tokens {
            return Err(Error::Argument("token list is not in vocabulary order".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn time_bins(&self) -> usize {
        self.time_bins
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    fn control(&self, name: &str) -> u32 {
        self.index[name]
    }

    pub fn bos(&self) -> u32 {
        self.control(BOS)
    }
    pub fn eos(&self) -> u32 {
        self.control(EOS)
    }
    pub fn pad(&self) -> u32 {
        self.control(PAD)
    }
    pub fn sep_asr(&self) -> u32 {
        self.control(SEP_ASR)
    }
    pub fn sep_evt(&self) -> u32 {
        self.control(SEP_EVT)
    }
    pub fn null_asr(&self) -> u32 {
        self.control(NULL_ASR)
    }
    pub fn null_evt(&self) -> u32 {
        self.control(NULL_EVT)
    }
    pub fn unk(&self) -> u32 {
        self.control(UNK)
    }

    pub fn time_token(&self, bin: usize) -> u32 {
        (self.n_words + bin) as u32
    }

    pub fn is_word(&self, id: u32) -> bool {
        (id as usize) < self.n_words
    }

    /// Word id, or `<unk>` plus a miss flag.
    pub fn word_id(&self, token: &str) -> (u32, bool) {
        match self.index.get(token) {
            Some(&id) if self.is_word(id) => (id, false),
            _ => (self.unk(), true),
        }
    }

    /// Encodes caption words; unknown words map to `<unk>`.
    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.word_id(w).0).collect()
    }

    /// Decodes ids to word strings, dropping control and time tokens.
    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| self.is_word(id))
            .map(|&id| self.tokens[id as usize].clone())
            .collect()
    }
}

/// Words in first-occurrence order over captions then ASR, instance by
/// instance.
pub fn build_vocab(corpus: &[Instance], time_bins: usize) -> Result<Vocab> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::new();
    let mut visit = |w: &String| {
        if seen.insert(w.clone()) {
            words.push(w.clone());
        }
    };
    for inst in corpus {
        inst.caption.iter().for_each(&mut visit);
        for s in inst.asr.as_deref().unwrap_or(&[]) {
            s.tokens.iter().for_each(&mut visit);
        }
    }
    Vocab::new(words, time_bins)
}

/// Serialized text-encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxSequence {
    pub ids: Vec<u32>,
    /// Word tokens that fell back to `<unk>`.
    pub unknown: usize,
    /// Timestamps that were clamped into `[0, 1]`.
    pub clamped: usize,
}

impl AuxSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lays out ASR then events. When the result would exceed `max_len`, ASR
/// tokens are dropped from the tail of the ASR block first, then whole
/// (start, end) pairs from the tail of the event block, so both separators
/// always survive and time pairs are never split.
pub fn serialize_aux(
    asr: Option<&[AsrSentence]>,
    events: Option<&[Event]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<AuxSequence> {
    if max_len < 4 {
        return Err(Error::Argument(format!("max aux length {max_len} below 4")));
    }
    let n = vocab.time_bins();
    let mut unknown = 0;
    let mut clamped = 0;
    let mut time = |t: f32| -> Result<u32> {
        let (bin, c) = time_to_token(t as f64, n)?;
        clamped += c as usize;
        Ok(vocab.time_token(bin))
    };

    let mut asr_block = Vec::new();
    match asr {
        None => asr_block.push(vocab.null_asr()),
        Some(sentences) => {
            for s in sentences {
                asr_block.push(time(s.start)?);
                for w in &s.tokens {
                    let (id, miss) = vocab.word_id(w);
                    unknown += miss as usize;
                    asr_block.push(id);
                }
            }
        }
    }
    let mut evt_block = Vec::new();
    match events {
        None => evt_block.push(vocab.null_evt()),
        Some(evs) => {
            for e in evs {
                evt_block.push(time(e.start)?);
                evt_block.push(time(e.end)?);
            }
        }
    }

    let budget = max_len - 2;
    if asr_block.len() + evt_block.len() > budget {
        let keep_evt = if events.is_some() {
            evt_block.len().min(budget.saturating_sub(1)) / 2 * 2
        } else {
            evt_block.len()
        };
        evt_block.truncate(keep_evt);
        let keep_asr = budget - evt_block.len();
        asr_block.truncate(keep_asr.max(if asr.is_none() { 1 } else { 0 }));
    }

    let mut ids = Vec::with_capacity(asr_block.len() + evt_block.len() + 2);
    ids.push(vocab.sep_asr());
    ids.extend(asr_block);
    ids.push(vocab.sep_evt());
    ids.extend(evt_block);
    Ok(AuxSequence {
        ids,
        unknown,
        clamped,
    })
}

pub fn serialize_instance(inst: &Instance, vocab: &Vocab, max_len: usize) -> Result<AuxSequence> {
    serialize_aux(inst.asr.as_deref(), inst.events.as_deref(), vocab, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(vec!["cut".into(), "the".into(), "onion".into()], 100).unwrap()
    }

    #[test]
    fn time_token_landmarks() {
        assert_eq!(time_to_token(0.0, 100).unwrap(), (0, false));
        assert_eq!(time_to_token(1.0, 100).unwrap(), (99, false));
        assert_eq!(time_to_token(0.537, 100).unwrap(), (53, false));
        assert_eq!(time_to_token(1.7, 100).unwrap(), (99, true));
        assert_eq!(time_to_token(-0.2, 100).unwrap(), (0, true));
        assert!(time_to_token(f64::NAN, 100).is_err());
        assert!(time_to_token(0.5, 1).is_err());
    }

    #[test]
    fn bin_centers() {
        assert!((token_to_time(0, 100).unwrap() - 0.005).abs() < 1e-15);
        assert!((token_to_time(99, 100).unwrap() - 0.995).abs() < 1e-15);
        assert!(token_to_time(100, 100).is_err());
    }

    #[test]
    fn both_null_layout() {
        let v = vocab();
        let s = serialize_aux(None, None, &v, 256).unwrap();
        assert_eq!(s.ids, vec![v.sep_asr(), v.null_asr(), v.sep_evt(), v.null_evt()]);
    }

    #[test]
    fn event_block_uses_floor_bins() {
        let v = vocab();
        let ev = [Event::span(0.20, 0.40)];
        let s = serialize_aux(None, Some(&ev), &v, 256).unwrap();
        assert_eq!(&s.ids[3..], &[v.time_token(20), v.time_token(40)]);
    }

    #[test]
    fn length_without_asr_is_2k_plus_3() {
        let v = vocab();
        for k in 0..7 {
            let ev: Vec<Event> = (0..k)
                .map(|i| Event::span(i as f32 * 0.1, i as f32 * 0.1 + 0.05))
                .collect();
            let s = serialize_aux(None, Some(&ev), &v, 256).unwrap();
            assert_eq!(s.len(), 2 * k + 3);
        }
    }

    #[test]
    fn unknown_words_are_counted() {
        let v = vocab();
        let asr = [AsrSentence {
            tokens: vec!["cut".into(), "zebra".into()],
            start: 0.1,
            end: 0.2,
        }];
        let s = serialize_aux(Some(&asr), None, &v, 256).unwrap();
        assert_eq!(s.unknown, 1);
        assert_eq!(s.ids[1..4], [v.time_token(10), v.id("cut").unwrap(), v.unk()]);
    }

    #[test]
    fn truncation_keeps_separators_and_pairs() {
        let v = vocab();
        let asr: Vec<AsrSentence> = (0..10)
            .map(|i| AsrSentence {
                tokens: vec!["cut".into(), "the".into(), "onion".into()],
                start: i as f32 * 0.1,
                end: i as f32 * 0.1 + 0.05,
            })
            .collect();
        let ev: Vec<Event> = (0..10)
            .map(|i| Event::span(i as f32 * 0.1, i as f32 * 0.1 + 0.05))
            .collect();
        for max_len in [4, 5, 9, 12, 23, 40, 80] {
            let s = serialize_aux(Some(&asr), Some(&ev), &v, max_len).unwrap();
            assert!(s.len() <= max_len);
            assert_eq!(s.ids.iter().filter(|&&i| i == v.sep_asr()).count(), 1);
            assert_eq!(s.ids.iter().filter(|&&i| i == v.sep_evt()).count(), 1);
            let sep = s.ids.iter().position(|&i| i == v.sep_evt()).unwrap();
            assert_eq!((s.len() - sep - 1) % 2, 0);
        }
    }

    #[test]
    fn vocab_layout_and_rebuild() {
        let v = vocab();
        assert_eq!(v.len(), 3 + 100 + 8);
        assert_eq!(v.time_token(0), 3);
        assert!(!v.is_word(v.bos()));
        let again = Vocab::from_tokens(v.tokens()).unwrap();
        assert_eq!(again, v);
        let empty = Vocab::new(vec![], 100).unwrap();
        assert_eq!(empty.len(), 108);
    }
}
