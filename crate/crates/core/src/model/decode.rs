//! Beam search with a repetition penalty and length normalization.

use std::cmp::Ordering;

use super::{DecoderState, Memory, Mvpc};
use crate::nn::Scalar;
use crate::timetok::Vocab;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub repetition_penalty: f64,
    pub length_alpha: f64,
    pub max_steps: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            repetition_penalty: 1.2,
            length_alpha: 1.0,
            max_steps: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config("repetition penalty must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max steps must be at least 1".into()));
        }
        if !self.length_alpha.is_finite() {
            return Err(Error::Config("length exponent must be finite".into()));
        }
        Ok(())
    }
}

/// Source of next-token logits for incremental decoding.
pub trait StepScorer {
    type State: Clone;
    /// State after the start token, with logits for the first position.
    fn init(&self) -> Result<(Self::State, Vec<f64>)>;
    fn extend(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens, without the end token.
    pub tokens: Vec<u32>,
    /// Length-normalized log-probability.
    pub score: f64,
    /// True when `max_steps` ran out before any hypothesis ended.
    pub truncated: bool,
}

/// Rescales logits of tokens already present in `history`.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        if let Some(s) = seen.get_mut(t as usize) {
            *s = true;
        }
    }
    for (l, s) in logits.iter_mut().zip(seen) {
        if s {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

fn log_softmax(logits: &[f64], banned: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(banned)
        .filter(|(_, &b)| !b)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .zip(banned)
        .filter(|(_, &b)| !b)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lz = max + z.ln();
    logits
        .iter()
        .zip(banned)
        .map(|(&l, &b)| if b { f64::NEG_INFINITY } else { l - lz })
        .collect()
}

fn normalized(logp: f64, len: usize, alpha: f64) -> f64 {
    logp / (len.max(1) as f64).powf(alpha)
}

struct Live<S> {
    tokens: Vec<u32>,
    logp: f64,
    state: S,
    logits: Vec<f64>,
}

/// Beam search over `scorer`. Tokens in `banned` are never generated.
pub fn beam_search<S: StepScorer>(scorer: &S, eos: u32, banned: &[u32], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    let (state, logits) = scorer.init()?;
    let vocab = logits.len();
    if eos as usize >= vocab {
        return Err(Error::Argument(format!("end token {eos} outside vocabulary of {vocab}")));
    }
    let mut ban = vec![false; vocab];
    for &b in banned {
        if b != eos {
            if let Some(x) = ban.get_mut(b as usize) {
                *x = true;
            }
        }
    }

    let mut live = vec![Live {
        tokens: Vec::new(),
        logp: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for step in 0..cfg.max_steps {
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * vocab);
        for (hi, h) in live.iter().enumerate() {
            let mut l = h.logits.clone();
            apply_repetition_penalty(&mut l, &h.tokens, cfg.repetition_penalty);
            let lp = log_softmax(&l, &ban);
            for (tok, &v) in lp.iter().enumerate() {
                if v.is_finite() {
                    cands.push((h.logp + v, tok as u32, hi));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(2 * cfg.beam);

        let last = step + 1 == cfg.max_steps;
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(logp, tok, hi)) in cands.iter().enumerate() {
            if tok == eos {
                if rank < cfg.beam {
                    finished.push((live[hi].tokens.clone(), normalized(logp, live[hi].tokens.len() + 1, cfg.length_alpha)));
                }
                continue;
            }
            if next.len() == cfg.beam {
                continue;
            }
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let (state, logits) = if last {
                (live[hi].state.clone(), Vec::new())
            } else {
                scorer.extend(&live[hi].state, tok)?
            };
            next.push(Live {
                tokens,
                logp,
                state,
                logits,
            });
        }
        live = next;
        if finished.len() >= cfg.beam || live.is_empty() {
            break;
        }
    }

    let best_finished = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(ib.cmp(ia)));
    if let Some((_, (tokens, score))) = best_finished {
        return Ok(DecodeOutput {
            tokens,
            score,
            truncated: false,
        });
    }
    let best = live
        .into_iter()
        .enumerate()
        .map(|(i, h)| (i, normalized(h.logp, h.tokens.len(), cfg.length_alpha), h.tokens))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::Generation("beam search produced no hypothesis".into()))?;
    Ok(DecodeOutput {
        tokens: best.2,
        score: best.1,
        truncated: true,
    })
}

/// Adapts a model and a fused memory to [`StepScorer`].
pub struct ModelScorer<'a, T> {
    pub model: &'a Mvpc<T>,
    pub memory: &'a Memory<T>,
    pub bos: u32,
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn init(&self) -> Result<(Self::State, Vec<f64>)> {
        let (s, l) = self.model.start_decoding(self.memory, self.bos)?;
        Ok((s, l.into_iter().map(Scalar::f64).collect()))
    }

    fn extend(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)> {
        let (s, l) = self.model.step(state, token)?;
        Ok((s, l.into_iter().map(Scalar::f64).collect()))
    }
}

impl<T: Scalar> Mvpc<T> {
    /// Decodes a caption from fused memory. Only vocabulary words and the end
    /// token can be generated.
    pub fn decode(&self, memory: &Memory<T>, vocab: &Vocab, cfg: &DecodeConfig) -> Result<DecodeOutput> {
        let mut cfg = cfg.clone();
        cfg.max_steps = cfg.max_steps.min(self.cfg.max_caption_len - 1);
        let banned: Vec<u32> = (0..vocab.len() as u32).filter(|&t| !vocab.is_word(t)).collect();
        let scorer = ModelScorer {
            model: self,
            memory,
            bos: vocab.bos(),
        };
        beam_search(&scorer, vocab.eos(), &banned, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_divides_positive_and_multiplies_negative() {
        let mut l = vec![2.0, -2.0, 1.0];
        apply_repetition_penalty(&mut l, &[0, 1], 2.0);
        assert_eq!(l, vec![1.0, -4.0, 1.0]);
        let mut same = vec![0.3, -0.7];
        apply_repetition_penalty(&mut same, &[0, 1], 1.0);
        assert_eq!(same, vec![0.3, -0.7]);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            DecodeConfig { beam: 0, ..Default::default() },
            DecodeConfig { repetition_penalty: 0.9, ..Default::default() },
            DecodeConfig { max_steps: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    struct Fixed(Vec<f64>);

    impl StepScorer for Fixed {
        type State = ();
        fn init(&self) -> Result<((), Vec<f64>)> {
            Ok(((), self.0.clone()))
        }
        fn extend(&self, _: &(), _: u32) -> Result<((), Vec<f64>)> {
            Ok(((), self.0.clone()))
        }
    }

    #[test]
    fn never_ending_scorer_is_truncated() {
        let cfg = DecodeConfig { beam: 2, repetition_penalty: 1.0, length_alpha: 0.0, max_steps: 3 };
        let out = beam_search(&Fixed(vec![5.0, 0.0, -5.0]), 2, &[], &cfg).unwrap();
        assert!(out.truncated);
        assert_eq!(out.tokens, vec![0, 0, 0]);
    }

    #[test]
    fn banned_tokens_never_appear() {
        let cfg = DecodeConfig { beam: 3, repetition_penalty: 1.0, length_alpha: 0.0, max_steps: 4 };
        let out = beam_search(&Fixed(vec![9.0, 0.0, 1.0]), 2, &[0], &cfg).unwrap();
        assert!(!out.tokens.contains(&0));
    }
}
