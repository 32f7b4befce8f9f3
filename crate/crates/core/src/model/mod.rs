//! The fusion captioning network.
//!
//! * video encoder: frame projection + learned positions + self-attention blocks
//! * text encoder: token embedding + learned positions + self-attention blocks
//!   over the serialized ASR/event sequence
//! * fusion: parameter-free row concatenation, video rows first
//! * decoder: causal self-attention, cross-attention over the fused memory,
//!   untied output projection
//!
//! All blocks are pre-norm with a final layer norm per stack.

pub mod decode;
pub mod layers;

use crate::nn::ops::{self, AttnMask, LnCache};
use crate::nn::{ParamId, ParamStore, Scalar, Tensor};
use crate::rng::stream;
use crate::{Error, Result};

use layers::{Builder, DecoderBlock, DecoderBlockCache, EncoderBlock, EncoderBlockCache, LayerNorm, Linear};

pub use decode::{beam_search, DecodeConfig, DecodeOutput, StepScorer};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Decoder positions, counting the BOS/EOS framing.
    pub max_caption_len: usize,
    pub max_aux_len: usize,
}

impl ModelConfig {
    pub fn new(frames: usize, feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            video_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
            frames,
            feature_dim,
            vocab_size,
            max_caption_len: 96,
            max_aux_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail("width must be a positive multiple of the head count");
        }
        if self.video_layers == 0 || self.text_layers == 0 || self.decoder_layers == 0 {
            return fail("every stack needs at least one layer");
        }
        if self.frames == 0 || self.feature_dim == 0 || self.vocab_size == 0 {
            return fail("frames, feature_dim and vocab_size must be positive");
        }
        if self.max_caption_len < 2 || self.max_aux_len < 4 {
            return fail("sequence limits too small");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stack {
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
}

#[derive(Clone, Debug)]
struct Layout {
    video_proj: Linear,
    video_pos: ParamId,
    video: Stack,
    text_emb: ParamId,
    text_pos: ParamId,
    text: Stack,
    dec_emb: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    out: Linear,
}

fn build_layout<T: Scalar>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Layout> {
    let (d, h) = (cfg.d, cfg.heads);
    let video_proj = Linear::new(b, "video.proj", cfg.feature_dim, d)?;
    let video_pos = b.normal("video.pos", &[cfg.frames, d])?;
    let video = Stack {
        blocks: (0..cfg.video_layers)
            .map(|i| EncoderBlock::new(b, &format!("video.block{i}"), d, h))
            .collect::<Result<_>>()?,
        ln: LayerNorm::new(b, "video.ln", d)?,
    };
    let text_emb = b.normal("text.emb", &[cfg.vocab_size, d])?;
    let text_pos = b.normal("text.pos", &[cfg.max_aux_len, d])?;
    let text = Stack {
        blocks: (0..cfg.text_layers)
            .map(|i| EncoderBlock::new(b, &format!("text.block{i}"), d, h))
            .collect::<Result<_>>()?,
        ln: LayerNorm::new(b, "text.ln", d)?,
    };
    let dec_emb = b.normal("dec.emb", &[cfg.vocab_size, d])?;
    let dec_pos = b.normal("dec.pos", &[cfg.max_caption_len, d])?;
    let dec_blocks = (0..cfg.decoder_layers)
        .map(|i| DecoderBlock::new(b, &format!("dec.block{i}"), d, h))
        .collect::<Result<_>>()?;
    let dec_ln = LayerNorm::new(b, "dec.ln", d)?;
    let out = Linear::new(b, "dec.out", d, cfg.vocab_size)?;
    Ok(Layout {
        video_proj,
        video_pos,
        video,
        text_emb,
        text_pos,
        text,
        dec_emb,
        dec_pos,
        dec_blocks,
        dec_ln,
        out,
    })
}

/// Fused encoder output plus the cross-attention key mask (false = padding).
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub rows: Tensor<T>,
    pub mask: Option<Vec<bool>>,
    pub video_rows: usize,
}

/// Row-wise concatenation, video rows first.
pub fn fuse<T: Scalar>(video: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
    ops::concat_rows(video, text)
}

/// Per-position loss rule applied to teacher-forced decoder logits.
pub enum TokenLoss<'a, T> {
    CrossEntropy,
    /// `lambda * CE + (1 - lambda) * tau^2 * KL(teacher || student)` at
    /// temperature `tau`; `teacher` holds one logit row per position.
    WordKd {
        teacher: &'a Tensor<T>,
        tau: f64,
        lambda: f64,
    },
}

/// Loss and logit gradient for one position under [`TokenLoss`].
pub fn position_loss<T: Scalar>(
    logits: &[T],
    target: usize,
    rule: &TokenLoss<'_, T>,
    teacher_row: Option<&[T]>,
) -> Result<(f64, Vec<T>)> {
    let (ce, dce) = ops::softmax_cross_entropy(logits, target)?;
    match rule {
        TokenLoss::CrossEntropy => Ok((ce.f64(), dce)),
        TokenLoss::WordKd { tau, lambda, .. } => {
            let t = teacher_row.ok_or_else(|| Error::Shape("missing teacher logits".into()))?;
            let (kd, dkd) = kd_term(logits, t, *tau)?;
            let l = T::lit(*lambda);
            let grad = dce
                .iter()
                .zip(&dkd)
                .map(|(&a, &b)| l * a + (T::one() - l) * b)
                .collect();
            Ok((lambda * ce.f64() + (1.0 - lambda) * kd, grad))
        }
    }
}

/// `tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))` and its
/// gradient with respect to the student logits.
pub fn kd_term<T: Scalar>(student: &[T], teacher: &[T], tau: f64) -> Result<(f64, Vec<T>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "student has {} logits, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    let tt = T::lit(tau);
    let ls = ops::log_softmax(student, tt);
    let lt = ops::log_softmax(teacher, tt);
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (&s, &t) in ls.iter().zip(&lt) {
        let pt = t.exp();
        kl += pt.f64() * (t.f64() - s.f64());
        grad.push(tt * (s.exp() - pt));
    }
    Ok((tau * tau * kl, grad))
}

/// The captioning network and its parameters.
#[derive(Clone, Debug)]
pub struct Mvpc<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

struct StackCache<T> {
    blocks: Vec<EncoderBlockCache<T>>,
    ln: LnCache<T>,
}

/// Everything the backward pass needs from one training forward pass.
pub struct TrainForward<T> {
    frames: Tensor<T>,
    video_cache: StackCache<T>,
    text_ids: Vec<u32>,
    text_cache: StackCache<T>,
    memory: Memory<T>,
    dec_in: Vec<u32>,
    dec_cache: Vec<DecoderBlockCache<T>>,
    dec_ln: LnCache<T>,
    dec_hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub targets: Vec<u32>,
}

impl<T: Scalar> Mvpc<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init", 0);
        let layout = build_layout(
            &cfg,
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
        )?;
        Ok(Mvpc {
            cfg,
            params: store,
            layout,
        })
    }

    /// Wraps loaded parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Mvpc::<T>::new(cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (i, name) in fresh.params.names().iter().enumerate() {
            let id = ParamId(i);
            if params.name(id) != name {
                return Err(Error::Shape(format!(
                    "parameter {i} is {:?}, expected {name:?}",
                    params.name(id)
                )));
            }
            if params.value(id).shape() != fresh.params.value(id).shape() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    params.value(id).shape(),
                    fresh.params.value(id).shape()
                )));
            }
        }
        Ok(Mvpc {
            cfg: fresh.cfg,
            params,
            layout: fresh.layout,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Mvpc<U> {
        Mvpc {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_frames(&self, frames: &Tensor<T>) -> Result<()> {
        if frames.shape() != [self.cfg.frames, self.cfg.feature_dim] {
            return Err(Error::Argument(format!(
                "frame matrix {:?}, expected [{}, {}]",
                frames.shape(),
                self.cfg.frames,
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32], max: usize, what: &str) -> Result<()> {
        if ids.len() > max {
            return Err(Error::Argument(format!("{what} of {} tokens exceeds {max}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::Argument(format!("{what} token {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn run_stack(&self, stack: &Stack, mut x: Tensor<T>, mask: AttnMask<'_>) -> (Tensor<T>, StackCache<T>) {
        let p = &self.params;
        let mut blocks = Vec::with_capacity(stack.blocks.len());
        for b in &stack.blocks {
            let (y, c) = b.forward(p, &x, mask);
            blocks.push(c);
            x = y;
        }
        let (y, ln) = stack.ln.forward(p, &x);
        (y, StackCache { blocks, ln })
    }

    fn stack_backward(&self, stack: &Stack, cache: &StackCache<T>, g: &mut [Tensor<T>], dy: &Tensor<T>) -> Tensor<T> {
        let p = &self.params;
        let mut dx = stack.ln.backward(p, g, &cache.ln, dy);
        for (b, c) in stack.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(p, g, c, &dx);
        }
        dx
    }

    fn add_positions(&self, x: &mut Tensor<T>, table: ParamId) {
        let pos = self.params.value(table);
        for i in 0..x.rows() {
            for (a, &b) in x.row_mut(i).iter_mut().zip(pos.row(i)) {
                *a += b;
            }
        }
    }

    fn video_forward(&self, frames: &Tensor<T>) -> Result<(Tensor<T>, StackCache<T>)> {
        self.check_frames(frames)?;
        let mut x = self.layout.video_proj.forward(&self.params, frames);
        self.add_positions(&mut x, self.layout.video_pos);
        Ok(self.run_stack(&self.layout.video, x, AttnMask::NONE))
    }

    fn text_mask(&self, ids: &[u32], pad: Option<u32>) -> Option<Vec<bool>> {
        let pad = pad?;
        if ids.contains(&pad) {
            Some(ids.iter().map(|&i| i != pad).collect())
        } else {
            None
        }
    }

    fn text_forward(&self, ids: &[u32], pad: Option<u32>) -> Result<(Tensor<T>, StackCache<T>, Option<Vec<bool>>)> {
        self.check_ids(ids, self.cfg.max_aux_len, "aux sequence")?;
        let mut x = ops::embedding(self.params.value(self.layout.text_emb), ids)?;
        self.add_positions(&mut x, self.layout.text_pos);
        let mask = self.text_mask(ids, pad);
        let (y, c) = self.run_stack(
            &self.layout.text,
            x,
            AttnMask {
                causal: None,
                keys: mask.as_deref(),
            },
        );
        Ok((y, c, mask))
    }

    /// `E_v`: `[F, D_f]` frames to `[F, d]` embeddings.
    pub fn encode_video(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.video_forward(frames)?.0)
    }

    /// `E_t`: serialized aux tokens to `[n, d]` embeddings. Positions holding
    /// `pad` are excluded as attention keys.
    pub fn encode_text(&self, ids: &[u32], pad: Option<u32>) -> Result<Tensor<T>> {
        Ok(self.text_forward(ids, pad)?.0)
    }

    fn memory_from(&self, video: Tensor<T>, text: Tensor<T>, text_mask: Option<Vec<bool>>) -> Result<Memory<T>> {
        let video_rows = video.rows();
        let mask = text_mask.map(|m| {
            let mut full = vec![true; video_rows];
            full.extend(m);
            full
        });
        Ok(Memory {
            rows: fuse(&video, &text)?,
            mask,
            video_rows,
        })
    }

    /// Encodes both inputs and fuses them.
    pub fn memory(&self, frames: &Tensor<T>, aux: &[u32], pad: Option<u32>) -> Result<Memory<T>> {
        let v = self.encode_video(frames)?;
        let (t, _, mask) = self.text_forward(aux, pad)?;
        self.memory_from(v, t, mask)
    }

    fn frame_caption(&self, caption: &[u32], bos: u32, eos: u32) -> Result<(Vec<u32>, Vec<u32>)> {
        if caption.is_empty() {
            return Err(Error::Argument("empty caption".into()));
        }
        if caption.len() + 1 > self.cfg.max_caption_len {
            return Err(Error::Argument(format!(
                "caption of {} tokens exceeds limit {}",
                caption.len(),
                self.cfg.max_caption_len - 1
            )));
        }
        let mut input = Vec::with_capacity(caption.len() + 1);
        input.push(bos);
        input.extend_from_slice(caption);
        let mut target = caption.to_vec();
        target.push(eos);
        self.check_ids(&input, self.cfg.max_caption_len, "caption")?;
        self.check_ids(&target, self.cfg.max_caption_len, "caption")?;
        Ok((input, target))
    }

    fn decoder_forward(
        &self,
        memory: &Memory<T>,
        input: &[u32],
    ) -> Result<(Tensor<T>, Vec<DecoderBlockCache<T>>, LnCache<T>, Tensor<T>)> {
        let p = &self.params;
        let mut x = ops::embedding(p.value(self.layout.dec_emb), input)?;
        self.add_positions(&mut x, self.layout.dec_pos);
        let mut caches = Vec::with_capacity(self.layout.dec_blocks.len());
        for b in &self.layout.dec_blocks {
            let (y, c) = b.forward(p, &x, &memory.rows, memory.mask.as_deref());
            caches.push(c);
            x = y;
        }
        let (h, ln) = self.layout.dec_ln.forward(p, &x);
        let logits = self.layout.out.forward(p, &h);
        Ok((logits, caches, ln, h))
    }

    /// Teacher-forced logits, one row per target position.
    pub fn caption_logits(&self, memory: &Memory<T>, caption: &[u32], bos: u32, eos: u32) -> Result<Tensor<T>> {
        let (input, _) = self.frame_caption(caption, bos, eos)?;
        Ok(self.decoder_forward(memory, &input)?.0)
    }

    /// Cross-entropy at each target position (caption tokens then EOS).
    pub fn token_losses(&self, memory: &Memory<T>, caption: &[u32], bos: u32, eos: u32) -> Result<Vec<T>> {
        let (input, target) = self.frame_caption(caption, bos, eos)?;
        let (logits, ..) = self.decoder_forward(memory, &input)?;
        target
            .iter()
            .enumerate()
            .map(|(i, &t)| Ok(ops::softmax_cross_entropy(logits.row(i), t as usize)?.0))
            .collect()
    }

    /// Mean teacher-forced cross-entropy of `caption` given `memory`.
    pub fn forward_loss(&self, memory: &Memory<T>, caption: &[u32], bos: u32, eos: u32) -> Result<T> {
        let l = self.token_losses(memory, caption, bos, eos)?;
        Ok(l.iter().copied().sum::<T>() / T::lit(l.len() as f64))
    }

    /// Full forward pass keeping every activation for [`Mvpc::backward`].
    pub fn forward_train(
        &self,
        frames: &Tensor<T>,
        aux: &[u32],
        caption: &[u32],
        tokens: SpecialTokens,
    ) -> Result<TrainForward<T>> {
        let (video, video_cache) = self.video_forward(frames)?;
        let (text, text_cache, mask) = self.text_forward(aux, Some(tokens.pad))?;
        let memory = self.memory_from(video, text, mask)?;
        let (dec_in, targets) = self.frame_caption(caption, tokens.bos, tokens.eos)?;
        let (logits, dec_cache, dec_ln, dec_hidden) = self.decoder_forward(&memory, &dec_in)?;
        Ok(TrainForward {
            frames: frames.clone(),
            video_cache,
            text_ids: aux.to_vec(),
            text_cache,
            memory,
            dec_in,
            dec_cache,
            dec_ln,
            dec_hidden,
            logits,
            targets,
        })
    }

    /// Backpropagates `dlogits` (same shape as `fwd.logits`) into `g`.
    pub fn backward(&self, fwd: &TrainForward<T>, dlogits: &Tensor<T>, g: &mut [Tensor<T>]) {
        let p = &self.params;
        let l = &self.layout;
        let dh = l.out.backward(p, g, &fwd.dec_hidden, dlogits);
        let mut dx = l.dec_ln.backward(p, g, &fwd.dec_ln, &dh);
        let mut dmem = Tensor::zeros(fwd.memory.rows.shape());
        for (b, c) in l.dec_blocks.iter().zip(&fwd.dec_cache).rev() {
            let (dxi, dm) = b.backward(p, g, &fwd.memory.rows, c, &dx);
            dmem.add_assign(&dm);
            dx = dxi;
        }
        accumulate_positions(&mut g[l.dec_pos.0], &dx);
        ops::embedding_backward(&fwd.dec_in, &dx, &mut g[l.dec_emb.0]);

        let nv = fwd.memory.video_rows;
        let dvideo = dmem.slice_rows(0, nv);
        let dtext = dmem.slice_rows(nv, dmem.rows() - nv);

        let dt = self.stack_backward(&l.text, &fwd.text_cache, g, &dtext);
        accumulate_positions(&mut g[l.text_pos.0], &dt);
        ops::embedding_backward(&fwd.text_ids, &dt, &mut g[l.text_emb.0]);

        let dv = self.stack_backward(&l.video, &fwd.video_cache, g, &dvideo);
        accumulate_positions(&mut g[l.video_pos.0], &dv);
        l.video_proj.backward(p, g, &fwd.frames, &dv);
    }

    /// Forward + backward for one instance. Gradients are scaled by `weight`
    /// (e.g. `1 / tokens in batch`); returns the summed per-position loss and
    /// the number of positions.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        frames: &Tensor<T>,
        aux: &[u32],
        caption: &[u32],
        tokens: SpecialTokens,
        rule: &TokenLoss<'_, T>,
        weight: f64,
        g: &mut [Tensor<T>],
    ) -> Result<(f64, usize)> {
        let fwd = self.forward_train(frames, aux, caption, tokens)?;
        let n = fwd.targets.len();
        if let TokenLoss::WordKd { teacher, .. } = rule {
            if teacher.shape() != fwd.logits.shape() {
                return Err(Error::Shape(format!(
                    "teacher logits {:?} vs student {:?}",
                    teacher.shape(),
                    fwd.logits.shape()
                )));
            }
        }
        let mut dlogits = Tensor::zeros(fwd.logits.shape());
        let w = T::lit(weight);
        let mut total = 0.0;
        for (i, &t) in fwd.targets.iter().enumerate() {
            let teacher_row = match rule {
                TokenLoss::WordKd { teacher, .. } => Some(teacher.row(i)),
                TokenLoss::CrossEntropy => None,
            };
            let (loss, grad) = position_loss(fwd.logits.row(i), t as usize, rule, teacher_row)?;
            total += loss;
            for (d, gv) in dlogits.row_mut(i).iter_mut().zip(grad) {
                *d = gv * w;
            }
        }
        self.backward(&fwd, &dlogits, g);
        Ok((total, n))
    }

    /// Summed cross-entropy in excess of a uniform prediction, with its exact
    /// gradient written into `g`. Same gradient as the training loss with
    /// unit weight, but the value carries far less rounding, which is what a
    /// finite-difference check needs.
    pub fn check_loss(
        &self,
        frames: &Tensor<T>,
        aux: &[u32],
        caption: &[u32],
        tokens: SpecialTokens,
        g: &mut [Tensor<T>],
    ) -> Result<f64> {
        let fwd = self.forward_train(frames, aux, caption, tokens)?;
        let mut dlogits = Tensor::zeros(fwd.logits.shape());
        let mut total = 0.0;
        for (i, &t) in fwd.targets.iter().enumerate() {
            total += ops::excess_cross_entropy(fwd.logits.row(i), t as usize)?.f64();
            let (_, grad) = ops::softmax_cross_entropy(fwd.logits.row(i), t as usize)?;
            dlogits.row_mut(i).copy_from_slice(&grad);
        }
        self.backward(&fwd, &dlogits, g);
        Ok(total)
    }

    /// Incremental decoding state after consuming BOS.
    pub fn start_decoding(&self, memory: &Memory<T>, bos: u32) -> Result<(DecoderState<T>, Vec<T>)> {
        let p = &self.params;
        let cross = self
            .layout
            .dec_blocks
            .iter()
            .map(|b| b.cross.project_kv(p, &memory.rows))
            .collect();
        let state = DecoderState {
            cross: std::sync::Arc::new(cross),
            mask: memory.mask.clone().map(std::sync::Arc::new),
            self_k: vec![Tensor::zeros(&[0, self.cfg.d]); self.layout.dec_blocks.len()],
            self_v: vec![Tensor::zeros(&[0, self.cfg.d]); self.layout.dec_blocks.len()],
        };
        self.step(&state, bos)
    }

    /// Feeds one token; returns the extended state and next-token logits.
    pub fn step(&self, state: &DecoderState<T>, token: u32) -> Result<(DecoderState<T>, Vec<T>)> {
        let p = &self.params;
        let pos = state.len();
        if pos >= self.cfg.max_caption_len {
            return Err(Error::Argument("decoder positions exhausted".into()));
        }
        self.check_ids(&[token], 1, "decoder input")?;
        let mut x = ops::embedding(p.value(self.layout.dec_emb), &[token])?;
        for (a, &b) in x.row_mut(0).iter_mut().zip(p.value(self.layout.dec_pos).row(pos)) {
            *a += b;
        }
        let mut next = DecoderState {
            cross: state.cross.clone(),
            mask: state.mask.clone(),
            self_k: Vec::with_capacity(state.self_k.len()),
            self_v: Vec::with_capacity(state.self_v.len()),
        };
        for (li, b) in self.layout.dec_blocks.iter().enumerate() {
            let (a, _) = b.ln1.forward(p, &x);
            let q = b.self_attn.q.forward(p, &a);
            let k = ops::concat_rows(&state.self_k[li], &b.self_attn.k.forward(p, &a))?;
            let v = ops::concat_rows(&state.self_v[li], &b.self_attn.v.forward(p, &a))?;
            let (ctx, _) = ops::attention(&q, &k, &v, b.self_attn.heads, AttnMask::NONE);
            x.add_assign(&b.self_attn.o.forward(p, &ctx));
            next.self_k.push(k);
            next.self_v.push(v);

            let (bn, _) = b.ln2.forward(p, &x);
            let q = b.cross.q.forward(p, &bn);
            let (ck, cv) = &state.cross[li];
            let mask = AttnMask {
                causal: None,
                keys: state.mask.as_deref().map(|m| m.as_slice()),
            };
            let (ctx, _) = ops::attention(&q, ck, cv, b.cross.heads, mask);
            x.add_assign(&b.cross.o.forward(p, &ctx));

            let (c, _) = b.ln3.forward(p, &x);
            let (f, _) = b.ff.forward(p, &c);
            x.add_assign(&f);
        }
        let (h, _) = self.layout.dec_ln.forward(p, &x);
        let logits = self.layout.out.forward(p, &h).into_data();
        Ok((next, logits))
    }

    /// Ids of the text-embedding table and the decoder token table.
    pub fn embedding_ids(&self) -> (ParamId, ParamId) {
        (self.layout.text_emb, self.layout.dec_emb)
    }
}

fn accumulate_positions<T: Scalar>(table_grad: &mut Tensor<T>, dx: &Tensor<T>) {
    for i in 0..dx.rows() {
        for (a, &b) in table_grad.row_mut(i).iter_mut().zip(dx.row(i)) {
            *a += b;
        }
    }
}

/// Control token ids the network needs during training.
#[derive(Clone, Copy, Debug)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl SpecialTokens {
    pub fn of(v: &crate::timetok::Vocab) -> Self {
        SpecialTokens {
            bos: v.bos(),
            eos: v.eos(),
            pad: v.pad(),
        }
    }
}

type KvPair<T> = (Tensor<T>, Tensor<T>);

/// Key/value caches for incremental decoding of one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    cross: std::sync::Arc<Vec<KvPair<T>>>,
    mask: Option<std::sync::Arc<Vec<bool>>>,
    self_k: Vec<Tensor<T>>,
    self_v: Vec<Tensor<T>>,
}

impl<T: Scalar> DecoderState<T> {
    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.self_k.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
