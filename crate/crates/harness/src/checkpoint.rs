//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MRVPCKPT" | u32 version
//! str config | u32 n_tokens, str token * n_tokens | str metadata
//! u32 n_params, then per parameter:
//!   str name | u32 ndim | u32 dim * ndim | f32 value * prod(dims)
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use mrvpc_core::model::{ModelConfig, Mvpc};
use mrvpc_core::nn::{ParamStore, Tensor};
use mrvpc_core::timetok::Vocab;
use sha2::{Digest, Sha256};

use crate::{fsutil, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MRVPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub mode: String,
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: &Mvpc<f32>, vocab: &Vocab, meta: CheckpointMeta) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            vocab: vocab.clone(),
            params: model.params.clone(),
            meta,
        }
    }

    pub fn model(&self) -> Result<Mvpc<f32>> {
        Mvpc::from_params(self.config.clone(), self.params.clone())
            .map_err(|e| HarnessError::Checkpoint(e.to_string()))
    }
}

/// First 16 hex digits of the SHA-256 of the ordered token list.
pub fn vocab_hash(vocab: &Vocab) -> String {
    let mut h = Sha256::new();
    for t in vocab.tokens() {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "d={}\nheads={}\nvideo_layers={}\ntext_layers={}\ndecoder_layers={}\nframes={}\nfeature_dim={}\nvocab_size={}\nmax_caption_len={}\nmax_aux_len={}\n",
        c.d,
        c.heads,
        c.video_layers,
        c.text_layers,
        c.decoder_layers,
        c.frames,
        c.feature_dim,
        c.vocab_size,
        c.max_caption_len,
        c.max_aux_len
    )
}

fn fields(text: &str, keys: &[&str]) -> Result<Vec<String>> {
    let pairs: Vec<(&str, &str)> = text
        .lines()
        .map(|l| l.split_once('=').ok_or_else(|| corrupt(format!("bad header line {l:?}"))))
        .collect::<Result<_>>()?;
    if pairs.len() != keys.len() || pairs.iter().zip(keys).any(|((k, _), want)| k != want) {
        return Err(corrupt("unexpected header fields"));
    }
    Ok(pairs.into_iter().map(|(_, v)| v.to_string()).collect())
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| corrupt(format!("bad number {s:?}")))
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let keys = [
        "d",
        "heads",
        "video_layers",
        "text_layers",
        "decoder_layers",
        "frames",
        "feature_dim",
        "vocab_size",
        "max_caption_len",
        "max_aux_len",
    ];
    let v = fields(text, &keys)?;
    let n = |i: usize| num::<usize>(&v[i]);
    Ok(ModelConfig {
        d: n(0)?,
        heads: n(1)?,
        video_layers: n(2)?,
        text_layers: n(3)?,
        decoder_layers: n(4)?,
        frames: n(5)?,
        feature_dim: n(6)?,
        vocab_size: n(7)?,
        max_caption_len: n(8)?,
        max_aux_len: n(9)?,
    })
}

fn meta_text(m: &CheckpointMeta) -> String {
    format!("mode={}\nepochs={}\nseed={}\nconfig_hash={}\n", m.mode, m.epochs, m.seed, m.config_hash)
}

fn parse_meta(text: &str) -> Result<CheckpointMeta> {
    let v = fields(text, &["mode", "epochs", "seed", "config_hash"])?;
    Ok(CheckpointMeta {
        mode: v[0].clone(),
        epochs: num(&v[1])?,
        seed: num(&v[2])?,
        config_hash: v[3].clone(),
    })
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config_text(&ck.config));
    put_u32(&mut out, ck.vocab.len());
    for t in ck.vocab.tokens() {
        put_str(&mut out, t);
    }
    put_str(&mut out, &meta_text(&ck.meta));
    put_u32(&mut out, ck.params.len());
    for (name, value) in ck.params.names().iter().zip(&ck.params.values) {
        put_str(&mut out, name);
        put_u32(&mut out, value.shape().len());
        for &d in value.shape() {
            put_u32(&mut out, d);
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt("file is truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8 in header"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).map_err(|_| corrupt("not a checkpoint file"))? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let config = parse_config(&r.str()?)?;
    let n_tokens = r.u32()?;
    let tokens = (0..n_tokens).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(&tokens).map_err(|e| corrupt(e.to_string()))?;
    let meta = parse_meta(&r.str()?)?;
    let n_params = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r.str()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= r.buf.len() / 4)
            .ok_or_else(|| corrupt("file is truncated"))?;
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| corrupt(e.to_string()))?;
        params.add(&name, t).map_err(|e| corrupt(e.to_string()))?;
    }
    if !r.buf.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    if config.vocab_size != vocab.len() {
        return Err(corrupt(format!(
            "config expects {} tokens, vocabulary has {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Mvpc::from_params(config.clone(), params.clone()).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        config,
        vocab,
        params,
        meta,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &to_bytes(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fsutil::read(path)?).map_err(|e| match e {
        HarnessError::Checkpoint(m) => HarnessError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
