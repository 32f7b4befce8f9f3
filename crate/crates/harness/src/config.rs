//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 1
//! data.n_train = 2000
//! model.d = 64
//! train.epochs = 30
//! eval.scenarios = complete,video_only
//! scenario.noisy.asr = asr_degrade:0.3:0.1
//! scenario.noisy.events = boundary_perturb:0.1
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mrvpc_core::data::WorldSpec;
use mrvpc_core::model::ModelConfig;
use mrvpc_core::noise::{Scenario, BUILTIN_SCENARIOS};
use mrvpc_core::timetok::DEFAULT_TIME_BINS;
use mrvpc_core::train::TrainPlan;
use sha2::{Digest, Sha256};

use crate::{fsutil, HarnessError, Result};

/// Network shape; the frame, feature and vocabulary sizes come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub d: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub max_caption_len: usize,
    pub max_aux_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1, 1);
        ModelShape {
            d: c.d,
            heads: c.heads,
            video_layers: c.video_layers,
            text_layers: c.text_layers,
            decoder_layers: c.decoder_layers,
            max_caption_len: c.max_caption_len,
            max_aux_len: c.max_aux_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the train/test split streams. Independent of the master seed
    /// so that runs under different master seeds share one corpus.
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 400,
            seed: 0,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub instances: usize,
    pub samples: usize,
    pub eps: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            instances: 2,
            samples: 4,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub world: WorldSpec,
    pub time_bins: usize,
    pub model: ModelShape,
    pub train: TrainPlan,
    pub scenarios: Vec<String>,
    /// Custom scenarios as (name, asr ops, event ops).
    pub custom: BTreeMap<String, (String, String)>,
    pub curve_percents: Vec<f64>,
    pub sweep_grid: Vec<(f64, f64)>,
    pub gradcheck: GradCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            world: WorldSpec::default(),
            time_bins: DEFAULT_TIME_BINS,
            model: ModelShape::default(),
            train: TrainPlan::default(),
            scenarios: BUILTIN_SCENARIOS.iter().map(|s| s.to_string()).collect(),
            custom: BTreeMap::new(),
            curve_percents: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            sweep_grid: [0.1, 0.3, 0.5, 0.7, 0.9].into_iter().map(|p| (p, p)).collect(),
            gradcheck: GradCheckSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Comma-separated percentages in `[0, 100]`.
pub fn parse_percents(value: &str) -> Result<Vec<f64>> {
    let out = list(value).map(|v| parse::<f64>("percent grid", v)).collect::<Result<Vec<_>>>()?;
    if out.is_empty() || out.iter().any(|p| !(0.0..=100.0).contains(p)) {
        return Err(HarnessError::Config(format!("bad percent grid {value:?}")));
    }
    Ok(out)
}

/// Comma-separated drop rates; `p` means `(p, p)`, `a:e` sets both.
pub fn parse_drop_grid(value: &str) -> Result<Vec<(f64, f64)>> {
    let out = list(value)
        .map(|item| match item.split_once(':') {
            Some((a, e)) => Ok((parse("drop grid", a)?, parse("drop grid", e)?)),
            None => {
                let p = parse("drop grid", item)?;
                Ok((p, p))
            }
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let unit = |p: f64| (0.0..=1.0).contains(&p);
    if out.is_empty() || out.iter().any(|&(a, e)| !unit(a) || !unit(e)) {
        return Err(HarnessError::Config(format!("bad drop grid {value:?}")));
    }
    Ok(out)
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_test" => self.data.n_test = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.train_path" => self.data.train_path = Some(PathBuf::from(v)),
            "data.test_path" => self.data.test_path = Some(PathBuf::from(v)),
            "world.n_actions" => self.world.n_actions = parse(key, v)?,
            "world.n_objects" => self.world.n_objects = parse(key, v)?,
            "world.n_confusable_pairs" => self.world.n_confusable_pairs = parse(key, v)?,
            "world.frames" => self.world.frames = parse(key, v)?,
            "world.feature_dim" => self.world.feature_dim = parse(key, v)?,
            "world.k_min" => self.world.k_min = parse(key, v)?,
            "world.k_max" => self.world.k_max = parse(key, v)?,
            "world.visual_noise" => self.world.visual_noise = parse(key, v)?,
            "world.asr_fidelity" => self.world.asr_fidelity = parse(key, v)?,
            "world.seed" => self.world.seed = parse(key, v)?,
            "vocab.time_bins" => self.time_bins = parse(key, v)?,
            "model.d" => self.model.d = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.video_layers" => self.model.video_layers = parse(key, v)?,
            "model.text_layers" => self.model.text_layers = parse(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse(key, v)?,
            "model.max_caption_len" => self.model.max_caption_len = parse(key, v)?,
            "model.max_aux_len" => self.model.max_aux_len = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.warmup_frac" => self.train.warmup_frac = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.p_asr" => self.train.p_asr = parse(key, v)?,
            "train.p_events" => self.train.p_events = parse(key, v)?,
            "train.coupled" => self.train.coupled = parse_bool(key, v)?,
            "train.tau" => self.train.tau = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "decode.beam" => self.train.decode.beam = parse(key, v)?,
            "decode.repetition_penalty" => self.train.decode.repetition_penalty = parse(key, v)?,
            "decode.length_alpha" => self.train.decode.length_alpha = parse(key, v)?,
            "decode.max_steps" => self.train.decode.max_steps = parse(key, v)?,
            "eval.scenarios" => self.scenarios = list(v).map(str::to_string).collect(),
            "curve.percents" => self.curve_percents = parse_percents(v)?,
            "sweep.grid" => self.sweep_grid = parse_drop_grid(v)?,
            "gradcheck.instances" => self.gradcheck.instances = parse(key, v)?,
            "gradcheck.samples" => self.gradcheck.samples = parse(key, v)?,
            "gradcheck.eps" => self.gradcheck.eps = parse(key, v)?,
            _ => {
                let custom = key
                    .strip_prefix("scenario.")
                    .and_then(|rest| rest.rsplit_once('.'))
                    .filter(|(name, _)| !name.is_empty());
                match custom {
                    Some((name, "asr")) => self.custom.entry(name.to_string()).or_default().0 = v.to_string(),
                    Some((name, "events")) => self.custom.entry(name.to_string()).or_default().1 = v.to_string(),
                    _ => return Err(HarnessError::Config(format!("unknown key {key}"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: mrvpc_core::Error| HarnessError::Config(e.to_string());
        self.world.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(HarnessError::Config("train and test sizes must be positive".into()));
        }
        if self.scenarios.is_empty() {
            return Err(HarnessError::Config("no evaluation scenarios".into()));
        }
        for name in self.scenarios.iter().chain(self.custom.keys()) {
            self.scenario(name).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.gradcheck.instances == 0 || self.gradcheck.samples == 0 {
            return Err(HarnessError::Config("gradcheck needs instances and samples".into()));
        }
        self.model_config(1).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Resolves a builtin or configured scenario, seeded by the master seed.
    pub fn scenario(&self, name: &str) -> Result<Scenario> {
        match self.custom.get(name) {
            Some((a, e)) => Ok(Scenario::from_ops(name, a, e, self.seed)?),
            None => Ok(Scenario::builtin(name, self.seed)?),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            d: m.d,
            heads: m.heads,
            video_layers: m.video_layers,
            text_layers: m.text_layers,
            decoder_layers: m.decoder_layers,
            max_caption_len: m.max_caption_len,
            max_aux_len: m.max_aux_len,
            ..ModelConfig::new(self.world.frames, self.world.feature_dim, vocab_size)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training plan with the master seed applied.
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Every resolved setting except `seed` and `out`, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let w = &self.world;
        let t = &self.train;
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out: Vec<(&str, String)> = vec![
            ("data.n_train", self.data.n_train.to_string()),
            ("data.n_test", self.data.n_test.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.train_path", path(&self.data.train_path)),
            ("data.test_path", path(&self.data.test_path)),
            ("world.n_actions", w.n_actions.to_string()),
            ("world.n_objects", w.n_objects.to_string()),
            ("world.n_confusable_pairs", w.n_confusable_pairs.to_string()),
            ("world.frames", w.frames.to_string()),
            ("world.feature_dim", w.feature_dim.to_string()),
            ("world.k_min", w.k_min.to_string()),
            ("world.k_max", w.k_max.to_string()),
            ("world.visual_noise", w.visual_noise.to_string()),
            ("world.asr_fidelity", w.asr_fidelity.to_string()),
            ("world.seed", w.seed.to_string()),
            ("vocab.time_bins", self.time_bins.to_string()),
            ("model.d", m.d.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.video_layers", m.video_layers.to_string()),
            ("model.text_layers", m.text_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.max_caption_len", m.max_caption_len.to_string()),
            ("model.max_aux_len", m.max_aux_len.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.warmup_frac", t.warmup_frac.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.p_asr", t.p_asr.to_string()),
            ("train.p_events", t.p_events.to_string()),
            ("train.coupled", t.coupled.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("decode.beam", t.decode.beam.to_string()),
            ("decode.repetition_penalty", t.decode.repetition_penalty.to_string()),
            ("decode.length_alpha", t.decode.length_alpha.to_string()),
            ("decode.max_steps", t.decode.max_steps.to_string()),
            ("eval.scenarios", self.scenarios.join(",")),
            ("curve.percents", join(&self.curve_percents)),
            ("sweep.grid", join(self.sweep_grid.iter().map(|(a, e)| format!("{a}:{e}")))),
            ("gradcheck.instances", self.gradcheck.instances.to_string()),
            ("gradcheck.samples", self.gradcheck.samples.to_string()),
            ("gradcheck.eps", self.gradcheck.eps.to_string()),
        ];
        let mut owned: Vec<(String, String)> = out.drain(..).map(|(k, v)| (k.to_string(), v)).collect();
        for (name, (a, e)) in &self.custom {
            owned.push((format!("scenario.{name}.asr"), a.clone()));
            owned.push((format!("scenario.{name}.events"), e.clone()));
        }
        owned
    }

    /// First 16 hex digits of the SHA-256 of the resolved settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(&h.finalize()[..8])
    }

    /// A complete config file that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed = {}\nout = {}\n", self.seed, self.out.display());
        for (k, v) in self.entries() {
            if !v.is_empty() {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}
