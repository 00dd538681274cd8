//! Run configuration: `section.key = value` lines over a named profile.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::archspace::{ModelDims, ParamBudget};
use crate::corpus::{Objective, MAX_VOCAB};
use crate::distill::{KdConfig, KdMode};
use crate::error::{ElmError, Result};
use crate::evosearch::EvoConfig;
use crate::numkernel::DType;
use crate::supernet::GrowInit;

/// Text form of a config value.
pub trait ConfigValue: Sized {
    fn parse_value(key: &str, v: &str) -> Result<Self>;
    fn render(&self) -> String;
}

fn bad_value(key: &str, v: &str) -> ElmError {
    ElmError::Config(format!("invalid value `{v}` for `{key}`"))
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(key: &str, v: &str) -> Result<Self> {
                v.parse().map_err(|_| bad_value(key, v))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, String);

impl ConfigValue for PathBuf {
    fn parse_value(_: &str, v: &str) -> Result<Self> {
        Ok(PathBuf::from(v))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(_: &str, v: &str) -> Result<Self> {
        Ok(if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) })
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
    }
}

impl ConfigValue for Objective {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        Objective::parse(v).map_err(|_| bad_value(key, v))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for KdMode {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        KdMode::parse(v).map_err(|_| bad_value(key, v))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for GrowInit {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        match v {
            "normal" => Ok(GrowInit::Normal),
            "zeros" => Ok(GrowInit::Zeros),
            _ => Err(bad_value(key, v)),
        }
    }
    fn render(&self) -> String {
        match self {
            GrowInit::Normal => "normal".into(),
            GrowInit::Zeros => "zeros".into(),
        }
    }
}

impl ConfigValue for DType {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        match v {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(bad_value(key, v)),
        }
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub inner: usize,
    pub ffn_init: usize,
    pub ffn_step: usize,
    pub ffn_max: usize,
    pub max_len: usize,
    pub vocab_limit: usize,
    pub tie_head: bool,
    pub weight_sharing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthSection {
    pub k: usize,
    pub tau: f64,
    pub init: GrowInit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSection {
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetSection {
    pub ceiling: u64,
    pub embedding_counted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub corpus: PathBuf,
    pub objective: Objective,
    pub mask_prob: f64,
    /// Sequences in the fixed analysis probe batch.
    pub probe_sequences: usize,
    pub val_batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub epochs_final: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip: f64,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdSection {
    pub mode: KdMode,
    pub lambda_cd: f64,
    pub lambda_ad: f64,
    pub lambda_fd: f64,
    pub eps: f64,
    pub teacher: Option<PathBuf>,
    pub teacher_hidden: usize,
    pub teacher_heads: usize,
    pub teacher_ffn: usize,
    pub teacher_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvoSection {
    pub population: usize,
    pub generations: usize,
    pub crossover_p: f64,
    pub mutation_p: f64,
    pub parents: usize,
    pub elites: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub profile: String,
    pub model: ModelSection,
    pub growth: GrowthSection,
    pub heads: HeadSection,
    pub budget: BudgetSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub kd: KdSection,
    pub evo: EvoSection,
    pub seed: u64,
    pub workdir: PathBuf,
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl SearchConfig {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse_value(key, value)?,)*
                    "model.profile" => {
                        return Err(ElmError::Config("`model.profile` must be the first setting".into()));
                    }
                    _ => return Err(ElmError::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![
                    ("model.profile", self.profile.clone()),
                    $(($key, self.$($field).+.render()),)*
                ]
            }
        }
    };
}

config_keys! {
    "model.layers" => model.layers,
    "model.hidden" => model.hidden,
    "model.heads" => model.heads,
    "model.inner" => model.inner,
    "model.ffn_init" => model.ffn_init,
    "model.ffn_step" => model.ffn_step,
    "model.ffn_max" => model.ffn_max,
    "model.max_len" => model.max_len,
    "model.vocab_limit" => model.vocab_limit,
    "model.tie_head" => model.tie_head,
    "model.weight_sharing" => model.weight_sharing,
    "growth.k" => growth.k,
    "growth.tau" => growth.tau,
    "growth.init" => growth.init,
    "heads.eta" => heads.eta,
    "budget.ceiling" => budget.ceiling,
    "budget.embedding_counted" => budget.embedding_counted,
    "data.corpus" => data.corpus,
    "data.objective" => data.objective,
    "data.mask_prob" => data.mask_prob,
    "data.probe_sequences" => data.probe_sequences,
    "data.val_batches" => data.val_batches,
    "train.epochs_pretrain" => train.epochs_pretrain,
    "train.epochs_finetune" => train.epochs_finetune,
    "train.epochs_final" => train.epochs_final,
    "train.steps_per_epoch" => train.steps_per_epoch,
    "train.batch_size" => train.batch_size,
    "train.seq_len" => train.seq_len,
    "train.lr" => train.lr,
    "train.warmup" => train.warmup,
    "train.weight_decay" => train.weight_decay,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.clip" => train.clip,
    "train.dtype" => train.dtype,
    "kd.mode" => kd.mode,
    "kd.lambda_cd" => kd.lambda_cd,
    "kd.lambda_ad" => kd.lambda_ad,
    "kd.lambda_fd" => kd.lambda_fd,
    "kd.eps" => kd.eps,
    "kd.teacher" => kd.teacher,
    "kd.teacher_hidden" => kd.teacher_hidden,
    "kd.teacher_heads" => kd.teacher_heads,
    "kd.teacher_ffn" => kd.teacher_ffn,
    "kd.teacher_epochs" => kd.teacher_epochs,
    "evo.population" => evo.population,
    "evo.generations" => evo.generations,
    "evo.crossover_p" => evo.crossover_p,
    "evo.mutation_p" => evo.mutation_p,
    "evo.parents" => evo.parents,
    "evo.elites" => evo.elites,
    "run.seed" => seed,
    "run.workdir" => workdir,
}

/// Keys that do not affect results and are left out of the config hash.
const UNHASHED: &[&str] = &["run.workdir"];

impl SearchConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        SearchConfig {
            profile: "desk".into(),
            model: ModelSection {
                layers: 4,
                hidden: 64,
                heads: 8,
                inner: 16,
                ffn_init: 16,
                ffn_step: 16,
                ffn_max: 128,
                max_len: 128,
                vocab_limit: MAX_VOCAB,
                tie_head: false,
                weight_sharing: true,
            },
            growth: GrowthSection {
                k: 6,
                tau: 0.99,
                init: GrowInit::Normal,
            },
            heads: HeadSection { eta: 0.9 },
            budget: BudgetSection {
                ceiling: 130_000,
                embedding_counted: true,
            },
            data: DataSection {
                corpus: PathBuf::from("data/corpus.txt"),
                objective: Objective::Mlm,
                mask_prob: 0.15,
                probe_sequences: 8,
                val_batches: 4,
            },
            train: TrainSection {
                epochs_pretrain: 6,
                epochs_finetune: 1,
                epochs_final: 6,
                steps_per_epoch: 30,
                batch_size: 8,
                seq_len: 64,
                lr: 3e-4,
                warmup: 0.1,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                clip: 1.0,
                dtype: DType::F32,
            },
            kd: KdSection {
                mode: KdMode::None,
                lambda_cd: 1.0,
                lambda_ad: 1.0,
                lambda_fd: 1.0,
                eps: 1e-8,
                teacher: None,
                teacher_hidden: 128,
                teacher_heads: 8,
                teacher_ffn: 256,
                teacher_epochs: 6,
            },
            evo: EvoSection {
                population: 16,
                generations: 6,
                crossover_p: 1.0,
                mutation_p: 0.1,
                parents: 8,
                elites: 2,
            },
            seed: 0,
            workdir: PathBuf::from("runs/desk"),
        }
    }

    /// Full-size supernet with large-scale search settings.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.profile = "full".into();
        c.model = ModelSection {
            layers: 12,
            hidden: 528,
            heads: 12,
            inner: 132,
            ffn_init: 132,
            ffn_step: 132,
            ffn_max: 1056,
            max_len: 512,
            vocab_limit: MAX_VOCAB,
            tie_head: false,
            weight_sharing: true,
        };
        c.growth.k = 21;
        c.budget.ceiling = 15_700_000;
        c.train.lr = 1e-4;
        c.train.seq_len = 128;
        c.train.batch_size = 32;
        c.evo = EvoSection {
            population: 50,
            generations: 40,
            crossover_p: 1.0,
            mutation_p: 0.1,
            parents: 10,
            elites: 2,
        };
        c.kd.teacher_hidden = 768;
        c.kd.teacher_heads = 12;
        c.kd.teacher_ffn = 3072;
        c.workdir = PathBuf::from("runs/full");
        c
    }

    /// Reduced profile: hidden 192 over 6 layers.
    pub fn micro() -> Self {
        let mut c = Self::full();
        c.profile = "micro".into();
        c.model.layers = 6;
        c.model.hidden = 192;
        c.model.inner = 48;
        c.model.ffn_init = 48;
        c.model.ffn_step = 48;
        c.model.ffn_max = 384;
        c.growth.k = 10;
        c.budget.ceiling = 5_000_000;
        c.workdir = PathBuf::from("runs/micro");
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "micro" => Ok(Self::micro()),
            other => Err(ElmError::Config(format!("unknown profile `{other}` (desk|full|micro)"))),
        }
    }

    /// Parses config text. An optional leading `model.profile` picks the base profile.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ElmError::Config(format!("line {}: expected `section.key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.first() {
            Some((k, v)) if k == "model.profile" => Self::profile(v)?,
            _ => Self::desk(),
        };
        for (k, v) in pairs.iter().skip_while(|(k, _)| k == "model.profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text listing every key; parsing it gives back an equal config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over every result-affecting key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ElmError::Config(m));
        self.dims(16)?.validate()?;
        if self.model.vocab_limit < 4 || self.model.vocab_limit > MAX_VOCAB {
            return bad(format!("model.vocab_limit must lie in 4..={MAX_VOCAB}"));
        }
        if !(self.growth.tau > 0.0 && self.growth.tau < 1.0) {
            return bad("growth.tau must lie in (0, 1)".into());
        }
        if !(self.heads.eta > 0.0 && self.heads.eta <= 1.0) {
            return bad("heads.eta must lie in (0, 1]".into());
        }
        if self.budget.ceiling == 0 {
            return bad("budget.ceiling must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.mask_prob) {
            return bad("data.mask_prob must lie in [0, 1)".into());
        }
        if self.data.probe_sequences == 0 || self.data.val_batches == 0 {
            return bad("data.probe_sequences and data.val_batches must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.seq_len < 2 || t.seq_len > self.model.max_len || t.steps_per_epoch == 0 {
            return bad("train.batch_size, train.seq_len (2..=max_len) and train.steps_per_epoch must be valid".into());
        }
        if !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.warmup) || t.weight_decay < 0.0 || !(t.clip > 0.0) {
            return bad("train.lr, train.warmup, train.weight_decay or train.clip out of range".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        let k = &self.kd;
        if k.lambda_cd < 0.0 || k.lambda_ad < 0.0 || k.lambda_fd < 0.0 || !(k.eps > 0.0) {
            return bad("kd weights must be >= 0 and kd.eps > 0".into());
        }
        if k.teacher_heads == 0 || k.teacher_hidden % k.teacher_heads != 0 || k.teacher_ffn == 0 {
            return bad("kd teacher dims are inconsistent".into());
        }
        self.evo_config().validate()
    }

    /// Model dimensions for a corpus vocabulary of `vocab` ids.
    pub fn dims(&self, vocab: usize) -> Result<ModelDims> {
        let m = &self.model;
        let d = ModelDims {
            vocab,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            inner: m.inner,
            ffn_init: m.ffn_init,
            ffn_step: m.ffn_step,
            ffn_max: m.ffn_max,
            max_len: m.max_len,
            tie_head: m.tie_head,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn budget(&self) -> ParamBudget {
        ParamBudget {
            ceiling: self.budget.ceiling,
            embedding_counted: self.budget.embedding_counted,
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            mode: self.kd.mode,
            lambda_cd: self.kd.lambda_cd,
            lambda_ad: self.kd.lambda_ad,
            lambda_fd: self.kd.lambda_fd,
            eps: self.kd.eps,
        }
    }

    pub fn evo_config(&self) -> EvoConfig {
        EvoConfig {
            population: self.evo.population,
            generations: self.evo.generations,
            crossover_p: self.evo.crossover_p,
            mutation_p: self.evo.mutation_p,
            parents: self.evo.parents,
            elites: self.evo.elites,
            budget: self.budget(),
            seed: self.seed,
        }
    }

    /// Dimensions of the fixed wide teacher for a vocabulary of `vocab` ids.
    pub fn teacher_dims(&self, vocab: usize) -> ModelDims {
        let k = &self.kd;
        ModelDims {
            vocab,
            hidden: k.teacher_hidden,
            layers: self.model.layers,
            heads: k.teacher_heads,
            inner: k.teacher_hidden,
            ffn_init: k.teacher_ffn,
            ffn_step: k.teacher_ffn,
            ffn_max: k.teacher_ffn,
            max_len: self.model.max_len,
            tie_head: self.model.tie_head,
        }
    }
}
