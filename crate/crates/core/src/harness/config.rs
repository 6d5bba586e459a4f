//! Run configuration as a flat `key = value` file. Blank lines and lines
//! starting with `#` are ignored; unknown or repeated keys are errors.
//!
//! Defaults are the desk-scale model. The reference large model uses 24
//! layers, `d = 1024`, 16 heads, FFN 4096, learning rate 1e-4 and 512
//! textual tokens.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{EncoderConfig, RelPosConfig};
use crate::embedder::EmbedConfig;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::numerics::AdamConfig;
use crate::pretrain::CorruptionConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub patch_dim: usize,
    pub init_std: f64,
    pub k_1d: usize,
    pub k_2d: usize,
    pub bucket_width_2d: usize,
    pub mvlm_ratio: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub tia_ratio: f64,
    pub rrp_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: HeadKind,
    pub max_answer_len: usize,
    pub freeze_encoder: bool,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 2,
            d: 64,
            heads: 4,
            ffn: 256,
            dropout: 0.0,
            vocab_size: 200,
            max_text_len: 128,
            patch_dim: 16,
            init_std: 0.1,
            k_1d: 128,
            k_2d: 64,
            bucket_width_2d: 16,
            mvlm_ratio: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            tia_ratio: 0.15,
            rrp_ratio: 0.10,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            task: HeadKind::Bio,
            max_answer_len: 8,
            freeze_encoder: false,
            train_data: None,
            eval_data: None,
            vocab: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "max_text_len" => self.max_text_len = parse(key, v)?,
            "patch_dim" => self.patch_dim = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "k_1d" => self.k_1d = parse(key, v)?,
            "k_2d" => self.k_2d = parse(key, v)?,
            "bucket_width_2d" => self.bucket_width_2d = parse(key, v)?,
            "mvlm_ratio" => self.mvlm_ratio = parse(key, v)?,
            "mask_frac" => self.mask_frac = parse(key, v)?,
            "random_frac" => self.random_frac = parse(key, v)?,
            "tia_ratio" => self.tia_ratio = parse(key, v)?,
            "rrp_ratio" => self.rrp_ratio = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "task" => self.task = v.parse()?,
            "max_answer_len" => self.max_answer_len = parse(key, v)?,
            "freeze_encoder" => self.freeze_encoder = parse(key, v)?,
            "train_data" => self.train_data = Some(v.into()),
            "eval_data" => self.eval_data = Some(v.into()),
            "vocab" => self.vocab = Some(v.into()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Positive sizes, ratios in range, `d` divisible by `heads`.
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("patch_dim", self.patch_dim),
            ("k_1d", self.k_1d),
            ("k_2d", self.k_2d),
            ("bucket_width_2d", self.bucket_width_2d),
            ("batch_size", self.batch_size),
            ("max_answer_len", self.max_answer_len),
        ];
        if let Some((k, _)) = sizes.iter().find(|s| s.1 == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.init_std > 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative, init_std positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} outside [0, 1]", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.corruption().validate()?;
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed: EmbedConfig {
                vocab_size: self.vocab_size,
                d: self.d,
                max_text_len: self.max_text_len,
                patch_dim: self.patch_dim,
                init_std: self.init_std,
            },
            rel: RelPosConfig {
                k_1d: self.k_1d,
                k_2d: self.k_2d,
                bucket_width_2d: i32::try_from(self.bucket_width_2d).unwrap_or(i32::MAX),
            },
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            ln_eps: 1e-5,
        }
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            mvlm_ratio: self.mvlm_ratio,
            mask_frac: self.mask_frac,
            random_frac: self.random_frac,
            tia_ratio: self.tia_ratio,
            rrp_ratio: self.rrp_ratio,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Every key, in the order `parse` accepts them; parsing the output
    /// gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            HeadKind::Bio => "bio",
            HeadKind::Qa => "qa",
            HeadKind::Cls => "cls",
        };
        let _ = write!(
            s,
            "layers = {}\nd = {}\nheads = {}\nffn = {}\ndropout = {:?}\nvocab_size = {}\nmax_text_len = {}\n\
             patch_dim = {}\ninit_std = {:?}\nk_1d = {}\nk_2d = {}\nbucket_width_2d = {}\nmvlm_ratio = {:?}\n\
             mask_frac = {:?}\nrandom_frac = {:?}\ntia_ratio = {:?}\nrrp_ratio = {:?}\nlr = {:?}\n\
             weight_decay = {:?}\nwarmup_frac = {:?}\nbatch_size = {}\nepochs = {}\nseed = {}\ntask = {task}\n\
             max_answer_len = {}\nfreeze_encoder = {}\n",
            self.layers,
            self.d,
            self.heads,
            self.ffn,
            self.dropout,
            self.vocab_size,
            self.max_text_len,
            self.patch_dim,
            self.init_std,
            self.k_1d,
            self.k_2d,
            self.bucket_width_2d,
            self.mvlm_ratio,
            self.mask_frac,
            self.random_frac,
            self.tia_ratio,
            self.rrp_ratio,
            self.lr,
            self.weight_decay,
            self.warmup_frac,
            self.batch_size,
            self.epochs,
            self.seed,
            self.max_answer_len,
            self.freeze_encoder,
        );
        for (k, v) in [("train_data", &self.train_data), ("eval_data", &self.eval_data), ("vocab", &self.vocab)] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }
}
