//! Run settings: defaults, overridden by a config file, overridden by
//! command-line flags.
//!
//! The config file is a flat TOML table; every key is optional and
//! unknown keys are rejected:
//!
//! ```toml
//! scheme = "W6A6"
//! first_last_bits = 8      # bits for the first block and the head
//! calib_size = 1024
//! iters = 1000
//! batch_size = 32
//! eval_every = 100
//! seed = 42
//! qprep = true
//! abc = true
//! measure = "mae"          # non-last blocks and the stage term
//! p = 2                    # clip-search norm for weight scales
//! init = "clip"            # or "minmax"
//! epochs = 12              # train-desk
//! lr = 0.002               # train-desk
//! norm_mean = [0.4914, 0.4822, 0.4465]
//! norm_std = [0.2470, 0.2435, 0.2616]
//! ```

use std::path::Path;

use repapq_core::calib::{CalibConfig, Measure};
use repapq_core::dataset::Normalization;
use repapq_core::quant::{ClipSearchConfig, Scheme, WeightInit, PRODUCTION_GRID};
use repapq_core::train::TrainConfig;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SCHEME: &str = "W8A8";
pub const DEFAULT_P: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Clip,
    Minmax,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Self::Clip),
            "minmax" => Ok(Self::Minmax),
            _ => Err(Error::Config(format!("unknown init method {s:?} (expected clip or minmax)"))),
        }
    }
}

/// Every field is optional so that layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub scheme: Option<String>,
    pub first_last_bits: Option<u32>,
    pub calib_size: Option<usize>,
    pub iters: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<usize>,
    pub seed: Option<u64>,
    pub qprep: Option<bool>,
    pub abc: Option<bool>,
    pub measure: Option<String>,
    pub p: Option<u32>,
    pub init: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f32>,
    pub norm_mean: Option<[f32; 3]>,
    pub norm_std: Option<[f32; 3]>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Settings { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fields of `self` win over those of `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            self, base, scheme, first_last_bits, calib_size, iters, batch_size, eval_every, seed, qprep, abc,
            measure, p, init, epochs, lr, norm_mean, norm_std
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn scheme(&self) -> Result<Scheme> {
        let s = Scheme::parse(self.scheme.as_deref().unwrap_or(DEFAULT_SCHEME))?;
        Ok(match self.first_last_bits {
            Some(b) => s.with_first_last(b),
            None => s,
        })
    }

    pub fn weight_init(&self) -> Result<WeightInit> {
        let method = match &self.init {
            Some(s) => s.parse()?,
            None => InitMethod::Clip,
        };
        Ok(match method {
            InitMethod::Minmax => WeightInit::MinMax,
            InitMethod::Clip => WeightInit::Clip(ClipSearchConfig::new(self.p.unwrap_or(DEFAULT_P), PRODUCTION_GRID)?),
        })
    }

    pub fn calib(&self) -> Result<CalibConfig> {
        let mut c = CalibConfig {
            seed: self.seed(),
            ..CalibConfig::default()
        };
        if let Some(v) = self.iters {
            c.iterations = v;
        }
        if let Some(v) = self.calib_size {
            c.calib_size = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.qprep {
            c.qprep = v;
        }
        if let Some(v) = self.abc {
            c.abc = v;
        }
        if let Some(m) = &self.measure {
            let m: Measure = m.parse()?;
            c.block_measure = m;
            c.stage_measure = m;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> TrainConfig {
        let mut t = TrainConfig {
            seed: self.seed(),
            ..TrainConfig::default()
        };
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        t
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let n = Normalization {
            mean: self.norm_mean.unwrap_or(Normalization::CIFAR10.mean),
            std: self.norm_std.unwrap_or(Normalization::CIFAR10.std),
        };
        n.validate()?;
        Ok(n)
    }
}
