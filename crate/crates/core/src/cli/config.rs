//! `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; relative paths resolve
//! against the directory holding the config file. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SpectralTask;
use crate::error::{Error, Result};
use crate::filteradapt::InitPolicy;
use crate::nn::gradcheck::GradcheckConfig;
use crate::nn::{Geometry, Method, TrainConfig};

/// Where the pretrained RGB first layer comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum BankSource {
    /// TNS1 weights (`C_out × 3 × k1 × k2`) and optional TNS1 bias.
    File { weights: PathBuf, bias: Option<PathBuf> },
    Synthetic { c_out: usize, kernel: usize, noise: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// TLS1 tile sets. The training set is normalized with its own
    /// statistics unless it already carries some.
    Files { train: PathBuf, test: PathBuf },
    Synthetic(SpectralTask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub rank: usize,
    pub init: InitPolicy,
    pub restarts: usize,
    /// Reduce hidden width; defaults to the parameter-matching rule.
    pub hidden: Option<usize>,
    pub train: TrainConfig,
    pub stride: usize,
    /// Defaults to `k1 / 2` ("same" padding for odd kernels).
    pub padding: Option<usize>,
    pub pool: (usize, usize),
    pub mid_channels: Option<usize>,
    pub bank: BankSource,
    /// Starts from a previously adapted layer (ADP1) instead of
    /// decomposing the bank; decomposed methods only.
    pub layer: Option<PathBuf>,
    pub data: DataSource,
    pub out: PathBuf,
    pub log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Cp,
            rank: 2,
            init: InitPolicy::Interp,
            restarts: 4,
            hidden: None,
            train: TrainConfig::default(),
            stride: 1,
            padding: None,
            pool: (2, 2),
            mid_channels: None,
            bank: BankSource::Synthetic {
                c_out: 8,
                kernel: 5,
                noise: 0.05,
                seed: 0,
            },
            layer: None,
            data: DataSource::Synthetic(SpectralTask::default()),
            out: PathBuf::from("model.mdl"),
            log: PathBuf::from("log.csv"),
        }
    }
}

impl RunConfig {
    pub fn geometry(&self, kernel: (usize, usize)) -> Geometry {
        Geometry::new(self.stride, self.padding.unwrap_or(kernel.0 / 2))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        let path = |v: String| base.join(v);

        if let Some(v) = kv.take("method") {
            cfg.method = v.parse()?;
        }
        kv.set("rank", &mut cfg.rank)?;
        if let Some(v) = kv.take("init") {
            cfg.init = v.parse()?;
        }
        kv.set("restarts", &mut cfg.restarts)?;
        cfg.hidden = kv.opt("hidden")?;
        kv.set("lr0", &mut cfg.train.lr0)?;
        kv.set("gamma", &mut cfg.train.gamma)?;
        kv.set("batch", &mut cfg.train.batch_size)?;
        kv.set("epochs", &mut cfg.train.epochs)?;
        kv.set("seed", &mut cfg.train.seed)?;
        kv.set("stride", &mut cfg.stride)?;
        cfg.padding = kv.opt("padding")?;
        if let Some(v) = kv.take("pool") {
            cfg.pool = parse_pair(&v)?;
        }
        cfg.mid_channels = kv.opt("mid_channels")?;
        cfg.layer = kv.take("layer").map(path);
        if let Some(v) = kv.take("out") {
            cfg.out = path(v);
        } else {
            cfg.out = path("model.mdl".into());
        }
        if let Some(v) = kv.take("log") {
            cfg.log = path(v);
        } else {
            cfg.log = path("log.csv".into());
        }

        if let Some(w) = kv.take("bank") {
            cfg.bank = BankSource::File {
                weights: path(w),
                bias: kv.take("bank_bias").map(path),
            };
        } else if let BankSource::Synthetic {
            c_out,
            kernel,
            noise,
            seed,
        } = &mut cfg.bank
        {
            kv.set("bank.c_out", c_out)?;
            kv.set("bank.kernel", kernel)?;
            kv.set("bank.noise", noise)?;
            kv.set("bank.seed", seed)?;
        }

        match (kv.take("train_tiles"), kv.take("test_tiles")) {
            (Some(train), Some(test)) => {
                cfg.data = DataSource::Files {
                    train: path(train),
                    test: path(test),
                }
            }
            (None, None) => {
                let mut t = SpectralTask::default();
                kv.set("task.channels", &mut t.channels)?;
                kv.set("task.classes", &mut t.classes)?;
                kv.set("task.train", &mut t.train)?;
                kv.set("task.test", &mut t.test)?;
                kv.set("task.size", &mut t.size)?;
                kv.set("task.noise", &mut t.noise)?;
                kv.set("task.seed", &mut t.seed)?;
                cfg.data = DataSource::Synthetic(t);
            }
            _ => return Err(Error::Usage("train_tiles and test_tiles must be given together".into())),
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.rank == 0 {
            return Err(Error::Usage("rank must be >= 1".into()));
        }
        if self.stride == 0 || self.pool.0 == 0 || self.pool.1 == 0 {
            return Err(Error::Usage("stride and pool extents must be >= 1".into()));
        }
        if self.hidden == Some(0) || self.mid_channels == Some(0) {
            return Err(Error::Usage("hidden and mid_channels must be >= 1".into()));
        }
        if self.layer.is_some() && self.method.decomp_kind().is_none() {
            return Err(Error::Usage(format!(
                "`layer` only applies to cp/tucker, not {}",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// Gradient-check settings from the same `key = value` format.
pub fn parse_gradcheck(text: &str) -> Result<GradcheckConfig> {
    let mut kv = parse_pairs(text)?;
    let mut c = GradcheckConfig::default();
    kv.set("channels", &mut c.channels)?;
    kv.set("c_out", &mut c.c_out)?;
    kv.set("kernel", &mut c.kernel)?;
    kv.set("rank", &mut c.rank)?;
    kv.set("size", &mut c.size)?;
    kv.set("batch", &mut c.batch)?;
    kv.set("classes", &mut c.classes)?;
    kv.set("stride", &mut c.geometry.stride)?;
    kv.set("padding", &mut c.geometry.padding)?;
    kv.set("eps", &mut c.eps)?;
    kv.set("tol", &mut c.tol)?;
    kv.set("seed", &mut c.seed)?;
    kv.finish()?;
    if c.rank == 0 || c.channels == 0 || c.c_out == 0 || c.kernel == 0 || c.batch == 0 || c.classes < 2 {
        return Err(Error::Usage("gradcheck extents must be >= 1 (classes >= 2)".into()));
    }
    Ok(c)
}

/// Parses `HxW` or a single `N` (square).
pub fn parse_pair(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("expected `N` or `HxW`, got `{v}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match v.split_once(['x', 'X']) {
        Some((a, b)) => Ok((num(a)?, num(b)?)),
        None => num(v).map(|n| (n, n)),
    }
}

struct Pairs(BTreeMap<String, (usize, String)>);

fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(Pairs(map))
}

impl Pairs {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key).map(|(_, v)| v)
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("config line {line}: bad value `{v}` for `{key}`"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.opt(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Usage(format!("config line {line}: unknown key `{k}`"))),
        }
    }
}
