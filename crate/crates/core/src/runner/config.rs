//! Flat `section.key = value` experiment configuration.
//!
//! ```text
//! # 8-class blobs, two confusable pairs
//! data.source = synthetic
//! data.num_classes = 8
//! data.overlap_pairs = 0-1,2-3
//! model.hidden = 32
//! train.epochs = 50
//! strategies = hard,vanilla,ols,cpls,cpls:beta=0.3
//! cpls.beta = 0.5
//! seeds = 1,2,3
//! output.dir = runs
//! ```
//!
//! Blank lines and `#` comments are ignored. Strategy entries may override
//! their section defaults inline (`cpls:beta=0.3:warmup=2`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::math::RngSeed;
use crate::smoothing::{TargetStrategy, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_WARMUP_EPOCHS};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        dimension: usize,
        spread: f64,
        overlap_pairs: Vec<(usize, usize)>,
    },
    /// One feature CSV, split per seed.
    Csv { path: PathBuf },
    /// A directory holding `train.csv`, `val.csv` and `test.csv`.
    SplitCsv { dir: PathBuf },
}

/// A strategy as listed in the config; `label` is the entry text and names
/// the strategy in tables.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub label: String,
    pub strategy: TargetStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub split: SplitSpec,
    pub hidden: Vec<usize>,
    /// Strategy and seed fields are overridden per run.
    pub train: TrainConfig,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<RngSeed>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Eight classes of 100 samples in 16 dimensions with overlap pairs
    /// (0, 1) and (2, 3); one hidden layer of 32; all four strategies; ten seeds.
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                num_classes: 8,
                samples_per_class: 100,
                dimension: 16,
                spread: 1.0,
                overlap_pairs: vec![(0, 1), (2, 3)],
            },
            split: SplitSpec::default(),
            hidden: vec![32],
            train: TrainConfig::default(),
            strategies: ["hard", "vanilla", "ols", "cpls"]
                .iter()
                .map(|s| parse_strategy(s, &BTreeMap::new()).expect("built-in strategy"))
                .collect(),
            seeds: (1..=10).map(RngSeed).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text; relative data paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = ExperimentConfig::default();
        let get = |k: &str| entries.get(k).map(String::as_str);

        let mut synth = match cfg.source.clone() {
            DataSource::Synthetic {
                num_classes,
                samples_per_class,
                dimension,
                spread,
                overlap_pairs,
            } => (
                num_classes,
                samples_per_class,
                dimension,
                spread,
                overlap_pairs,
            ),
            _ => unreachable!("default source is synthetic"),
        };
        if let Some(v) = get("data.num_classes") {
            synth.0 = parse_num(v, "data.num_classes")?;
        }
        if let Some(v) = get("data.samples_per_class") {
            synth.1 = parse_num(v, "data.samples_per_class")?;
        }
        if let Some(v) = get("data.dimension") {
            synth.2 = parse_num(v, "data.dimension")?;
        }
        if let Some(v) = get("data.spread") {
            synth.3 = parse_num(v, "data.spread")?;
        }
        if let Some(v) = get("data.overlap_pairs") {
            synth.4 = parse_pairs(v)?;
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        cfg.source = match get("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                num_classes: synth.0,
                samples_per_class: synth.1,
                dimension: synth.2,
                spread: synth.3,
                overlap_pairs: synth.4,
            },
            "csv" => DataSource::Csv {
                path: resolve(
                    get("data.path")
                        .ok_or_else(|| Error::Config("data.source = csv needs data.path".into()))?,
                ),
            },
            "split_csv" => DataSource::SplitCsv {
                dir: resolve(get("data.dir").ok_or_else(|| {
                    Error::Config("data.source = split_csv needs data.dir".into())
                })?),
            },
            other => {
                return Err(Error::Config(format!("unknown data.source `{other}`")));
            }
        };

        let frac = |k: &str, d: f64| get(k).map_or(Ok(d), |v| parse_num(v, k));
        cfg.split = SplitSpec::new(
            frac("split.train", cfg.split.train_fraction)?,
            frac("split.val", cfg.split.val_fraction)?,
            frac("split.test", cfg.split.test_fraction)?,
        )?;

        if let Some(v) = get("model.hidden") {
            cfg.hidden = parse_list(v, "model.hidden")?;
        }

        let t = &mut cfg.train;
        if let Some(v) = get("train.epochs") {
            t.epochs = parse_num(v, "train.epochs")?;
        }
        if let Some(v) = get("train.batch_size") {
            t.batch_size = parse_num(v, "train.batch_size")?;
        }
        if let Some(v) = get("train.learning_rate") {
            t.learning_rate = parse_num(v, "train.learning_rate")?;
        }
        if let Some(v) = get("train.momentum") {
            t.momentum = parse_num(v, "train.momentum")?;
        }
        if let Some(v) = get("train.ece_bins") {
            t.ece_bins = parse_num(v, "train.ece_bins")?;
        }

        if let Some(v) = get("strategies") {
            cfg.strategies = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_strategy(s, &entries))
                .collect::<Result<_>>()?;
        } else {
            // Section defaults still apply to the built-in list.
            cfg.strategies = cfg
                .strategies
                .iter()
                .map(|s| parse_strategy(&s.label, &entries))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = get("seeds") {
            cfg.seeds = parse_list::<u64>(v, "seeds")?
                .into_iter()
                .map(RngSeed)
                .collect();
        }
        if let Some(v) = get("output.dir") {
            cfg.output_dir = PathBuf::from(v);
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for s in &self.strategies {
            s.strategy.validate()?;
        }
        self.split.validate()?;
        self.train.validate()
    }

    pub fn strategy(&self, label: &str) -> Result<StrategySpec> {
        if let Some(s) = self.strategies.iter().find(|s| s.label == label) {
            return Ok(s.clone());
        }
        parse_strategy(label, &BTreeMap::new())
    }
}

const KNOWN_KEYS: &[&str] = &[
    "data.source",
    "data.path",
    "data.dir",
    "data.num_classes",
    "data.samples_per_class",
    "data.dimension",
    "data.spread",
    "data.overlap_pairs",
    "split.train",
    "split.val",
    "split.test",
    "model.hidden",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.momentum",
    "train.ece_bins",
    "strategies",
    "vanilla.alpha",
    "cpls.beta",
    "cpls.warmup",
    "ols.warmup",
    "seeds",
    "output.dir",
];

fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            row: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let k = k.trim();
        if !KNOWN_KEYS.contains(&k) {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("unknown key `{k}`"),
            });
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, key))
        .collect()
}

fn parse_pairs(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("overlap pair `{p}` is not `a-b`")))?;
            Ok((
                parse_num(a, "data.overlap_pairs")?,
                parse_num(b, "data.overlap_pairs")?,
            ))
        })
        .collect()
}

/// `name[:key=value]*`, with unspecified keys taken from `<name>.<key>`
/// entries and then from the built-in defaults.
pub fn parse_strategy(token: &str, entries: &BTreeMap<String, String>) -> Result<StrategySpec> {
    let mut parts = token.split(':');
    let name = parts.next().unwrap_or("").trim();
    let mut inline = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("strategy option `{p}` is not `key=value`")))?;
        inline.insert(k.trim().to_string(), v.trim().to_string());
    }
    let lookup = |key: &str| -> Option<&str> {
        inline
            .get(key)
            .or_else(|| entries.get(&format!("{name}.{key}")))
            .map(String::as_str)
    };
    let allowed: &[&str] = match name {
        "hard" => &[],
        "vanilla" => &["alpha"],
        "ols" => &["warmup"],
        "cpls" => &["beta", "warmup"],
        other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
    };
    if let Some(bad) = inline.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "strategy `{name}` has no option `{bad}`"
        )));
    }
    let warmup = || lookup("warmup").map_or(Ok(DEFAULT_WARMUP_EPOCHS), |v| parse_num(v, "warmup"));
    let strategy = match name {
        "hard" => TargetStrategy::Hard,
        "vanilla" => TargetStrategy::VanillaLs {
            alpha: lookup("alpha").map_or(Ok(DEFAULT_ALPHA), |v| parse_num(v, "alpha"))?,
        },
        "ols" => TargetStrategy::Ols {
            warmup_epochs: warmup()?,
        },
        _ => TargetStrategy::Cpls {
            beta: lookup("beta").map_or(Ok(DEFAULT_BETA), |v| parse_num(v, "beta"))?,
            warmup_epochs: warmup()?,
        },
    };
    strategy.validate()?;
    Ok(StrategySpec {
        label: token.trim().to_string(),
        strategy,
    })
}
