//! Experiment configuration files.
//!
//! Line-oriented `key = value` pairs under `[section]` headers; `#` starts a
//! comment. Every key belongs to a fixed schema: unknown sections or keys
//! are errors, and omitted keys take the defaults listed in [`SCHEMA`].
//! [`ExperimentConfig::echo`] writes back every key, marking defaults.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::PipelineParams;
use crate::error::{Error, Result};
use crate::heads::HalfOrder;
use crate::trainer::{Protocol, Schedule, Stage};

/// `(section, key, default)` in echo order. An empty default means unset.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "name", "run"),
    ("run", "seed", "0"),
    ("run", "restarts", "1"),
    ("run", "workers", "1"),
    ("run", "output_root", ""),
    ("data", "kind", "mnist"),
    ("data", "dir", "data/mnist"),
    ("data", "train_file", ""),
    ("data", "test_file", ""),
    ("data", "class_names", ""),
    ("data", "classes", ""),
    ("data", "train_subset", "0"),
    ("data", "test_subset", "0"),
    ("data", "train_fraction", "0.9"),
    ("data", "val_fraction", "0.1"),
    ("augment", "train", "mnist"),
    ("augment", "resize", "112"),
    ("augment", "rotation_deg", "10"),
    ("augment", "perspective_distortion", "0.5"),
    ("augment", "perspective_p", "0.5"),
    ("augment", "hflip_p", "0.5"),
    ("augment", "grayscale_p", "0.1"),
    ("augment", "outer_crop", "470"),
    ("augment", "inner_crop", "448"),
    ("backbone", "kind", "minicnn"),
    ("backbone", "widths", "16,32"),
    ("head", "kind", "spinal"),
    ("head", "width", "64"),
    ("head", "sublayers", "4"),
    ("head", "hidden", "256"),
    ("head", "half_order", "first"),
    ("protocol", "mode", "scratch"),
    ("protocol", "source", ""),
    ("schedule", "stage1_lr", "0.01"),
    ("schedule", "stage1_epochs", "10"),
    ("schedule", "stage2_lr", "0.001"),
    ("schedule", "stage2_epochs", "10"),
    ("schedule", "momentum", "0.9"),
    ("schedule", "step_size", "7"),
    ("schedule", "gamma", "0.1"),
    ("schedule", "batch_size", "64"),
];

/// Default `train_fraction` for archive data, giving an 80/10/10 split.
pub const ARCHIVE_TRAIN_FRACTION: &str = "0.8";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// IDX files `train-images-idx3-ubyte` etc. in `dir`.
    Mnist,
    /// Feature Tensor Format files `train_file` and `test_file`.
    Features,
    /// Image archive from `ingest`, split three ways.
    Archive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Mnist,
    Covid,
    /// Resize only.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Spinal,
    Traditional,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Spinal => "spinal",
            HeadKind::Traditional => "traditional",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub dir: PathBuf,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub class_names: Option<Vec<String>>,
    pub classes: Option<Vec<usize>>,
    pub train_subset: usize,
    pub test_subset: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub width: usize,
    pub sublayers: usize,
    pub hidden: usize,
    pub half_order: HalfOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub restarts: usize,
    pub workers: usize,
    pub output_root: Option<PathBuf>,
    pub data: DataConfig,
    pub augment: AugmentKind,
    pub pipeline: PipelineParams,
    /// Stage widths, or `None` to feed inputs straight into the head.
    pub backbone: Option<Vec<usize>>,
    pub head: HeadSpec,
    pub protocol: Protocol,
    pub source: Option<PathBuf>,
    pub schedule: Schedule,
    values: Vec<(String, String, String, bool)>,
}

fn parse_value<T: FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {raw:?} is not a valid value")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(section, key, s))
        .collect()
}

fn non_empty(raw: &str) -> Option<&str> {
    (!raw.is_empty()).then_some(raw)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut given: HashMap<(String, String), String> = HashMap::new();
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let key = key.trim();
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key {key:?} outside any section", n + 1)));
            }
            if !SCHEMA.iter().any(|(s, k, _)| *s == section && *k == key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?} in [{section}]", n + 1)));
            }
            if given.insert((section.clone(), key.to_string()), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: [{section}] {key} set twice", n + 1)));
            }
        }
        let values: Vec<(String, String, String, bool)> = SCHEMA
            .iter()
            .map(|&(s, k, d)| match given.get(&(s.to_string(), k.to_string())) {
                Some(v) => (s.to_string(), k.to_string(), v.clone(), false),
                None => (s.to_string(), k.to_string(), d.to_string(), true),
            })
            .collect();
        Self::from_values(values)
    }

    fn from_values(mut values: Vec<(String, String, String, bool)>) -> Result<Self> {
        let archive = values.iter().any(|(s, k, v, _)| s == "data" && k == "kind" && v == "archive");
        if archive {
            if let Some(slot) = values.iter_mut().find(|(s, k, _, d)| s == "data" && k == "train_fraction" && *d) {
                slot.2 = ARCHIVE_TRAIN_FRACTION.to_string();
            }
        }
        let get = |s: &str, k: &str| -> &str {
            values
                .iter()
                .find(|(vs, vk, _, _)| vs == s && vk == k)
                .map(|(_, _, v, _)| v.as_str())
                .expect("schema key")
        };
        let num = |s: &str, k: &str| -> Result<usize> { parse_value(s, k, get(s, k)) };
        let real = |s: &str, k: &str| -> Result<f64> { parse_value(s, k, get(s, k)) };
        let path = |s: &str, k: &str| non_empty(get(s, k)).map(PathBuf::from);

        let data = DataConfig {
            kind: match get("data", "kind") {
                "mnist" => DataKind::Mnist,
                "features" => DataKind::Features,
                "archive" => DataKind::Archive,
                other => return Err(Error::Config(format!("[data] kind {other:?} is not mnist, features or archive"))),
            },
            dir: PathBuf::from(get("data", "dir")),
            train_file: path("data", "train_file"),
            test_file: path("data", "test_file"),
            class_names: non_empty(get("data", "class_names"))
                .map(|v| v.split(',').map(|s| s.trim().to_string()).collect()),
            classes: non_empty(get("data", "classes"))
                .map(|v| parse_list("data", "classes", v))
                .transpose()?,
            train_subset: num("data", "train_subset")?,
            test_subset: num("data", "test_subset")?,
            train_fraction: real("data", "train_fraction")?,
            val_fraction: real("data", "val_fraction")?,
        };
        let augment = match get("augment", "train") {
            "mnist" => AugmentKind::Mnist,
            "covid" => AugmentKind::Covid,
            "none" => AugmentKind::None,
            other => return Err(Error::Config(format!("[augment] train {other:?} is not mnist, covid or none"))),
        };
        let pipeline = PipelineParams {
            resize: num("augment", "resize")?,
            rotation_deg: real("augment", "rotation_deg")?,
            perspective_distortion: real("augment", "perspective_distortion")?,
            perspective_p: real("augment", "perspective_p")?,
            hflip_p: real("augment", "hflip_p")?,
            grayscale_p: real("augment", "grayscale_p")?,
            outer_crop: num("augment", "outer_crop")?,
            inner_crop: num("augment", "inner_crop")?,
        };
        let backbone = match get("backbone", "kind") {
            "minicnn" => Some(parse_list("backbone", "widths", get("backbone", "widths"))?),
            "none" => None,
            other => return Err(Error::Config(format!("[backbone] kind {other:?} is not minicnn or none"))),
        };
        let head = HeadSpec {
            kind: match get("head", "kind") {
                "spinal" => HeadKind::Spinal,
                "traditional" => HeadKind::Traditional,
                other => return Err(Error::Config(format!("[head] kind {other:?} is not spinal or traditional"))),
            },
            width: num("head", "width")?,
            sublayers: num("head", "sublayers")?,
            hidden: num("head", "hidden")?,
            half_order: match get("head", "half_order") {
                "first" => HalfOrder::FirstHalfFirst,
                "second" => HalfOrder::SecondHalfFirst,
                other => return Err(Error::Config(format!("[head] half_order {other:?} is not first or second"))),
            },
        };
        let protocol = match get("protocol", "mode") {
            "scratch" => Protocol::Scratch,
            "tl" => Protocol::TransferLearning,
            "ti" => Protocol::TransferredInit,
            other => return Err(Error::Config(format!("[protocol] mode {other:?} is not scratch, tl or ti"))),
        };
        let schedule = Schedule {
            stages: vec![
                Stage {
                    lr: real("schedule", "stage1_lr")?,
                    epochs: num("schedule", "stage1_epochs")?,
                },
                Stage {
                    lr: real("schedule", "stage2_lr")?,
                    epochs: num("schedule", "stage2_epochs")?,
                },
            ],
            momentum: real("schedule", "momentum")?,
            step_size: num("schedule", "step_size")?,
            gamma: real("schedule", "gamma")?,
            batch_size: num("schedule", "batch_size")?,
        };
        let cfg = ExperimentConfig {
            name: get("run", "name").to_string(),
            seed: parse_value("run", "seed", get("run", "seed"))?,
            restarts: num("run", "restarts")?,
            workers: num("run", "workers")?,
            output_root: path("run", "output_root"),
            source: path("protocol", "source"),
            data,
            augment,
            pipeline,
            backbone,
            head,
            protocol,
            schedule,
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.restarts == 0 || self.workers == 0 {
            return Err(Error::Config("restarts and workers must be at least 1".into()));
        }
        if self.protocol != Protocol::Scratch && self.source.is_none() {
            return Err(Error::Config(format!(
                "protocol {} requires [protocol] source",
                self.protocol.name()
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} is not a plain file name", self.name)));
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", d.train_fraction)));
        }
        if d.kind == DataKind::Archive && !(d.val_fraction > 0.0 && d.train_fraction + d.val_fraction < 1.0) {
            return Err(Error::Config("archive data needs val_fraction > 0 and train + val < 1".into()));
        }
        if d.kind != DataKind::Mnist && d.train_file.is_none() {
            return Err(Error::Config("[data] train_file is required for features and archive data".into()));
        }
        if d.kind == DataKind::Features && self.backbone.is_some() {
            return Err(Error::Config("feature files bypass the backbone; set [backbone] kind = none".into()));
        }
        if self.pipeline.resize == 0 {
            return Err(Error::Config("[augment] resize must be positive".into()));
        }
        Ok(())
    }

    /// The raw value of a schema key after defaults.
    pub fn value(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(s, k, _, _)| s == section && k == key)
            .map(|(_, _, v, _)| v.as_str())
    }

    /// Keys that took their default value.
    pub fn defaulted(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .filter(|v| v.3)
            .map(|(s, k, _, _)| (s.as_str(), k.as_str()))
    }

    /// A copy with one schema key replaced, re-validated.
    pub fn with_value(&self, section: &str, key: &str, value: &str) -> Result<Self> {
        let mut values = self.values.clone();
        let slot = values
            .iter_mut()
            .find(|(s, k, _, _)| s == section && k == key)
            .ok_or_else(|| Error::Config(format!("unknown key [{section}] {key}")))?;
        slot.2 = value.to_string();
        slot.3 = false;
        Self::from_values(values)
    }

    /// Every key with its resolved value; defaults are marked.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, v, default) in &self.values {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                current = s;
            }
            if *default {
                let _ = writeln!(out, "{k} = {v}  # default");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// Section contents, for comparing configs.
    pub fn section(&self, section: &str) -> Vec<(&str, &str)> {
        self.values
            .iter()
            .filter(|(s, _, _, _)| s == section)
            .map(|(_, k, v, _)| (k.as_str(), v.as_str()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_defaults_to_80_10_10() {
        let cfg = ExperimentConfig::parse("[data]\nkind = archive\ntrain_file = x.spnc\n").unwrap();
        assert_eq!((cfg.data.train_fraction, cfg.data.val_fraction), (0.8, 0.1));
        assert!(cfg.echo().contains("train_fraction = 0.8  # default"));
        let explicit = ExperimentConfig::parse("[data]\nkind = archive\ntrain_file = x\ntrain_fraction = 0.7\n").unwrap();
        assert_eq!(explicit.data.train_fraction, 0.7);
    }

    #[test]
    fn empty_config_takes_recipe_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.schedule, Schedule::default());
        assert_eq!(cfg.protocol, Protocol::Scratch);
        assert_eq!(cfg.pipeline.resize, 112);
        assert_eq!(cfg.backbone, Some(vec![16, 32]));
        assert_eq!(cfg.defaulted().count(), SCHEMA.len());
        let echo = cfg.echo();
        assert!(echo.contains("stage1_lr = 0.01  # default"));
        let again = ExperimentConfig::parse(&echo).unwrap();
        assert_eq!(again.echo(), echo.replace("  # default", ""));
        assert_eq!(again.defaulted().count(), 0);
    }

    #[test]
    fn values_override_defaults() {
        let cfg = ExperimentConfig::parse(
            "# comment\n[run]\nseed = 42 # inline\nrestarts=3\n\n[head]\nkind = traditional\n[schedule]\nbatch_size = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.restarts, 3);
        assert_eq!(cfg.head.kind, HeadKind::Traditional);
        assert_eq!(cfg.schedule.batch_size, 16);
        assert!(cfg.echo().contains("seed = 42\n"));
        let back = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(back.seed, 42);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "[run]\nsed = 1",
            "[nope]\n",
            "seed = 1",
            "[run]\nseed",
            "[run]\nseed = x",
            "[run]\nseed = 1\nseed = 2",
            "[protocol]\nmode = ti",
            "[schedule]\ngamma = 0",
            "[schedule]\nstage2_epochs = 0",
            "[head]\nkind = wide",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn with_value_revalidates() {
        let cfg = ExperimentConfig::parse("").unwrap();
        let c2 = cfg.with_value("head", "kind", "traditional").unwrap();
        assert_eq!(c2.head.kind, HeadKind::Traditional);
        assert!(cfg.with_value("protocol", "mode", "tl").is_err());
        assert!(cfg.with_value("run", "bogus", "1").is_err());
    }
}
