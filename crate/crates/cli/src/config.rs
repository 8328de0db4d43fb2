//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sgdrop_core::attribution::Score;
use sgdrop_core::data::{parse_kv, SynthSpec};
use sgdrop_core::nn::{ArchPreset, LrSchedule, OptimizerKind};
use sgdrop_core::sgdrop::{RhoSchedule, SgdropConfig};
use sgdrop_core::train::Regularizer;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    /// A directory written by `sgdrop synth`.
    Dir,
    Mnist,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "dir" => Ok(DatasetKind::Dir),
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(CliError::Config(format!("dataset must be synthetic|dir|mnist|cifar10, got `{s}`"))),
        }
    }
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Dir => "dir",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    /// Bilinear resize of both splits to a square side; 0 keeps the source size.
    pub resize: usize,
    pub synth: SynthSpec,
    synth_seed_set: bool,
    pub arch: ArchPreset,
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub regularizer: Regularizer,
    pub score: Score,
    pub seed: u64,
    pub probe_size: usize,
    /// Export probe saliency images every this many epochs; 0 disables.
    pub saliency_every: usize,
    pub bench_steps: usize,
    pub bench_warmup: usize,
    pub out: PathBuf,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            data_path: None,
            resize: 0,
            synth: SynthSpec::default(),
            synth_seed_set: false,
            arch: ArchPreset::CnnTiny,
            precision: Precision::F32,
            epochs: 80,
            batch_size: 64,
            eval_batch_size: 256,
            optimizer: OptimizerKind::adam(1e-4),
            lr_schedule: LrSchedule::Constant,
            regularizer: Regularizer::None,
            score: Score::Logit,
            seed: 0,
            probe_size: 128,
            saliency_every: 0,
            bench_steps: 50,
            bench_warmup: 5,
            out: PathBuf::from("out"),
            deterministic: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn sgdrop_of(reg: &Regularizer) -> SgdropConfig {
    match reg {
        Regularizer::Sgdrop(c) => *c,
        _ => SgdropConfig::default(),
    }
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` pairs in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply_map(&parse_kv(&text, path)?)?;
        }
        for pair in overrides {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{pair}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        // Selector keys first so that their dependent keys see the right variant.
        let selectors = ["optimizer", "regularizer", "lr_schedule", "sgdrop.rho_schedule"];
        for key in selectors {
            if let Some(v) = map.get(key) {
                self.set(key, v)?;
            }
        }
        for (k, v) in map.iter().filter(|(k, _)| !selectors.contains(&k.as_str())) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(field) = key.strip_prefix("synth.") {
            self.synth.set(field, value)?;
            if field == "seed" {
                self.synth_seed_set = true;
            }
            return Ok(());
        }
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "resize" => self.resize = parse(key, value)?,
            "arch" => self.arch = value.parse()?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(CliError::Config(format!("precision must be f32|f64, got `{value}`"))),
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "optimizer" => {
                let lr = self.optimizer.base_lr();
                self.optimizer = match value {
                    "adam" => OptimizerKind::adam(lr),
                    "sgd" => OptimizerKind::sgd(lr, 0.9),
                    _ => return Err(CliError::Config(format!("optimizer must be adam|sgd, got `{value}`"))),
                }
            }
            "lr" | "momentum" | "beta1" | "beta2" | "eps" => {
                let x: f64 = parse(key, value)?;
                match (&mut self.optimizer, key) {
                    (OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. }, "lr") => *lr = x,
                    (OptimizerKind::Sgd { momentum, .. }, "momentum") => *momentum = x,
                    (OptimizerKind::Adam { beta1, .. }, "beta1") => *beta1 = x,
                    (OptimizerKind::Adam { beta2, .. }, "beta2") => *beta2 = x,
                    (OptimizerKind::Adam { eps, .. }, "eps") => *eps = x,
                    _ => return Err(CliError::Config(format!("`{key}` does not apply to the selected optimizer"))),
                }
            }
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "step" => LrSchedule::imagenet_step(),
                    _ => return Err(CliError::Config(format!("lr_schedule must be constant|step, got `{value}`"))),
                }
            }
            "lr_step_every" | "lr_step_divide" => match &mut self.lr_schedule {
                LrSchedule::Step { every, .. } if key == "lr_step_every" => *every = parse(key, value)?,
                LrSchedule::Step { divide_by, .. } => *divide_by = parse(key, value)?,
                LrSchedule::Constant => {
                    return Err(CliError::Config(format!("`{key}` needs lr_schedule=step")));
                }
            },
            "regularizer" => {
                self.regularizer = match value {
                    "none" => Regularizer::None,
                    "dropout" => Regularizer::Dropout { p: 0.5 },
                    "sgdrop" => Regularizer::Sgdrop(sgdrop_of(&self.regularizer)),
                    _ => return Err(CliError::Config(format!("regularizer must be none|dropout|sgdrop, got `{value}`"))),
                }
            }
            "dropout.p" => match &mut self.regularizer {
                Regularizer::Dropout { p } => *p = parse(key, value)?,
                _ => return Err(CliError::Config("`dropout.p` needs regularizer=dropout".into())),
            },
            "sgdrop.rho" | "sgdrop.rho_schedule" | "sgdrop.rho_start" | "sgdrop.rho_end" | "sgdrop.use_ema"
            | "sgdrop.ema_decay" => {
                let Regularizer::Sgdrop(c) = &mut self.regularizer else {
                    return Err(CliError::Config(format!("`{key}` needs regularizer=sgdrop")));
                };
                match key {
                    "sgdrop.rho" => c.rho = RhoSchedule::Constant(parse(key, value)?),
                    "sgdrop.rho_schedule" => {
                        c.rho = match value {
                            "constant" => RhoSchedule::Constant(0.01),
                            "curriculum" => RhoSchedule::curriculum(),
                            _ => {
                                return Err(CliError::Config(format!(
                                    "sgdrop.rho_schedule must be constant|curriculum, got `{value}`"
                                )))
                            }
                        }
                    }
                    "sgdrop.rho_start" | "sgdrop.rho_end" => match &mut c.rho {
                        RhoSchedule::Linear { init, .. } if key == "sgdrop.rho_start" => *init = parse(key, value)?,
                        RhoSchedule::Linear { last, .. } => *last = parse(key, value)?,
                        RhoSchedule::Constant(_) => {
                            return Err(CliError::Config(format!("`{key}` needs sgdrop.rho_schedule=curriculum")));
                        }
                    },
                    "sgdrop.use_ema" => c.use_ema = parse(key, value)?,
                    _ => c.ema_decay = parse(key, value)?,
                }
            }
            "attribution.score" => {
                self.score = value.parse()?;
                if let Regularizer::Sgdrop(c) = &mut self.regularizer {
                    c.score = self.score;
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "probe_size" => self.probe_size = parse(key, value)?,
            "saliency_every" => self.saliency_every = parse(key, value)?,
            "bench.steps" => self.bench_steps = parse(key, value)?,
            "bench.warmup" => self.bench_warmup = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        if let Regularizer::Sgdrop(c) = &mut self.regularizer {
            c.score = self.score;
        }
        Ok(())
    }

    /// The synthetic spec actually used: the run seed applies unless
    /// `synth.seed` was given.
    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = self.synth.clone();
        if !self.synth_seed_set {
            spec.seed = self.seed;
        }
        spec
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.optimizer.base_lr() <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.optimizer.base_lr()));
        }
        self.regularizer.validate()?;
        match self.dataset {
            DatasetKind::Synthetic => self.synth_spec().validate()?,
            _ => match &self.data_path {
                None => return bad(format!("dataset={} needs data_path", self.dataset.name())),
                Some(p) if !p.is_dir() => return bad(format!("data_path {} is not a directory", p.display())),
                Some(_) => {}
            },
        }
        if self.resize == 1 {
            return bad("resize must be 0 (off) or at least 2".into());
        }
        Ok(())
    }

    /// Echo of every setting, readable back through [`RunConfig::load`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: &dyn Display| kv.push((k.to_string(), v.to_string()));
        put("dataset", &self.dataset.name());
        if let Some(p) = &self.data_path {
            put("data_path", &p.display());
        }
        put("resize", &self.resize);
        put("arch", &self.arch);
        put(
            "precision",
            &match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
        );
        put("epochs", &self.epochs);
        put("batch_size", &self.batch_size);
        put("eval_batch_size", &self.eval_batch_size);
        match self.optimizer {
            OptimizerKind::Sgd { lr, momentum } => {
                put("optimizer", &"sgd");
                put("lr", &lr);
                put("momentum", &momentum);
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                put("optimizer", &"adam");
                put("lr", &lr);
                put("beta1", &beta1);
                put("beta2", &beta2);
                put("eps", &eps);
            }
        }
        match self.lr_schedule {
            LrSchedule::Constant => put("lr_schedule", &"constant"),
            LrSchedule::Step { divide_by, every } => {
                put("lr_schedule", &"step");
                put("lr_step_every", &every);
                put("lr_step_divide", &divide_by);
            }
        }
        put("regularizer", &self.regularizer.name());
        match self.regularizer {
            Regularizer::None => {}
            Regularizer::Dropout { p } => put("dropout.p", &p),
            Regularizer::Sgdrop(c) => {
                match c.rho {
                    RhoSchedule::Constant(r) => {
                        put("sgdrop.rho_schedule", &"constant");
                        put("sgdrop.rho", &r);
                    }
                    RhoSchedule::Linear { init, last } => {
                        put("sgdrop.rho_schedule", &"curriculum");
                        put("sgdrop.rho_start", &init);
                        put("sgdrop.rho_end", &last);
                    }
                }
                put("sgdrop.use_ema", &c.use_ema);
                put("sgdrop.ema_decay", &c.ema_decay);
            }
        }
        put(
            "attribution.score",
            &match self.score {
                Score::Logit => "logit",
                Score::Prob => "prob",
            },
        );
        put("seed", &self.seed);
        put("probe_size", &self.probe_size);
        put("saliency_every", &self.saliency_every);
        put("bench.steps", &self.bench_steps);
        put("bench.warmup", &self.bench_warmup);
        put("deterministic", &self.deterministic);
        if self.dataset == DatasetKind::Synthetic {
            for (k, v) in self.synth_spec().to_kv() {
                kv.push((format!("synth.{k}"), v));
            }
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[&str]) -> Result<RunConfig> {
        RunConfig::load(None, &pairs.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 80);
        assert_eq!(c.optimizer, OptimizerKind::adam(1e-4));
        assert_eq!(c.probe_size, 128);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sgdrop_keys() {
        let c = set(&["regularizer=sgdrop", "sgdrop.rho=0.05", "sgdrop.use_ema=false"]).unwrap();
        let Regularizer::Sgdrop(s) = c.regularizer else { panic!() };
        assert_eq!(s.rho, RhoSchedule::Constant(0.05));
        assert!(!s.use_ema);
        let c = set(&["regularizer=sgdrop", "sgdrop.rho_schedule=curriculum"]).unwrap();
        let Regularizer::Sgdrop(s) = c.regularizer else { panic!() };
        assert_eq!(s.rho, RhoSchedule::curriculum());
        assert!(set(&["sgdrop.rho=0.05"]).is_err());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(set(&["nonsense=1"]).is_err());
        assert!(set(&["epochs"]).is_err());
        assert!(set(&["epochs=x"]).is_err());
        assert!(set(&["synth.bogus=1"]).is_err());
        assert!(set(&["epochs=0"]).unwrap().validate().is_err());
        assert!(set(&["dataset=mnist"]).unwrap().validate().is_err());
    }

    #[test]
    fn echo_reloads_to_the_same_config() {
        let c = set(&[
            "regularizer=sgdrop",
            "sgdrop.rho_schedule=curriculum",
            "optimizer=sgd",
            "lr=0.01",
            "lr_schedule=step",
            "lr_step_every=5",
            "synth.n_train=100",
            "seed=7",
            "arch=vgg-lite:4-8",
        ])
        .unwrap();
        let text: String = c.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.kv");
        std::fs::write(&path, text).unwrap();
        let mut back = RunConfig::load(Some(&path), &[]).unwrap();
        back.out = c.out.clone();
        assert_eq!(back.to_kv(), c.to_kv());
        assert_eq!(back.synth_spec(), c.synth_spec());
    }
}
