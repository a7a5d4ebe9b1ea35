//! Flat `dotted.key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional and
//! defaults to the value in [`ExperimentConfig::default`]. Unknown keys,
//! repeated keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{Method, RoundConfig};
use crate::nn::OptimizerKind;
use crate::split::{ModelDims, PretrainConfig};
use crate::zo::ZoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionChoice {
    Iid,
    Dirichlet,
    Pathological,
}

impl PartitionChoice {
    fn name(self) -> &'static str {
        match self {
            PartitionChoice::Iid => "iid",
            PartitionChoice::Dirichlet => "dirichlet",
            PartitionChoice::Pathological => "pathological",
        }
    }
}

impl FromStr for PartitionChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iid" => Ok(PartitionChoice::Iid),
            "dirichlet" => Ok(PartitionChoice::Dirichlet),
            "pathological" => Ok(PartitionChoice::Pathological),
            _ => Err("expected iid, dirichlet or pathological".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Also write every transcript event, not just per-round totals.
    pub full_transcript: bool,

    pub samples: usize,
    pub classes: usize,
    pub separation: f64,
    /// Share of the generated data held back for pre-training.
    pub public_fraction: f64,

    pub partition: PartitionChoice,
    pub alpha: f64,
    pub classes_per_client: usize,
    pub test_fraction: f64,

    pub encoder_blocks: usize,

    pub rounds: usize,
    pub clients: usize,
    pub sample_ratio: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub fedround: usize,
    pub method: Method,
    pub client_lr: f64,
    pub client_optimizer: OptimizerChoice,
    pub momentum: f64,
    pub server_lr: f64,
    pub server_lr_decay: f64,
    pub server_lr_decay_every: usize,

    pub zo_epsilon: f64,
    pub zo_directions: usize,

    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    /// Rounds between probe rows; 0 disables probing.
    pub probe_every: usize,
    pub probe_batches: usize,
    pub probe_pairs: usize,
    pub probe_radius: f64,

    /// Also run the FedAvg baseline under the same budget.
    pub fedavg_baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let round = RoundConfig::default();
        let pre = PretrainConfig::default();
        let zo = ZoConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            full_transcript: false,
            samples: 4000,
            classes: 4,
            separation: 4.0,
            public_fraction: 0.2,
            partition: PartitionChoice::Dirichlet,
            alpha: 0.3,
            classes_per_client: 2,
            test_fraction: 0.2,
            encoder_blocks: 1,
            rounds: round.rounds,
            clients: round.clients,
            sample_ratio: round.sample_ratio,
            local_steps: round.local_steps,
            batch_size: round.batch_size,
            fedround: round.fedround,
            method: round.method,
            client_lr: round.client_lr,
            client_optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            server_lr: round.server_lr,
            server_lr_decay: round.server_lr_decay,
            server_lr_decay_every: round.server_lr_decay_every,
            zo_epsilon: zo.epsilon,
            zo_directions: zo.num_directions,
            pretrain: true,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            probe_every: 0,
            probe_batches: 4,
            probe_pairs: 4,
            probe_radius: 0.1,
            fedavg_baseline: false,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

macro_rules! keys {
    ($( $key:literal => $field:ident : $kind:ident ),* $(,)?) => {
        /// Every accepted key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl ExperimentConfig {
            fn set(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
                match key {
                    $($key => Some(keys!(@set self, $field, $kind, value)),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, keys!(@get self, $field, $kind))),*]
            }
        }
    };
    (@set $s:ident, $f:ident, plain, $v:ident) => { parse($v).map(|x| $s.$f = x) };
    (@set $s:ident, $f:ident, path, $v:ident) => {{ $s.$f = PathBuf::from($v); Ok(()) }};
    (@set $s:ident, $f:ident, partition, $v:ident) => { $v.parse().map(|x| $s.$f = x) };
    (@set $s:ident, $f:ident, method, $v:ident) => {
        Method::parse($v).map(|x| $s.$f = x).ok_or_else(|| "expected pit or ptzo".to_string())
    };
    (@set $s:ident, $f:ident, optimizer, $v:ident) => {
        match $v {
            "adam" => { $s.$f = OptimizerChoice::Adam; Ok(()) }
            "sgd-momentum" => { $s.$f = OptimizerChoice::SgdMomentum; Ok(()) }
            _ => Err("expected adam or sgd-momentum".to_string()),
        }
    };
    (@get $s:ident, $f:ident, plain) => { $s.$f.to_string() };
    (@get $s:ident, $f:ident, path) => { $s.$f.display().to_string() };
    (@get $s:ident, $f:ident, partition) => { $s.$f.name().to_string() };
    (@get $s:ident, $f:ident, method) => { $s.$f.name().to_string() };
    (@get $s:ident, $f:ident, optimizer) => {
        match $s.$f {
            OptimizerChoice::Adam => "adam".to_string(),
            OptimizerChoice::SgdMomentum => "sgd-momentum".to_string(),
        }
    };
}

keys! {
    "seed" => seed: plain,
    "output.dir" => output_dir: path,
    "output.full_transcript" => full_transcript: plain,
    "dataset.samples" => samples: plain,
    "dataset.classes" => classes: plain,
    "dataset.separation" => separation: plain,
    "dataset.public_fraction" => public_fraction: plain,
    "partition.kind" => partition: partition,
    "partition.alpha" => alpha: plain,
    "partition.classes_per_client" => classes_per_client: plain,
    "partition.test_fraction" => test_fraction: plain,
    "model.encoder_blocks" => encoder_blocks: plain,
    "federation.rounds" => rounds: plain,
    "federation.clients" => clients: plain,
    "federation.sample_ratio" => sample_ratio: plain,
    "federation.local_steps" => local_steps: plain,
    "federation.batch_size" => batch_size: plain,
    "federation.fedround" => fedround: plain,
    "federation.option" => method: method,
    "federation.client_lr" => client_lr: plain,
    "federation.client_optimizer" => client_optimizer: optimizer,
    "federation.momentum" => momentum: plain,
    "federation.server_lr" => server_lr: plain,
    "federation.server_lr_decay" => server_lr_decay: plain,
    "federation.server_lr_decay_every" => server_lr_decay_every: plain,
    "zo.epsilon" => zo_epsilon: plain,
    "zo.directions" => zo_directions: plain,
    "pretrain.enabled" => pretrain: plain,
    "pretrain.epochs" => pretrain_epochs: plain,
    "pretrain.lr" => pretrain_lr: plain,
    "pretrain.batch_size" => pretrain_batch_size: plain,
    "probe.every" => probe_every: plain,
    "probe.batches" => probe_batches: plain,
    "probe.pairs" => probe_pairs: plain,
    "probe.radius" => probe_radius: plain,
    "baseline.fedavg" => fedavg_baseline: plain,
}

impl ExperimentConfig {
    /// Parses and validates config text. `origin` names the source in
    /// error locations.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", n + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    location,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Parse {
                    location,
                    message: format!("`{key}` set twice"),
                });
            }
            match cfg.set(key, value) {
                None => {
                    return Err(Error::Parse {
                        location,
                        message: format!("unknown key `{key}`; valid keys: {}", KEYS.join(", ")),
                    })
                }
                Some(Err(why)) => {
                    return Err(Error::Parse {
                        location,
                        message: format!("invalid value `{value}` for `{key}`: {why}"),
                    })
                }
                Some(Ok(())) => {}
            }
            seen.push(KEYS.iter().find(|k| **k == key).expect("set accepted it"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its value, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Overrides a single key, as on the command line.
    pub fn set_value(&mut self, key: &str, value: &str) -> Result<()> {
        match self.set(key, value) {
            None => Err(Error::Config(format!(
                "unknown key `{key}`; valid keys: {}",
                KEYS.join(", ")
            ))),
            Some(Err(why)) => Err(Error::Config(format!("invalid value `{value}` for `{key}`: {why}"))),
            Some(Ok(())) => self.validate(),
        }
    }

    /// First 16 hex digits of SHA-256 over [`to_text`](Self::to_text),
    /// excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output.dir" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            encoder_blocks: self.encoder_blocks,
            ..ModelDims::desk_scale(self.classes)
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let kind = match self.partition {
            PartitionChoice::Iid => PartitionKind::Iid,
            PartitionChoice::Dirichlet => PartitionKind::Dirichlet { alpha: self.alpha },
            PartitionChoice::Pathological => PartitionKind::Pathological {
                classes_per_client: self.classes_per_client,
            },
        };
        PartitionSpec {
            kind,
            clients: self.clients,
            seed: self.seed,
            test_fraction: self.test_fraction,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            rounds: self.rounds,
            clients: self.clients,
            sample_ratio: self.sample_ratio,
            local_steps: self.local_steps,
            client_lr: self.client_lr,
            client_optimizer: match self.client_optimizer {
                OptimizerChoice::Adam => OptimizerKind::adam(),
                OptimizerChoice::SgdMomentum => OptimizerKind::sgd_momentum(self.momentum),
            },
            server_lr: self.server_lr,
            server_lr_decay: self.server_lr_decay,
            server_lr_decay_every: self.server_lr_decay_every,
            fedround: self.fedround,
            method: self.method,
            zo: ZoConfig {
                epsilon: self.zo_epsilon,
                num_directions: self.zo_directions,
            },
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.classes < 2 || self.samples < 10 * self.classes {
            return field(
                "dataset.samples",
                format!("need at least 10 per class, got {} for {} classes", self.samples, self.classes),
            );
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return field("dataset.separation", format!("must be finite and >= 0, got {}", self.separation));
        }
        let lo = if self.pretrain { f64::MIN_POSITIVE } else { 0.0 };
        if !(self.public_fraction >= lo && self.public_fraction < 1.0) {
            return field(
                "dataset.public_fraction",
                format!("must be in {} 1), got {}", if self.pretrain { "(0," } else { "[0," }, self.public_fraction),
            );
        }
        if self.pretrain && !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return field("pretrain.lr", format!("must be > 0, got {}", self.pretrain_lr));
        }
        if self.rounds == 0 {
            return field("federation.rounds", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return field("federation.momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if self.probe_every > 0 {
            if self.probe_batches == 0 {
                return field("probe.batches", "must be >= 1".into());
            }
            if !(self.probe_radius > 0.0 && self.probe_radius.is_finite()) {
                return field("probe.radius", format!("must be > 0, got {}", self.probe_radius));
            }
        }
        self.model_dims().validate()?;
        self.partition_spec()
            .validate(self.classes)
            .map_err(|e| e.in_context("partition"))?;
        self.round_config()
            .validate()
            .map_err(|e| e.in_context("federation"))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text, &path.display().to_string())
}
