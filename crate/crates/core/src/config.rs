//! Model, training, and ablation configuration, with a `key = value` text
//! form shared by config files, CLI overrides, and grid search.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Parallel,
    Serial,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" | "p" => Ok(Self::Parallel),
            "serial" | "s" => Ok(Self::Serial),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Parallel => "parallel",
            Self::Serial => "serial",
        })
    }
}

/// Distance used by the frequency-domain loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    L1,
    L2,
    Mix,
}

impl FromStr for DistanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "mix" => Ok(Self::Mix),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Mix => "mix",
        })
    }
}

/// Elementwise nonlinearity applied to each spectral part after the complex
/// linear map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Self::LeakyRelu(0.2)
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(slope) = s.strip_prefix("leaky_relu:") {
            let slope = slope
                .parse()
                .map_err(|_| Error::Config(format!("bad leaky_relu slope `{slope}`")))?;
            return Ok(Self::LeakyRelu(slope));
        }
        match s.as_str() {
            "identity" | "none" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "leaky_relu" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Relu => f.write_str("relu"),
            Self::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
        }
    }
}

/// Branch and objective switches mirroring the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationSpec {
    pub disable_sa: bool,
    pub disable_gsa: bool,
    pub disable_lsr: bool,
    pub disable_freq_loss: bool,
    pub disable_ce_loss: bool,
}

impl AblationSpec {
    pub fn full() -> Self {
        Self::default()
    }

    /// Self-attention with both spectral paths replaced by passthrough.
    pub fn sa_only() -> Self {
        Self {
            disable_gsa: true,
            disable_lsr: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_freq_loss && self.disable_ce_loss {
            return Err(Error::Config(
                "cannot disable both the frequency loss and cross-entropy".into(),
            ));
        }
        Ok(())
    }

    /// Loss weight actually used once objective switches are applied.
    pub fn effective_beta(&self, beta: f64) -> f64 {
        if self.disable_freq_loss {
            1.0
        } else if self.disable_ce_loss {
            0.0
        } else {
            beta
        }
    }

    /// Parses a comma-separated list drawn from `sa, gsa, lsr, lf, ce`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "sa" => spec.disable_sa = true,
                "gsa" => spec.disable_gsa = true,
                "lsr" => spec.disable_lsr = true,
                "lf" => spec.disable_freq_loss = true,
                "ce" => spec.disable_ce_loss = true,
                other => return Err(Error::Config(format!("unknown ablation switch `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_sa {
            parts.push("SA");
        }
        if self.disable_gsa && self.disable_lsr {
            parts.push("GSA+LSR");
        } else if self.disable_gsa {
            parts.push("GSA");
        } else if self.disable_lsr {
            parts.push("LSR");
        }
        if self.disable_freq_loss {
            parts.push("L_F");
        }
        if self.disable_ce_loss {
            parts.push("L_CE");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of the position-wise feed-forward networks.
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub fusion: FusionMode,
    pub distance: DistanceKind,
    pub activation: Activation,
    /// Stop gradients from the frequency loss into the target embeddings.
    pub detach_target: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 256,
            dropout_rate: 0.1,
            alpha: 0.7,
            gamma: 0.7,
            beta: 0.6,
            fusion: FusionMode::Parallel,
            distance: DistanceKind::Mix,
            activation: Activation::default(),
            detach_target: false,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            batch_size: 64,
            learning_rate: 5e-4,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            eval_ks: vec![10, 20],
        }
    }
}

/// Names accepted by [`ModelConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "max_len",
    "layers",
    "heads",
    "ff_dim",
    "dropout",
    "alpha",
    "gamma",
    "beta",
    "fusion",
    "distance",
    "activation",
    "detach_target",
    "layer_norm_eps",
    "init_std",
    "batch_size",
    "lr",
    "epochs",
    "patience",
    "seed",
    "eval_k",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("gamma", self.gamma)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.dim == 0 || self.max_len == 0 || self.ff_dim == 0 {
            return Err(Error::Config("dim, max_len and ff_dim must be positive".into()));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by head count {}",
                self.dim, self.num_heads
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_k must list positive cutoffs".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "dim" | "d" => self.dim = parse(key, value)?,
            "max_len" | "l" => self.max_len = parse(key, value)?,
            "layers" | "num_layers" => self.num_layers = parse(key, value)?,
            "heads" | "num_heads" => self.num_heads = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "dropout" | "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "distance" => self.distance = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "detach_target" => self.detach_target = parse(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "batch_size" | "b" => self.batch_size = parse(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" | "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_k" | "eval_ks" => {
                self.eval_ks = value
                    .split(',')
                    .map(|k| parse(key, k))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of a field in the same textual form [`Self::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key.trim() {
            "dim" | "d" => self.dim.to_string(),
            "max_len" | "l" => self.max_len.to_string(),
            "layers" | "num_layers" => self.num_layers.to_string(),
            "heads" | "num_heads" => self.num_heads.to_string(),
            "ff_dim" => self.ff_dim.to_string(),
            "dropout" | "dropout_rate" => self.dropout_rate.to_string(),
            "alpha" => self.alpha.to_string(),
            "gamma" => self.gamma.to_string(),
            "beta" => self.beta.to_string(),
            "fusion" => self.fusion.to_string(),
            "distance" => self.distance.to_string(),
            "activation" => self.activation.to_string(),
            "detach_target" => self.detach_target.to_string(),
            "layer_norm_eps" => self.layer_norm_eps.to_string(),
            "init_std" => self.init_std.to_string(),
            "batch_size" | "b" => self.batch_size.to_string(),
            "lr" | "learning_rate" => self.learning_rate.to_string(),
            "epochs" | "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "eval_k" | "eval_ks" => self
                .eval_ks
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key = value` lines covering every field.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }
}
