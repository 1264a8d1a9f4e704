//! Experiment configuration.
//!
//! Flat `key=value` text, one pair per line, `#` comments. Every key has a
//! default, so a config file only states what differs; unknown keys are
//! errors. `parse(render(cfg)) == cfg` holds for every representable
//! config, which is what lets checkpoints embed their provenance as plain
//! metadata pairs.

use std::fmt;
use std::str::FromStr;

use apfed_core::data::split::SplitConfig;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SALT: u64 = 0x4150_4631;
pub const DEFAULT_SESSION: u64 = 0x4150_4645;
pub const SEED_ENV: &str = "APFED_SEED";

#[derive(Debug, Clone, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ApfedR,
    ApfedC,
    Tvfl,
    SingleVl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ApfedR => "apfed-r",
            Method::ApfedC => "apfed-c",
            Method::Tvfl => "tvfl",
            Method::SingleVl => "singlevl",
        }
    }

    pub fn is_apfed(self) -> bool {
        matches!(self, Method::ApfedR | Method::ApfedC)
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "apfed-r" => Ok(Method::ApfedR),
            "apfed-c" => Ok(Method::ApfedC),
            "tvfl" => Ok(Method::Tvfl),
            "singlevl" => Ok(Method::SingleVl),
            _ => Err(bad(format!(
                "unknown method {s:?}, expected apfed-r|apfed-c|tvfl|singlevl"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Fmnist,
    Synthetic,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Fmnist => "fmnist",
            Dataset::Synthetic => "synthetic",
        }
    }
}

impl FromStr for Dataset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "fmnist" => Ok(Dataset::Fmnist),
            "synthetic" => Ok(Dataset::Synthetic),
            _ => Err(bad(format!(
                "unknown dataset {s:?}, expected mnist|fmnist|synthetic"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl FromStr for TransportKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(bad(format!(
                "unknown transport {s:?}, expected inproc|tcp"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: Dataset,
    /// IDX file directory; empty means the default location for `dataset`.
    pub data_dir: String,
    /// Training samples to keep (0 keeps everything).
    pub train_limit: usize,
    pub test_limit: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_dim: usize,
    pub synth_classes: usize,
    /// Data generation seed, independent of the training seed so seed
    /// averaging varies the model, not the dataset.
    pub synth_seed: u64,
    pub split: SplitConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Gradient weight per passive; a single value broadcasts to all.
    pub lambda: Vec<f64>,
    pub tau: f64,
    /// One learning rate for active encoder, task head, and passives.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Encoder output width (the representation that crosses the wire).
    pub latent: usize,
    /// Hidden width of every MLP in the experiment.
    pub hidden: usize,
    pub transport: TransportKind,
    /// Bind address for tcp transport; the active waits here for one
    /// connection per passive. Empty means dial out via `connect`.
    pub listen: String,
    /// One addr per passive for tcp transport, in view order.
    pub connect: Vec<String>,
    pub session: u64,
    pub salt: u64,
    /// Metrics CSV path; empty disables writing.
    pub out: String,
    /// Checkpoint path; empty disables writing.
    pub model_out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::ApfedR,
            dataset: Dataset::Mnist,
            data_dir: String::new(),
            train_limit: 10_000,
            test_limit: 2_000,
            synth_train: 400,
            synth_test: 100,
            synth_dim: 16,
            synth_classes: 3,
            synth_seed: 7,
            split: SplitConfig::new(2, 1).expect("2-1 is valid"),
            epochs: 10,
            batch: 64,
            seed: DEFAULT_SEED,
            lambda: vec![1.0],
            tau: 0.5,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            latent: 64,
            hidden: 256,
            transport: TransportKind::InProc,
            listen: String::new(),
            connect: Vec::new(),
            session: DEFAULT_SESSION,
            salt: DEFAULT_SALT,
            out: String::new(),
            model_out: String::new(),
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    let (radix, digits) = match v.strip_prefix("0x") {
        Some(hex) => (16, hex),
        None => (10, v),
    };
    u64::from_str_radix(digits, radix).map_err(|_| bad(format!("{key}: bad integer {v:?}")))
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| bad(format!("{key}: bad value {v:?}")))
}

impl ExperimentConfig {
    /// All fields as ordered pairs; the inverse of [`Self::apply`] over
    /// defaults.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join_f64 = |xs: &[f64]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        [
            ("method", self.method.as_str().to_string()),
            ("dataset", self.dataset.as_str().to_string()),
            ("data_dir", self.data_dir.clone()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_dim", self.synth_dim.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("split", self.split.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda", join_f64(&self.lambda)),
            ("tau", self.tau.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("latent", self.latent.to_string()),
            ("hidden", self.hidden.to_string()),
            ("transport", self.transport.as_str().to_string()),
            ("listen", self.listen.clone()),
            ("connect", self.connect.join(",")),
            ("session", format!("{:#x}", self.session)),
            ("salt", format!("{:#x}", self.salt)),
            ("out", self.out.clone()),
            ("model_out", self.model_out.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "method" => self.method = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = value.to_string(),
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "test_limit" => self.test_limit = parse_num(key, value)?,
            "synth_train" => self.synth_train = parse_num(key, value)?,
            "synth_test" => self.synth_test = parse_num(key, value)?,
            "synth_dim" => self.synth_dim = parse_num(key, value)?,
            "synth_classes" => self.synth_classes = parse_num(key, value)?,
            "synth_seed" => self.synth_seed = parse_u64(key, value)?,
            "split" => {
                self.split = value
                    .parse()
                    .map_err(|e| bad(format!("split: {e}")))?
            }
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "lambda" => self.lambda = parse_f64_list(value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "latent" => self.latent = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "transport" => self.transport = value.parse()?,
            "listen" => self.listen = value.to_string(),
            "connect" => {
                self.connect = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "session" => self.session = parse_u64(key, value)?,
            "salt" => self.salt = parse_u64(key, value)?,
            "out" => self.out = value.to_string(),
            "model_out" => self.model_out = value.to_string(),
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.apply(k.trim(), v.trim())
                .map_err(|e| bad(format!("line {}: {}", lineno + 1, e.0)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(bad("epochs and batch must be positive"));
        }
        if self.latent == 0 || self.hidden == 0 {
            return Err(bad("latent and hidden must be positive"));
        }
        if self.tau <= 0.0 {
            return Err(bad(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda.is_empty() {
            return Err(bad("need at least one lambda value"));
        }
        let passives = self.split.views - 1;
        if self.lambda.len() != 1 && self.lambda.len() != passives {
            return Err(bad(format!(
                "{} lambda values for {} passives (give one or one per passive)",
                self.lambda.len(),
                passives
            )));
        }
        if self.transport == TransportKind::Tcp
            && self.method.is_apfed()
            && self.listen.is_empty()
            && !self.connect.is_empty()
            && self.connect.len() != passives
        {
            return Err(bad(format!(
                "{} connect addresses for {} passives",
                self.connect.len(),
                passives
            )));
        }
        Ok(())
    }

    /// Gradient weight for passive `p` (0-based), after broadcasting.
    pub fn lambda_for(&self, p: usize) -> f64 {
        if self.lambda.len() == 1 {
            self.lambda[0]
        } else {
            self.lambda[p]
        }
    }

    /// Seed for passive `p`'s auxiliary model (0-based), kept away from the
    /// active seed so roles never share an init stream.
    pub fn passive_seed(&self, p: usize) -> u64 {
        self.seed + 1000 * (p as u64 + 1)
    }
}

pub fn parse_f64_list(value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number {s:?} in list")))
        })
        .collect()
}

/// Seed precedence: explicit flag, then config file, then APFED_SEED, then
/// the default.
pub fn resolve_seed(cli: Option<u64>, file: Option<u64>) -> u64 {
    cli.or(file)
        .or_else(|| {
            std::env::var(SEED_ENV)
                .ok()
                .and_then(|v| parse_u64(SEED_ENV, &v).ok())
        })
        .unwrap_or(DEFAULT_SEED)
}
