use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use relgate::{ModelConfig, RoleMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a training run is configured by; the `--config` file has
/// this shape and may leave any part out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Roles {
    Learn,
    AllNode,
    AllEdge,
    Random,
}

impl From<Roles> for RoleMode {
    fn from(r: Roles) -> Self {
        match r {
            Roles::Learn => RoleMode::Learn,
            Roles::AllNode => RoleMode::AllNode,
            Roles::AllEdge => RoleMode::AllEdge,
            Roles::Random => RoleMode::Random,
        }
    }
}

/// Flags of `train`. Unset flags fall through to the config file, then
/// to the defaults.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Sampling budget; hop i keeps B / 2^i neighbours.
    #[arg(long)]
    pub neighbor_samples: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Negatives per positive pair in the contrastive term.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub roles: Option<Roles>,
    /// Checkpoint directory whose gates initialise this run.
    #[arg(long)]
    pub transfer_from: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl TrainFlags {
    pub fn resolve(&self, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let (m, t) = (&mut c.model, &mut c.train);
        set(&mut t.lr, self.lr);
        set(&mut m.channels, self.channels);
        set(&mut m.layers, self.layers);
        set(&mut m.dropout, self.dropout);
        set(&mut t.neighbor_samples, self.neighbor_samples);
        set(&mut t.fd.beta, self.beta);
        set(&mut t.fd.gamma, self.gamma);
        set(&mut m.alpha, self.alpha);
        set(&mut m.mu, self.mu);
        set(&mut t.fd.tau, self.tau);
        set(&mut t.fd.negatives, self.negatives);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.patience, self.patience);
        set(&mut t.roles, self.roles.map(RoleMode::from));
        set(&mut t.seed, seed);
        set(&mut m.seed, seed);
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
