//! TOML experiment files: `[network]`, `[data]` and `[train]` tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::networks::NetworkSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub network: NetworkSpec,
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Reads only the `[network]` table; other tables are ignored.
    pub fn load_network(path: &Path) -> Result<NetworkSpec> {
        Self::parse_network(&std::fs::read_to_string(path)?)
    }

    pub fn parse_network(text: &str) -> Result<NetworkSpec> {
        #[derive(Deserialize)]
        struct NetworkOnly {
            network: NetworkSpec,
        }
        let n: NetworkOnly = toml::from_str(text)?;
        n.network.validate()?;
        Ok(n.network)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        let (n, d) = (&self.network, &self.data);
        if n.task != d.task || n.n_modalities != d.n_modalities || n.classes != d.classes {
            return Err(Error::Parameter(
                "network and data disagree on task, modality count or classes".into(),
            ));
        }
        Ok(())
    }
}
