//! The JSON run configuration accepted by `train` and `compare`.

use std::path::{Path, PathBuf};

use acacr::network::{BlockVariant, NetworkConfig, SkipMode};
use acacr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{usage, CliResult};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Defaults to the dataset's band count.
    pub c_in: Option<usize>,
    pub channels: Option<usize>,
    pub alpha: Option<f64>,
    pub variant: Option<BlockVariant>,
    pub skip_mode: Option<SkipMode>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSection {
    pub patch_size: Option<usize>,
}

/// Every section is optional; omitted values take the library defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub attention: AttentionSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset directory, relative to the config file.
    pub data: Option<PathBuf>,
    /// Output directory, relative to the config file.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.data, &mut config.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }

    /// Resolves the network configuration for a dataset with `c_in` bands.
    pub fn network_config(&self, c_in: usize, variant: Option<BlockVariant>) -> CliResult<NetworkConfig> {
        let n = &self.network;
        if let Some(c) = n.c_in {
            if c != c_in {
                return Err(crate::exit::incompatible(format!(
                    "config expects {c} bands, dataset has {c_in}"
                )));
            }
        }
        let mut config = NetworkConfig::new(c_in, 32, variant.or(n.variant).unwrap_or(BlockVariant::Ac));
        if let Some(c) = n.channels {
            config.channels = c;
        }
        if let Some(a) = n.alpha {
            config.alpha = a;
        }
        if let Some(s) = n.skip_mode {
            config.skip_mode = s;
        }
        if let Some(s) = self.attention.patch_size {
            config.patch_size = s;
        }
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        let n = c.network_config(3, None).unwrap();
        assert_eq!(n, NetworkConfig::new(3, 32, BlockVariant::Ac));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"netwrok": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"attention": {"variant": "ac"}}"#).is_err());
    }

    #[test]
    fn variant_flag_overrides_config() {
        let c: RunConfig = serde_json::from_str(r#"{"network": {"variant": "ca", "channels": 8}}"#).unwrap();
        assert_eq!(c.network_config(3, None).unwrap().variant, BlockVariant::Ca);
        assert_eq!(c.network_config(3, Some(BlockVariant::Base)).unwrap().variant, BlockVariant::Base);
    }

    #[test]
    fn band_mismatch_is_incompatible() {
        let c: RunConfig = serde_json::from_str(r#"{"network": {"c_in": 4}}"#).unwrap();
        let err = c.network_config(3, None).unwrap_err();
        assert_eq!(err.code, crate::exit::ExitCode::Incompatible);
    }
}
