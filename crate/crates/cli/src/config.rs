//! Run configuration. TOML or JSON, chosen by file extension; unknown keys
//! are rejected.

use std::path::Path;

use outerprod::verify::{ArchSource, SUITES};
use outerprod::{ActKind, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub net: NetConfig,
    /// Random instances per suite.
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub checks: Vec<String>,
    #[serde(default)]
    pub fd: FdOverrides,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
}

fn default_batch() -> usize {
    20
}

fn default_dense_cap() -> usize {
    outerprod::hessian::DEFAULT_DENSE_CAP
}

/// Fixed architecture when `dims` is given; otherwise every instance draws
/// its own within the `max_*` limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_activation")]
    pub activation: ActKind,
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
}

fn default_classes() -> usize {
    3
}
fn default_activation() -> ActKind {
    ActKind::Tanh
}
fn default_max_layers() -> usize {
    4
}
fn default_max_dim() -> usize {
    8
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n: None,
            dims: Some(vec![4, 6, 5]),
            classes: default_classes(),
            activation: default_activation(),
            max_layers: default_max_layers(),
            max_dim: default_max_dim(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kink_margin: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            net: NetConfig::default(),
            batch: default_batch(),
            checks: SUITES.iter().map(|s| s.to_string()).collect(),
            fd: FdOverrides::default(),
            dense_cap: default_dense_cap(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.checks.is_empty() {
            return bad("checks must name at least one suite".into());
        }
        for c in &self.checks {
            if !SUITES.contains(&c.as_str()) {
                return bad(format!("unknown suite {c:?}; known: {}", SUITES.join(", ")));
            }
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.dense_cap == 0 {
            return bad("dense_cap must be at least 1".into());
        }
        self.arch()?;
        let fd = outerprod::fd::FdConfig::default();
        let fd = outerprod::fd::FdConfig {
            step: self.fd.step.unwrap_or(fd.step),
            kink_margin: self.fd.kink_margin.unwrap_or(fd.kink_margin),
            ..fd
        };
        fd.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn arch(&self) -> Result<ArchSource, CliError> {
        let net = &self.net;
        match &net.dims {
            Some(dims) => {
                if let Some(n) = net.n {
                    if n + 1 != dims.len() {
                        return Err(CliError::Config(format!(
                            "net.n = {n} but dims lists {} hidden layers",
                            dims.len().saturating_sub(1)
                        )));
                    }
                }
                NetworkSpec::new(dims.clone(), net.classes, net.activation)
                    .map(ArchSource::Fixed)
                    .map_err(|e| CliError::Config(format!("net: {e}")))
            }
            None => {
                if net.max_layers == 0 || net.max_dim < 2 || net.classes < 2 {
                    return Err(CliError::Config(
                        "random net needs max_layers >= 1, max_dim >= 2, classes >= 2".into(),
                    ));
                }
                Ok(ArchSource::Random {
                    max_layers: net.max_layers,
                    max_dim: net.max_dim,
                    max_classes: net.classes,
                    activation: net.activation,
                })
            }
        }
    }
}
