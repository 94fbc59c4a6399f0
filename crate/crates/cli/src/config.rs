use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capgraph::format::GrammarConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub rho: f64,
    pub rho_stable: f64,
    pub tau_crop: f64,
    pub tau_sim_ovd: f64,
    pub tau_iou_ovd: f64,
    pub tau_sim_sgg: f64,
    pub tau_iou_sgg: f64,
    pub tau_iou_region: f64,
    pub tau_mask: f64,
    pub tau_name: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rho: 0.8,
            rho_stable: 0.8,
            tau_crop: 0.25,
            tau_sim_ovd: 0.85,
            tau_iou_ovd: 0.5,
            tau_sim_sgg: 0.9,
            tau_iou_sgg: 0.5,
            tau_iou_region: 0.3,
            tau_mask: 0.8,
            tau_name: 0.8,
        }
    }
}

impl Thresholds {
    fn entries(&self) -> [(&'static str, f64); 10] {
        [
            ("rho", self.rho),
            ("rho_stable", self.rho_stable),
            ("tau_crop", self.tau_crop),
            ("tau_sim_ovd", self.tau_sim_ovd),
            ("tau_iou_ovd", self.tau_iou_ovd),
            ("tau_sim_sgg", self.tau_sim_sgg),
            ("tau_iou_sgg", self.tau_iou_sgg),
            ("tau_iou_region", self.tau_iou_region),
            ("tau_mask", self.tau_mask),
            ("tau_name", self.tau_name),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub fixture_path: Option<PathBuf>,
    pub retries: u32,
    pub timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            endpoint: None,
            fixture_path: None,
            retries: 2,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub thresholds: Thresholds,
    pub provider: ProviderConfig,
    pub grammar: GrammarConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in self.thresholds.entries() {
            if !(0.0..=1.0).contains(&v) {
                bail!("threshold {name} must lie in [0, 1], got {v}");
            }
        }
        match (self.provider.kind, &self.provider.endpoint) {
            (ProviderKind::Http, None) => bail!("provider kind http needs an endpoint"),
            (ProviderKind::Stub, Some(_)) => {
                bail!("an endpoint is only valid with provider kind http")
            }
            _ => {}
        }
        if let Err(e) = self.grammar.check() {
            bail!("grammar config: {e}");
        }
        Ok(())
    }
}
