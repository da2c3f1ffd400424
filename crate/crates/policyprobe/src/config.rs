//! Configuration file shared by the CLI and the service. Every field is
//! optional; command-line flags override the file and environment variables
//! override both for the service settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use policyprobe_core::prompt::HardPrompt;
use policyprobe_core::scorer::ScorerConfig;
use policyprobe_core::synth::desk_prompt;
use policyprobe_core::tuner::TuneConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_LEASE_SECS: f64 = 600.0;
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    /// Backbone checkpoint.
    pub model: Option<PathBuf>,
    /// Hard prompt JSON; the built-in desk prompt when absent.
    pub prompt: Option<PathBuf>,
    pub soft_prompt: Option<PathBuf>,
    /// Training-set store (JSONL).
    pub store: Option<PathBuf>,
    pub tune: TuneConfig,
    pub scorer: ScorerConfig,
    pub service: ServiceSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub listen: String,
    pub tau: f64,
    pub lease_secs: f64,
    /// Shared bearer token; no auth when unset.
    pub token: Option<String>,
    /// Allowed CORS origins; `*` allows any.
    pub cors_origins: Vec<String>,
    /// Directory of static files (a built review UI) served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            listen: DEFAULT_LISTEN.into(),
            tau: DEFAULT_TAU,
            lease_secs: DEFAULT_LEASE_SECS,
            token: None,
            cors_origins: Vec::new(),
            static_dir: None,
        }
    }
}

impl ServiceSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            bail!("tau must be in [0, 1], got {}", self.tau);
        }
        if !(self.lease_secs.is_finite() && self.lease_secs > 0.0) {
            bail!("lease_secs must be positive, got {}", self.lease_secs);
        }
        Ok(())
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Apply `POLICYPROBE_*` overrides from `get` (normally `std::env::var`).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = get("POLICYPROBE_LISTEN") {
            self.service.listen = v;
        }
        if let Some(v) = get("POLICYPROBE_TAU") {
            self.service.tau = v.parse().with_context(|| format!("POLICYPROBE_TAU={v:?}"))?;
        }
        if let Some(v) = get("POLICYPROBE_LEASE_SECS") {
            self.service.lease_secs = v.parse().with_context(|| format!("POLICYPROBE_LEASE_SECS={v:?}"))?;
        }
        if let Some(v) = get("POLICYPROBE_TOKEN") {
            self.service.token = Some(v);
        }
        for (key, slot) in [
            ("POLICYPROBE_BACKBONE", &mut self.model),
            ("POLICYPROBE_PROMPT", &mut self.prompt),
            ("POLICYPROBE_SOFT_PROMPT", &mut self.soft_prompt),
            ("POLICYPROBE_STORE", &mut self.store),
        ] {
            if let Some(v) = get(key) {
                *slot = Some(v.into());
            }
        }
        Ok(())
    }
}

/// Load a hard prompt from JSON, or the built-in desk prompt.
pub fn load_prompt(path: Option<&Path>) -> Result<HardPrompt> {
    let Some(path) = path else { return Ok(desk_prompt()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let prompt: HardPrompt = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    prompt.validate().with_context(|| format!("invalid prompt in {}", path.display()))?;
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn file_then_env() {
        let mut c: Config = serde_json::from_str(r#"{"seed": 3, "service": {"tau": 0.8}, "tune": {"steps": 7}}"#).unwrap();
        assert_eq!(c.service.tau, 0.8);
        assert_eq!(c.service.lease_secs, DEFAULT_LEASE_SECS);
        assert_eq!(c.tune.steps, 7);
        assert_eq!(c.tune.batch_size, TuneConfig::default().batch_size);
        let env: HashMap<&str, &str> = [("POLICYPROBE_TAU", "0.25"), ("POLICYPROBE_STORE", "/tmp/s.jsonl")].into();
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.service.tau, 0.25);
        assert_eq!(c.store.as_deref(), Some(Path::new("/tmp/s.jsonl")));
        assert!(c.apply_env(|k| (k == "POLICYPROBE_TAU").then(|| "x".into())).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn tau_range() {
        let mut s = ServiceSettings::default();
        s.validate().unwrap();
        s.tau = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn bundled_prompt_files() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let p = load_prompt(Some(&dir.join("desk_prompt.json"))).unwrap();
        assert_eq!(p, desk_prompt());
        let e: policyprobe_core::prompt::Exemplar = serde_json::from_str(&std::fs::read_to_string(dir.join("severe_exemplar.json")).unwrap()).unwrap();
        e.validate(&p.guideline).unwrap();
        p.add_exemplar(e, p.exemplars.len()).unwrap();
    }

    #[test]
    fn prompt_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        std::fs::write(&p, serde_json::to_string(&desk_prompt()).unwrap()).unwrap();
        assert_eq!(load_prompt(Some(&p)).unwrap(), desk_prompt());
        assert_eq!(load_prompt(None).unwrap(), desk_prompt());
    }
}
