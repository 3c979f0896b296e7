//! Run configuration. One flat JSON object; precedence is flag > config
//! file > built-in default. Every artifact a run writes embeds the hash of
//! the effective config so outputs can be traced to exact settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How per-transition quality is scored: the return/reward mix, or an
/// n-step on-policy return in place of the full-episode return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QualityMode {
    LambdaMix,
    NstepSarsa(u32),
}

impl fmt::Display for QualityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QualityMode::LambdaMix => write!(f, "lambda-mix"),
            QualityMode::NstepSarsa(n) => write!(f, "nstep-sarsa({n})"),
        }
    }
}

impl FromStr for QualityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "lambda-mix" {
            return Ok(QualityMode::LambdaMix);
        }
        if let Some(inner) = s.strip_prefix("nstep-sarsa(").and_then(|r| r.strip_suffix(')')) {
            let n: u32 = inner
                .parse()
                .map_err(|_| Error::Config(format!("bad n-step count in quality mode {s:?}")))?;
            if n == 0 {
                return Err(Error::Config("n-step count must be >= 1".into()));
            }
            return Ok(QualityMode::NstepSarsa(n));
        }
        Err(Error::Config(format!("unknown quality mode {s:?}")))
    }
}

impl Serialize for QualityMode {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for QualityMode {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub lambda_quality: f64,
    pub alpha_cql_anchor: f64,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub lr_weight: f64,
    pub polyak_rate: f64,
    pub bc_steps: u64,
    pub train_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub n_ood_samples: usize,
    pub bc_sigma: f64,
    pub seed: u64,
    pub quality_mode: QualityMode,
    /// Hidden widths shared by actor, critics, weight and behavior nets.
    pub hidden: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gamma: 0.99,
            lambda_quality: 0.5,
            alpha_cql_anchor: 10.0,
            batch_size: 256,
            lr_critic: 3e-4,
            lr_actor: 1e-5,
            lr_weight: 3e-4,
            polyak_rate: 5e-3,
            bc_steps: 100_000,
            train_steps: 1_100_000,
            eval_every: 1000,
            eval_episodes: 10,
            n_ood_samples: 10,
            bc_sigma: 0.3,
            seed: 0,
            quality_mode: QualityMode::LambdaMix,
            hidden: vec![256, 256, 256],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.gamma >= 0.0 && self.gamma < 1.0, "gamma must be in [0, 1)")?;
        check(
            (0.0..=1.0).contains(&self.lambda_quality),
            "lambda_quality must be in [0, 1]",
        )?;
        check(self.alpha_cql_anchor > 0.0, "alpha_cql_anchor must be > 0")?;
        check(self.batch_size >= 2, "batch_size must be >= 2")?;
        // Zero rates are legal: they freeze a component (used to pin the
        // weight net for baseline-equivalence runs and in boundary tests).
        check(self.lr_critic >= 0.0, "lr_critic must be >= 0")?;
        check(self.lr_actor >= 0.0, "lr_actor must be >= 0")?;
        check(self.lr_weight >= 0.0, "lr_weight must be >= 0")?;
        check(
            self.polyak_rate > 0.0 && self.polyak_rate <= 1.0,
            "polyak_rate must be in (0, 1]",
        )?;
        check(self.eval_every >= 1, "eval_every must be >= 1")?;
        check(self.eval_episodes >= 1, "eval_episodes must be >= 1")?;
        check(self.n_ood_samples >= 1, "n_ood_samples must be >= 1")?;
        check(self.bc_sigma > 0.0, "bc_sigma must be > 0")?;
        check(!self.hidden.is_empty(), "hidden must have at least one layer")?;
        check(self.hidden.iter().all(|&w| w >= 1), "hidden widths must be >= 1")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_mode_round_trips() {
        for s in ["lambda-mix", "nstep-sarsa(5)", "nstep-sarsa(10)"] {
            let m: QualityMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("nstep-sarsa(0)".parse::<QualityMode>().is_err());
        assert!("sarsa".parse::<QualityMode>().is_err());
    }

    #[test]
    fn default_validates_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn partial_config_file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"gamma":0.9,"batch_size":64}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.gamma, 0.9);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr_critic, 3e-4);

        std::fs::write(&p, r#"{"gamm":0.9}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());

        std::fs::write(&p, r#"{"gamma":1.5}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }
}
