//! Versioned JSON checkpoints holding named tensors and the config that shaped them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::ExtractorParams;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::matching::MatcherParams;
use crate::nn::{NamedTensor, Parameters};

pub const FORMAT: &str = "casematch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Extractor,
    Matcher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new<P: Parameters>(kind: ModelKind, params: &P, config: &TrainConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
            tensors: params.to_named(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn extractor(&self) -> Result<ExtractorParams> {
        self.expect_kind(ModelKind::Extractor)?;
        self.config.arch.validate()?;
        let mut p = ExtractorParams::zeros(&self.config.arch);
        p.load_named(&self.tensors).map_err(Error::Checkpoint)?;
        Ok(p)
    }

    pub fn matcher(&self) -> Result<MatcherParams> {
        self.expect_kind(ModelKind::Matcher)?;
        let mut p = MatcherParams::zeros(self.config.arch.embed_dim, self.config.matcher_hidden);
        p.load_named(&self.tensors).map_err(Error::Checkpoint)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;
    use rand::SeedableRng;

    fn small_config() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig {
                embed_dim: 3,
                hidden: 4,
                dilations: vec![1, 2],
                ..ArchConfig::default()
            },
            matcher_hidden: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn extractor_round_trip() {
        let cfg = small_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = ExtractorParams::init(&cfg.arch, &mut rng);
        let c = Checkpoint::new(ModelKind::Extractor, &p, &cfg);
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back.extractor().unwrap(), p);
        assert!(back.matcher().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = MatcherParams::init(3, 5, &mut rng);
        let mut c = Checkpoint::new(ModelKind::Matcher, &p, &cfg);
        assert_eq!(c.matcher().unwrap(), p);
        c.config.matcher_hidden = 6;
        assert!(matches!(c.matcher(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let cfg = small_config();
        let p = MatcherParams::zeros(3, 5);
        let mut c = Checkpoint::new(ModelKind::Matcher, &p, &cfg);
        c.version = 99;
        assert!(Checkpoint::from_json(&c.to_json()).is_err());
    }
}
