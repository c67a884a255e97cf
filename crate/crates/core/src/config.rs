//! Training and architecture configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pointwise nonlinearity used inside the perceptron layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::nn::sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = f(x)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Distance used for the semantic cost matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    SquaredEuclidean,
    Cosine,
}

/// How the alignment loss is differentiated with respect to the cost matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostGradient {
    /// Adjoint of the Sinkhorn fixed point: the exact derivative of the converged plan.
    Implicit,
    /// Potentials frozen after convergence; `d log a_mn / d c_mn = -1/gamma`.
    FixedPotentials,
}

/// Shapes of the rationale extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub activation: Activation,
    pub metric: Metric,
}

impl ArchConfig {
    pub fn layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("embed_dim and hidden must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.dilations.contains(&0) {
            return Err(Error::InvalidConfig("dilations must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            kernel: 3,
            dilations: vec![1, 2, 4],
            activation: Activation::Tanh,
            metric: Metric::Euclidean,
        }
    }
}

/// Exponential temperature decay for the Gumbel relaxation, floored at `min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub rate: f64,
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Sample Gumbel noise during training; inference is always noise-free.
    pub noise: bool,
    pub anneal: Option<Anneal>,
}

impl GumbelConfig {
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.anneal {
            Some(a) => (self.temperature * (-a.rate * epoch as f64).exp()).max(a.min),
            None => self.temperature,
        }
    }
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            noise: true,
            anneal: None,
        }
    }
}

/// Which evidence the matcher sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    /// All sentences.
    #[serde(rename = "a")]
    All,
    /// Extracted rationales only.
    #[serde(rename = "r")]
    Rationales,
    /// Explanations only.
    #[serde(rename = "e")]
    Explanations,
    /// All sentences except extracted rationales.
    #[serde(rename = "a\\r")]
    AllMinusRationales,
    #[serde(rename = "a+e")]
    AllPlusExplanations,
    #[serde(rename = "r+e")]
    RationalesPlusExplanations,
    #[serde(rename = "a\\r+e")]
    AllMinusRationalesPlusExplanations,
}

impl InputMode {
    pub const ALL: [InputMode; 7] = [
        InputMode::All,
        InputMode::Rationales,
        InputMode::Explanations,
        InputMode::AllMinusRationales,
        InputMode::AllPlusExplanations,
        InputMode::RationalesPlusExplanations,
        InputMode::AllMinusRationalesPlusExplanations,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::All => "a",
            InputMode::Rationales => "r",
            InputMode::Explanations => "e",
            InputMode::AllMinusRationales => "a\\r",
            InputMode::AllPlusExplanations => "a+e",
            InputMode::RationalesPlusExplanations => "r+e",
            InputMode::AllMinusRationalesPlusExplanations => "a\\r+e",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_explanations(self) -> bool {
        matches!(
            self,
            InputMode::Explanations
                | InputMode::AllPlusExplanations
                | InputMode::RationalesPlusExplanations
                | InputMode::AllMinusRationalesPlusExplanations
        )
    }

    /// Sentence selection for the pooled case embeddings, `None` when sentences are not used.
    pub fn sentence_selection(self) -> Option<SentenceSelection> {
        match self {
            InputMode::All | InputMode::AllPlusExplanations => Some(SentenceSelection::All),
            InputMode::Rationales | InputMode::RationalesPlusExplanations => Some(SentenceSelection::Rationales),
            InputMode::AllMinusRationales | InputMode::AllMinusRationalesPlusExplanations => Some(SentenceSelection::NonRationales),
            InputMode::Explanations => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SentenceSelection {
    All,
    Rationales,
    NonRationales,
}

/// Hyper-parameters for both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    /// Entropic regularization weight.
    pub gamma: f64,
    /// Weight of the alignment loss in stage 1.
    pub gamma1: f64,
    /// Weight of the unsupervised same-kind cost term.
    pub gamma2: f64,
    /// Weight of the two auxiliary matcher losses.
    pub gamma3: f64,
    /// Rationale-agreement coefficient, must be `<= 0`.
    pub epsilon: f64,
    /// Plan-mass threshold for pro rationale pairs.
    pub tau: f64,
    pub eta1: f64,
    pub eta3: f64,
    pub batch1: usize,
    pub batch3: usize,
    pub epochs1: usize,
    pub epochs3: usize,
    pub seed: u64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub gumbel: GumbelConfig,
    pub clip_norm: f64,
    pub cost_gradient: CostGradient,
    pub matcher_hidden: usize,
    pub input_mode: InputMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            gamma: 0.5,
            gamma1: 1.0,
            gamma2: 0.1,
            gamma3: 1.0,
            epsilon: -1.0,
            tau: 5e-3,
            eta1: 1e-3,
            eta3: 1e-2,
            batch1: 32,
            batch3: 8,
            epochs1: 30,
            epochs3: 30,
            seed: 0,
            solver_tol: 1e-9,
            solver_max_iter: 10_000,
            gumbel: GumbelConfig::default(),
            clip_norm: 5.0,
            cost_gradient: CostGradient::Implicit,
            matcher_hidden: 32,
            input_mode: InputMode::RationalesPlusExplanations,
        }
    }
}

impl TrainConfig {
    /// Settings for the planted synthetic corpus: cosine semantic cost, no agreement
    /// bonus, no unsupervised term, and a threshold sized for cases of about 15 sentences.
    pub fn planted() -> Self {
        Self {
            arch: ArchConfig {
                metric: Metric::Cosine,
                ..ArchConfig::default()
            },
            gamma: 0.2,
            gamma2: 0.0,
            epsilon: 0.0,
            tau: 0.035,
            epochs1: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.epsilon <= 0.0) {
            return bad(format!("epsilon must be <= 0, got {}", self.epsilon));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("eta1", self.eta1),
            ("eta3", self.eta3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.batch1 == 0 || self.batch3 == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.solver_tol > 0.0) || self.solver_max_iter == 0 {
            return bad("solver tolerance and max iterations must be positive".into());
        }
        if !(self.gumbel.temperature > 0.0) {
            return bad("gumbel temperature must be > 0".into());
        }
        if self.matcher_hidden == 0 {
            return bad("matcher_hidden must be positive".into());
        }
        Ok(())
    }

    /// Short stable digest of the serialized config, used in output provenance headers.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex characters of the SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}
