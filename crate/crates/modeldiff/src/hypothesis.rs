//! The shared hypothesis type produced by every diffing method.

use serde::{Deserialize, Serialize};

/// Which of the two compared models a claim is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    A,
    B,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::A => Direction::B,
            Direction::B => Direction::A,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::A => write!(f, "A"),
            Direction::B => write!(f, "B"),
        }
    }
}

/// The diffing method that produced a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Llm,
    Sae,
    Kl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Llm => write!(f, "llm"),
            Method::Sae => write!(f, "sae"),
            Method::Kl => write!(f, "kl"),
        }
    }
}

/// A directional behavioral claim: the named model exhibits `text` more
/// than the other. `text` itself is direction-free so the judge can compare
/// responses without being told the expected side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub text: String,
    pub direction: Direction,
    pub method: Method,
    /// Number of underlying differences (LLM method) or features (SAE
    /// method) that back the claim.
    pub support: usize,
    /// Fraction of the backing evidence attributed to `direction`, in
    /// [0.5, 1]. Always 1.0 for single-source methods.
    pub majority_fraction: f64,
}

impl Hypothesis {
    /// Report-facing rendering, "Model A: <claim>".
    pub fn directed_text(&self) -> String {
        format!("Model {}: {}", self.direction, self.text)
    }
}
