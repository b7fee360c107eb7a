//! PSYCHS symptom-domain identifiers (P1..P15).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of attenuated positive symptom domains in the PSYCHS interview.
pub const DOMAIN_COUNT: u8 = 15;

const DOMAIN_NAMES: [&str; DOMAIN_COUNT as usize] = [
    "Unusual Thoughts and Experiences",
    "Suspiciousness",
    "Unusual Somatic Ideas",
    "Ideas of Guilt",
    "Jealous Ideas",
    "Unusual Religious Ideas",
    "Erotomanic Ideas",
    "Grandiosity",
    "Auditory Perceptual Abnormalities",
    "Visual Perceptual Abnormalities",
    "Perceptual Abnormalities",
    "Gustatory Perceptual Abnormalities",
    "Tactile Perceptual Abnormalities",
    "Somatic Perceptual Abnormalities",
    "Disorganized Communication Expression",
];

/// A symptom domain, ordered by its position in the interview (P1 < P2 < ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(u8);

impl DomainId {
    /// Returns `None` unless `number` is in `1..=15`.
    pub fn new(number: u8) -> Option<Self> {
        (1..=DOMAIN_COUNT).contains(&number).then_some(Self(number))
    }

    pub fn all() -> impl Iterator<Item = DomainId> {
        (1..=DOMAIN_COUNT).map(DomainId)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Zero-based position in interview order.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn name(self) -> &'static str {
        DOMAIN_NAMES[self.index()]
    }

    /// `"P4 Ideas of Guilt"`.
    pub fn label(self) -> String {
        format!("{self} {}", self.name())
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid domain id {0:?} (expected P1..P15)")]
pub struct ParseDomainError(pub String);

impl FromStr for DomainId {
    type Err = ParseDomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('P')
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(DomainId::new)
            .ok_or_else(|| ParseDomainError(s.to_string()))
    }
}

impl Serialize for DomainId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DomainId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
