use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{EncryptionKeyPair, SigningKeyPair};

/// A decentralized identifier, e.g. `did:dmas:sa-r0`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Did(String);

impl Did {
    pub const METHOD_PREFIX: &'static str = "did:dmas:";

    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// `did:dmas:<name>`.
    pub fn dmas(name: &str) -> Self {
        Self(format!("{}{name}", Self::METHOD_PREFIX))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Did {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// A DID together with the key pairs it is bound to.
#[derive(Debug, Clone)]
pub struct AgentIdentity {
    pub did: Did,
    pub signing: SigningKeyPair,
    pub encryption: EncryptionKeyPair,
}

impl AgentIdentity {
    pub fn generate<R: RngCore + CryptoRng>(did: Did, rng: &mut R) -> Self {
        Self {
            did,
            signing: SigningKeyPair::generate(rng),
            encryption: EncryptionKeyPair::generate(rng),
        }
    }
}
