//! Cryptographic primitives used by every protocol step.
//!
//! - Hashing: SHA-256.
//! - Signatures: Ed25519.
//! - Response encryption: ChaCha20-Poly1305 with a fresh random 96-bit nonce.
//! - Key wrapping: HPKE base mode (DHKEM X25519 / HKDF-SHA256 /
//!   ChaCha20-Poly1305). The encapsulated key travels in the `nonce` slot of
//!   the wrapped [`Ciphertext`].
//!
//! Randomness is always injected so that simulations are reproducible.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::{Signer, Verifier};
use hpke::aead::{AeadTag, ChaCha20Poly1305 as HpkeChaCha};
use hpke::kdf::HkdfSha256;
use hpke::kem::X25519HkdfSha256;
use hpke::{Deserializable, Kem as _, OpModeR, OpModeS, Serializable};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const SYMMETRIC_KEY_LEN: usize = 32;
const AEAD_NONCE_LEN: usize = 12;
const WRAP_INFO: &[u8] = b"dmas/key-wrap/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("decryption failed: wrong key or tampered ciphertext")]
    DecryptionFailed,
    #[error("key unwrap failed: wrong secret key or tampered wrapping")]
    UnwrapFailed,
    #[error("malformed key material")]
    MalformedKey,
    #[error("malformed ciphertext encoding")]
    MalformedCiphertext,
}

macro_rules! hex_newtype_serde {
    ($ty:ident, $len:expr) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                text.parse().map_err(serde::de::Error::custom)
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let raw = hex::decode(s).map_err(|e| e.to_string())?;
                let arr: [u8; $len] = raw
                    .try_into()
                    .map_err(|_| format!("expected {} bytes", $len))?;
                Ok(Self(arr))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }
    };
}

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_LEN]);

hex_newtype_serde!(Digest, DIGEST_LEN);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    /// First eight hex characters, for logs and tables.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Ed25519 verification key bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerificationKey(pub [u8; 32]);

hex_newtype_serde!(VerificationKey, 32);

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerificationKey({})", hex::encode(&self.0[..4]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

hex_newtype_serde!(Signature, 64);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..4]))
    }
}

#[derive(Clone)]
pub struct SigningKeyPair {
    pub public: VerificationKey,
    secret: ed25519_dalek::SigningKey,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret_bytes(&{
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            seed
        })
    }

    pub fn from_secret_bytes(secret: &[u8; 32]) -> Self {
        let secret = ed25519_dalek::SigningKey::from_bytes(secret);
        Self {
            public: VerificationKey(secret.verifying_key().to_bytes()),
            secret,
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn sign(message: &[u8], key: &SigningKeyPair) -> Signature {
    Signature(key.secret.sign(message).to_bytes())
}

/// Malformed keys and signatures verify as `false`.
pub fn verify(message: &[u8], sig: &Signature, key: &VerificationKey) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(message, &sig).is_ok()
}

/// X25519 public key, PK(u).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncryptionPublicKey(pub [u8; 32]);

hex_newtype_serde!(EncryptionPublicKey, 32);

impl fmt::Debug for EncryptionPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptionPublicKey({})", hex::encode(&self.0[..4]))
    }
}

/// X25519 secret key, SK(u).
#[derive(Clone)]
pub struct EncryptionSecretKey([u8; 32]);

impl fmt::Debug for EncryptionSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EncryptionSecretKey(..)")
    }
}

#[derive(Debug, Clone)]
pub struct EncryptionKeyPair {
    pub public: EncryptionPublicKey,
    pub secret: EncryptionSecretKey,
}

impl EncryptionKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let (sk, pk) = X25519HkdfSha256::gen_keypair(rng);
        let mut public = [0u8; 32];
        public.copy_from_slice(&pk.to_bytes());
        let mut secret = [0u8; 32];
        secret.copy_from_slice(&sk.to_bytes());
        Self {
            public: EncryptionPublicKey(public),
            secret: EncryptionSecretKey(secret),
        }
    }
}

/// A 256-bit symmetric key κ. Not serializable.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; SYMMETRIC_KEY_LEN]);

impl SymmetricKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; SYMMETRIC_KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn from_bytes(bytes: [u8; SYMMETRIC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; SYMMETRIC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// AEAD output with a detached tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    #[serde(with = "hex_vec")]
    pub nonce: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub body: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub auth_tag: Vec<u8>,
}

impl Ciphertext {
    /// Storage encoding: `u16` nonce length, nonce, `u16` tag length, tag, body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.nonce.len() + self.auth_tag.len() + self.body.len());
        out.extend_from_slice(&(self.nonce.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.auth_tag.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.auth_tag);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], CryptoError> {
            if input.len() < n {
                return Err(CryptoError::MalformedCiphertext);
            }
            let (head, tail) = input.split_at(n);
            *input = tail;
            Ok(head)
        }
        let mut rest = bytes;
        let nonce_len = u16::from_be_bytes(take(&mut rest, 2)?.try_into().unwrap()) as usize;
        let nonce = take(&mut rest, nonce_len)?.to_vec();
        let tag_len = u16::from_be_bytes(take(&mut rest, 2)?.try_into().unwrap()) as usize;
        let auth_tag = take(&mut rest, tag_len)?.to_vec();
        Ok(Self {
            nonce,
            auth_tag,
            body: rest.to_vec(),
        })
    }
}

pub fn sym_encrypt<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    key: &SymmetricKey,
    rng: &mut R,
) -> Ciphertext {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut body = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), b"", &mut body)
        .expect("chacha20poly1305 accepts any in-memory plaintext");
    Ciphertext {
        nonce: nonce.to_vec(),
        body,
        auth_tag: tag.to_vec(),
    }
}

pub fn sym_decrypt(ct: &Ciphertext, key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
    if ct.nonce.len() != AEAD_NONCE_LEN || ct.auth_tag.len() != 16 {
        return Err(CryptoError::DecryptionFailed);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut body = ct.body.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&ct.nonce),
            b"",
            &mut body,
            Tag::from_slice(&ct.auth_tag),
        )
        .map_err(|_| CryptoError::DecryptionFailed)?;
    Ok(body)
}

/// κ̄ = Enc(κ, PK(u)).
pub fn wrap_key<R: RngCore + CryptoRng>(
    key: &SymmetricKey,
    recipient: &EncryptionPublicKey,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let pk = <X25519HkdfSha256 as hpke::Kem>::PublicKey::from_bytes(&recipient.0)
        .map_err(|_| CryptoError::MalformedKey)?;
    let mut body = key.0.to_vec();
    let (encapped, tag) = hpke::single_shot_seal_in_place_detached::<
        HpkeChaCha,
        HkdfSha256,
        X25519HkdfSha256,
        _,
    >(&OpModeS::Base, &pk, WRAP_INFO, &mut body, b"", rng)
    .map_err(|_| CryptoError::MalformedKey)?;
    Ok(Ciphertext {
        nonce: encapped.to_bytes().to_vec(),
        body,
        auth_tag: tag.to_bytes().to_vec(),
    })
}

pub fn unwrap_key(
    wrapped: &Ciphertext,
    secret: &EncryptionSecretKey,
) -> Result<SymmetricKey, CryptoError> {
    let sk = <X25519HkdfSha256 as hpke::Kem>::PrivateKey::from_bytes(&secret.0)
        .map_err(|_| CryptoError::MalformedKey)?;
    let encapped = <X25519HkdfSha256 as hpke::Kem>::EncappedKey::from_bytes(&wrapped.nonce)
        .map_err(|_| CryptoError::UnwrapFailed)?;
    let tag = AeadTag::<HpkeChaCha>::from_bytes(&wrapped.auth_tag)
        .map_err(|_| CryptoError::UnwrapFailed)?;
    let mut body = wrapped.body.clone();
    hpke::single_shot_open_in_place_detached::<HpkeChaCha, HkdfSha256, X25519HkdfSha256>(
        &OpModeR::Base,
        &sk,
        &encapped,
        WRAP_INFO,
        &mut body,
        b"",
        &tag,
    )
    .map_err(|_| CryptoError::UnwrapFailed)?;
    let key: [u8; SYMMETRIC_KEY_LEN] = body.try_into().map_err(|_| CryptoError::UnwrapFailed)?;
    Ok(SymmetricKey(key))
}

pub(crate) mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}
