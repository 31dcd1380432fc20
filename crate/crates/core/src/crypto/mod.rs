//! Signature schemes, key material, and the sealed-box used for credential
//! delivery.
//!
//! Two interchangeable schemes sit behind one byte-level abstraction:
//!
//! * [`SchemeKind::Ed25519`] — the production path.
//! * [`SchemeKind::KeyedHash`] — a deterministic double built from SHA-256
//!   tags. It round-trips, rejects altered messages and wrong keys, and runs
//!   an order of magnitude faster, which matters for exhaustive property
//!   tests and large simulation runs. It offers no security against an
//!   attacker holding the public key; the simulator's adversaries are
//!   protocol-level and never attack the primitive.
//!
//! Key material is self-describing: the first byte of every key names its
//! scheme, so mixed-scheme deployments fail closed instead of misverifying.

pub mod cert;
pub mod message;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const TAG_ED25519: u8 = 1;
const TAG_KEYED_HASH: u8 = 2;

const DOMAIN_KEYGEN: &[u8] = b"vanetsec.keygen.v1";
const DOMAIN_KH_PUB: &[u8] = b"vanetsec.kh.pub.v1";
const DOMAIN_KH_TAG: &[u8] = b"vanetsec.kh.tag.v1";
const DOMAIN_BOX_KEY: &[u8] = b"vanetsec.box.key.v1";
const DOMAIN_BOX_MAC: &[u8] = b"vanetsec.box.mac.v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid key material")]
    InvalidKeyMaterial,
    #[error("decryption failed")]
    DecryptionFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Ed25519,
    KeyedHash,
}

impl SchemeKind {
    fn tag(self) -> u8 {
        match self {
            SchemeKind::Ed25519 => TAG_ED25519,
            SchemeKind::KeyedHash => TAG_KEYED_HASH,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            TAG_ED25519 => Some(SchemeKind::Ed25519),
            TAG_KEYED_HASH => Some(SchemeKind::KeyedHash),
            _ => None,
        }
    }
}

impl Default for SchemeKind {
    fn default() -> Self {
        SchemeKind::KeyedHash
    }
}

/// Scheme-tagged public key bytes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(Vec<u8>);

/// Scheme-tagged private key bytes. Intentionally no `Display`/`Debug` of the
/// material; custody checks scan output streams for these bytes.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateKey(Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature(Vec<u8>);

#[derive(Clone, Serialize, Deserialize)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..self.0.len().min(9)]))
    }
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrivateKey(<{} bytes>)", self.0.len())
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish()
    }
}

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let kind = bytes
            .first()
            .and_then(|t| SchemeKind::from_tag(*t))
            .ok_or(CryptoError::InvalidKeyMaterial)?;
        let expect = match kind {
            SchemeKind::Ed25519 => 32,
            SchemeKind::KeyedHash => 32,
        };
        if bytes.len() != 1 + expect {
            return Err(CryptoError::InvalidKeyMaterial);
        }
        Ok(Self(bytes.to_vec()))
    }

    pub fn scheme(&self) -> Option<SchemeKind> {
        self.0.first().and_then(|t| SchemeKind::from_tag(*t))
    }

    fn material(&self) -> &[u8] {
        &self.0[1..]
    }
}

impl PrivateKey {
    /// Raw secret material, without the scheme tag. Used by custody scans.
    pub fn secret_material(&self) -> &[u8] {
        &self.0[1..]
    }

    fn scheme(&self) -> Option<SchemeKind> {
        self.0.first().and_then(|t| SchemeKind::from_tag(*t))
    }
}

impl Signature {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(bytes.to_vec())
    }
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Deterministic key generation: a fixed seed always yields the same pair,
/// which is what makes whole simulation runs replayable.
pub fn generate_keypair(kind: SchemeKind, seed: u64) -> KeyPair {
    let seed32 = sha256(&[DOMAIN_KEYGEN, &[kind.tag()], &seed.to_le_bytes()]);
    generate_keypair_from_seed32(kind, &seed32)
}

/// As [`generate_keypair`] but from full-width seed material (HSM-internal).
pub fn generate_keypair_from_seed32(kind: SchemeKind, seed32: &[u8; 32]) -> KeyPair {
    match kind {
        SchemeKind::Ed25519 => {
            let sk = ed25519_dalek::SigningKey::from_bytes(seed32);
            let pk = sk.verifying_key();
            KeyPair {
                public: PublicKey([&[TAG_ED25519][..], pk.as_bytes()].concat()),
                private: PrivateKey([&[TAG_ED25519][..], &sk.to_bytes()].concat()),
            }
        }
        SchemeKind::KeyedHash => {
            let pk = sha256(&[DOMAIN_KH_PUB, seed32]);
            KeyPair {
                public: PublicKey([&[TAG_KEYED_HASH][..], &pk].concat()),
                private: PrivateKey([&[TAG_KEYED_HASH][..], seed32].concat()),
            }
        }
    }
}

pub fn sign(private: &PrivateKey, message: &[u8]) -> Result<Signature, CryptoError> {
    match private.scheme() {
        Some(SchemeKind::Ed25519) => {
            let material: [u8; 32] = private
                .secret_material()
                .try_into()
                .map_err(|_| CryptoError::InvalidKeyMaterial)?;
            let sk = ed25519_dalek::SigningKey::from_bytes(&material);
            use ed25519_dalek::Signer;
            Ok(Signature(sk.sign(message).to_bytes().to_vec()))
        }
        Some(SchemeKind::KeyedHash) => {
            // The tag is keyed by the derived public key so that verification
            // needs no secret and outputs never carry private-key bytes.
            let material: [u8; 32] = private
                .secret_material()
                .try_into()
                .map_err(|_| CryptoError::InvalidKeyMaterial)?;
            let pk = sha256(&[DOMAIN_KH_PUB, &material]);
            Ok(Signature(sha256(&[DOMAIN_KH_TAG, &pk, message]).to_vec()))
        }
        None => Err(CryptoError::InvalidKeyMaterial),
    }
}

/// True iff `signature` was produced over exactly `message` by the private
/// half of `public`. Malformed input returns false, never an error.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    match public.scheme() {
        Some(SchemeKind::Ed25519) => {
            let Ok(material) = <[u8; 32]>::try_from(public.material()) else {
                return false;
            };
            let Ok(pk) = ed25519_dalek::VerifyingKey::from_bytes(&material) else {
                return false;
            };
            let Ok(sig_bytes) = <[u8; 64]>::try_from(signature.as_bytes()) else {
                return false;
            };
            use ed25519_dalek::Verifier;
            pk.verify(message, &ed25519_dalek::Signature::from_bytes(&sig_bytes))
                .is_ok()
        }
        Some(SchemeKind::KeyedHash) => {
            let expect = sha256(&[DOMAIN_KH_TAG, public.material(), message]);
            signature.as_bytes() == expect
        }
        None => false,
    }
}

const BOX_NONCE_LEN: usize = 16;
const BOX_TAG_LEN: usize = 16;

/// Encrypt `plaintext` so that only the holder of `recipient`'s key pair
/// accepts it. This is a simulation-grade sealed box: a SHA-256 keystream
/// bound to the recipient public key plus an integrity tag. It models the
/// confidential credential-delivery channel; it is not an IND-CCA cipher.
pub fn encrypt_for(recipient: &PublicKey, plaintext: &[u8], rng: &mut impl RngCore) -> Vec<u8> {
    let mut nonce = [0u8; BOX_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let key = sha256(&[DOMAIN_BOX_KEY, recipient.as_bytes(), &nonce]);
    let mut ct = plaintext.to_vec();
    xor_keystream(&key, &mut ct);
    let tag = sha256(&[DOMAIN_BOX_MAC, &key, &ct]);
    let mut out = Vec::with_capacity(BOX_NONCE_LEN + ct.len() + BOX_TAG_LEN);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out.extend_from_slice(&tag[..BOX_TAG_LEN]);
    out
}

/// Inverse of [`encrypt_for`]; fails for ciphertexts sealed to another key.
pub fn decrypt_with(own: &KeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < BOX_NONCE_LEN + BOX_TAG_LEN {
        return Err(CryptoError::DecryptionFailed);
    }
    let (nonce, rest) = ciphertext.split_at(BOX_NONCE_LEN);
    let (ct, tag) = rest.split_at(rest.len() - BOX_TAG_LEN);
    let key = sha256(&[DOMAIN_BOX_KEY, own.public.as_bytes(), nonce]);
    let expect = sha256(&[DOMAIN_BOX_MAC, &key, ct]);
    if &expect[..BOX_TAG_LEN] != tag {
        return Err(CryptoError::DecryptionFailed);
    }
    let mut pt = ct.to_vec();
    xor_keystream(&key, &mut pt);
    Ok(pt)
}

fn xor_keystream(key: &[u8; 32], data: &mut [u8]) {
    for (block_idx, chunk) in data.chunks_mut(32).enumerate() {
        let block = sha256(&[key, &(block_idx as u64).to_le_bytes()]);
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}
