//! Certificates, pseudonyms, and credential fingerprints.
//!
//! A long-term [`Certificate`] binds a public key, issuer, role attributes,
//! and lifetime to a node. A [`Pseudonym`] is its short-term counterpart and
//! deliberately carries nothing but the issuing CA, a lifetime, and a fresh
//! public key — no field links it to the vehicle that requested it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{sign, verify, CryptoError, PrivateKey, PublicKey, Signature};
use crate::types::{CaId, NodeRole, TimeMs};
use crate::wire::{Reader, Writer, WireError};

const DOMAIN_CERT_SIG: &[u8] = b"vanetsec.cert.v1";
const DOMAIN_PNYM_SIG: &[u8] = b"vanetsec.pnym.v1";

/// Validity interval in simulated milliseconds, inclusive at both ends:
/// a credential is valid at `start`, still valid at `end`, invalid at
/// `end + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Lifetime {
    pub start: TimeMs,
    pub end: TimeMs,
}

impl Lifetime {
    pub fn new(start: TimeMs, end: TimeMs) -> Self {
        debug_assert!(start < end, "lifetime start must precede end");
        Self { start, end }
    }

    pub fn contains(&self, t: TimeMs) -> bool {
        self.start <= t && t <= self.end
    }

    /// True when neither interval contains an instant interior to the other.
    /// Sharing exactly the boundary instant (`self.end == other.start`) still
    /// counts as non-overlapping (equal-adjacent).
    pub fn disjoint_or_adjacent(&self, other: &Lifetime) -> bool {
        self.end <= other.start || other.end <= self.start
    }
}

/// 16-byte truncated SHA-256 over a credential's canonical bytes. The
/// identifier used in revocation lists, neighbor tables, and logs.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fingerprint(pub [u8; 16]);

impl Fingerprint {
    pub fn of_bytes(canonical: &[u8]) -> Self {
        let digest: [u8; 32] = Sha256::digest(canonical).into();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        Fingerprint(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 16] = bytes.try_into().ok()?;
        Some(Fingerprint(arr))
    }
}

impl std::fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fp:{}", self.to_hex())
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

/// Long-term certificate: subject key, issuer, role attributes, lifetime,
/// issuer signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject_key: PublicKey,
    pub issuer_id: CaId,
    pub attributes: Vec<NodeRole>,
    pub lifetime: Lifetime,
    pub issuer_signature: Signature,
}

impl Certificate {
    fn signed_preimage(
        subject_key: &PublicKey,
        issuer_id: CaId,
        attributes: &[NodeRole],
        lifetime: Lifetime,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_CERT_SIG)
            .put_len16_bytes(subject_key.as_bytes())
            .put_u32(issuer_id.0)
            .put_u8(attributes.len() as u8);
        for a in attributes {
            w.put_u8(a.tag());
        }
        w.put_i64(lifetime.start).put_i64(lifetime.end);
        w.into_bytes()
    }

    pub fn issue(
        subject_key: PublicKey,
        issuer_id: CaId,
        attributes: Vec<NodeRole>,
        lifetime: Lifetime,
        issuer_private: &PrivateKey,
    ) -> Result<Self, CryptoError> {
        let preimage = Self::signed_preimage(&subject_key, issuer_id, &attributes, lifetime);
        let issuer_signature = sign(issuer_private, &preimage)?;
        Ok(Self {
            subject_key,
            issuer_id,
            attributes,
            lifetime,
            issuer_signature,
        })
    }

    /// True iff the issuer signature is valid and `now` falls inside the
    /// lifetime.
    pub fn verify(&self, issuer_key: &PublicKey, now: TimeMs) -> bool {
        if !self.lifetime.contains(now) {
            return false;
        }
        let preimage = Self::signed_preimage(
            &self.subject_key,
            self.issuer_id,
            &self.attributes,
            self.lifetime,
        );
        verify(issuer_key, &preimage, &self.issuer_signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_len16_bytes(self.subject_key.as_bytes())
            .put_u32(self.issuer_id.0)
            .put_u8(self.attributes.len() as u8);
        for a in &self.attributes {
            w.put_u8(a.tag());
        }
        w.put_i64(self.lifetime.start)
            .put_i64(self.lifetime.end)
            .put_len16_bytes(self.issuer_signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let cert = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(cert)
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let subject_key = PublicKey::from_bytes(r.get_len16_bytes()?)
            .map_err(|_| WireError::InvalidValue("subject key"))?;
        let issuer_id = CaId(r.get_u32()?);
        let n = r.get_u8()? as usize;
        let mut attributes = Vec::with_capacity(n);
        for _ in 0..n {
            attributes.push(
                NodeRole::from_tag(r.get_u8()?).ok_or(WireError::InvalidValue("role tag"))?,
            );
        }
        let lifetime = Lifetime {
            start: r.get_i64()?,
            end: r.get_i64()?,
        };
        let issuer_signature = Signature::from_bytes(r.get_len16_bytes()?);
        Ok(Self {
            subject_key,
            issuer_id,
            attributes,
            lifetime,
            issuer_signature,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of_bytes(&self.to_bytes())
    }
}

/// Short-term credential: CA identifier, lifetime, public key, CA signature.
/// Nothing else, by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pseudonym {
    pub ca_id: CaId,
    pub lifetime: Lifetime,
    pub public_key: PublicKey,
    pub ca_signature: Signature,
}

impl Pseudonym {
    fn signed_preimage(ca_id: CaId, lifetime: Lifetime, public_key: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_PNYM_SIG)
            .put_u32(ca_id.0)
            .put_i64(lifetime.start)
            .put_i64(lifetime.end)
            .put_len16_bytes(public_key.as_bytes());
        w.into_bytes()
    }

    pub fn issue(
        ca_id: CaId,
        lifetime: Lifetime,
        public_key: PublicKey,
        ca_private: &PrivateKey,
    ) -> Result<Self, CryptoError> {
        let preimage = Self::signed_preimage(ca_id, lifetime, &public_key);
        let ca_signature = sign(ca_private, &preimage)?;
        Ok(Self {
            ca_id,
            lifetime,
            public_key,
            ca_signature,
        })
    }

    pub fn verify(&self, ca_key: &PublicKey, now: TimeMs) -> bool {
        if !self.lifetime.contains(now) {
            return false;
        }
        let preimage = Self::signed_preimage(self.ca_id, self.lifetime, &self.public_key);
        verify(ca_key, &preimage, &self.ca_signature)
    }

    /// `[u32 ca_id][i64 start][i64 end][u16 pk_len][pk][u16 sig_len][sig]`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.ca_id.0)
            .put_i64(self.lifetime.start)
            .put_i64(self.lifetime.end)
            .put_len16_bytes(self.public_key.as_bytes())
            .put_len16_bytes(self.ca_signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let p = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let ca_id = CaId(r.get_u32()?);
        let lifetime = Lifetime {
            start: r.get_i64()?,
            end: r.get_i64()?,
        };
        let public_key = PublicKey::from_bytes(r.get_len16_bytes()?)
            .map_err(|_| WireError::InvalidValue("pseudonym key"))?;
        let ca_signature = Signature::from_bytes(r.get_len16_bytes()?);
        Ok(Self {
            ca_id,
            lifetime,
            public_key,
            ca_signature,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of_bytes(&self.to_bytes())
    }
}

/// The credential attached to an outgoing message: private vehicles attach a
/// pseudonym; infrastructure and other readily-identifiable nodes attach
/// their long-term certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Credential {
    Pseudonym(Pseudonym),
    Certificate(Certificate),
}

impl Credential {
    pub fn public_key(&self) -> &PublicKey {
        match self {
            Credential::Pseudonym(p) => &p.public_key,
            Credential::Certificate(c) => &c.subject_key,
        }
    }

    pub fn ca_id(&self) -> CaId {
        match self {
            Credential::Pseudonym(p) => p.ca_id,
            Credential::Certificate(c) => c.issuer_id,
        }
    }

    pub fn lifetime(&self) -> Lifetime {
        match self {
            Credential::Pseudonym(p) => p.lifetime,
            Credential::Certificate(c) => c.lifetime,
        }
    }

    pub fn verify(&self, ca_key: &PublicKey, now: TimeMs) -> bool {
        match self {
            Credential::Pseudonym(p) => p.verify(ca_key, now),
            Credential::Certificate(c) => c.verify(ca_key, now),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        match self {
            Credential::Pseudonym(p) => p.fingerprint(),
            Credential::Certificate(c) => c.fingerprint(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Credential::Pseudonym(p) => {
                w.put_u8(1).put_bytes(&p.to_bytes());
            }
            Credential::Certificate(c) => {
                w.put_u8(2).put_bytes(&c.to_bytes());
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.get_u8()?;
        let out = match tag {
            1 => Credential::Pseudonym(Pseudonym::read_from(&mut r)?),
            2 => Credential::Certificate(Certificate::read_from(&mut r)?),
            _ => return Err(WireError::InvalidValue("credential tag")),
        };
        r.finish()?;
        Ok(out)
    }
}
