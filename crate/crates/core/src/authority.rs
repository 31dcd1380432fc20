//! Certification authority.
//!
//! One CA per region: it registers nodes off-line, issues pseudonym sets
//! against HSM-generated public keys, archives the pseudonym-to-identity
//! mapping for authorized resolution, cross-certifies neighbor CAs and
//! issues foreigner pseudonyms, decides revocations, builds signed CRLs,
//! counts eviction reports, and signs HSM management commands with its two
//! root keys.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::cert::{Certificate, Fingerprint, Lifetime, Pseudonym};
use crate::crypto::{
    encrypt_for, sign, verify, CryptoError, KeyPair, PublicKey, SchemeKind, Signature,
};
use crate::hsm::{make_command, HsmCommand, HsmCommandKind};
use crate::types::{CaId, NodeId, NodeRole, TimeMs};
use crate::wire::{Reader, Writer, WireError};

const DOMAIN_CRL_SIG: &[u8] = b"vanetsec.crl.v1";
const DOMAIN_REFILL_SIG: &[u8] = b"vanetsec.refill.v1";
const DOMAIN_RESOLVE_SIG: &[u8] = b"vanetsec.resolve.v1";
const DOMAIN_VOTE_SIG: &[u8] = b"vanetsec.vote.v1";

/// Default long-term certificate lifetime: five simulated years.
pub const DEFAULT_LONG_TERM_LIFETIME_MS: i64 = 5 * 365 * 24 * 3600 * 1000;
/// Default pseudonym lifetime tau.
pub const DEFAULT_PSEUDONYM_LIFETIME_MS: i64 = 60_000;
/// Default pseudonym set size.
pub const DEFAULT_PSEUDONYM_SET_SIZE: usize = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthorityError {
    #[error("already registered")]
    AlreadyRegistered,
    #[error("not authorized")]
    NotAuthorized,
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("not issued here")]
    NotIssuedHere,
    #[error("forbidden")]
    Forbidden,
    #[error("no cross-certification with {0}")]
    NoCrossCertification(CaId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Signed certificate revocation list.
///
/// Canonical bytes: `[u32 serial][i64 issued_at][u32 n][n * 16-byte
/// fingerprints, ascending][sig]`. The signature also binds the issuer id,
/// which travels out of band (receivers know whose CRL they asked for).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crl {
    pub issuer: CaId,
    pub serial: u32,
    pub issued_at: TimeMs,
    pub entries: Vec<Fingerprint>,
    pub ca_signature: Signature,
}

impl Crl {
    fn signed_preimage(issuer: CaId, serial: u32, issued_at: TimeMs, entries: &[Fingerprint]) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_CRL_SIG)
            .put_u32(issuer.0)
            .put_u32(serial)
            .put_i64(issued_at)
            .put_u32(entries.len() as u32);
        for fp in entries {
            w.put_bytes(&fp.0);
        }
        w.into_bytes()
    }

    pub fn verify(&self, ca_key: &PublicKey) -> bool {
        if !self.entries.windows(2).all(|w| w[0] < w[1]) {
            return false;
        }
        let preimage = Self::signed_preimage(self.issuer, self.serial, self.issued_at, &self.entries);
        verify(ca_key, &preimage, &self.ca_signature)
    }

    pub fn contains(&self, fp: &Fingerprint) -> bool {
        self.entries.binary_search(fp).is_ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.serial)
            .put_i64(self.issued_at)
            .put_u32(self.entries.len() as u32);
        for fp in &self.entries {
            w.put_bytes(&fp.0);
        }
        w.put_bytes(self.ca_signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(issuer: CaId, bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let serial = r.get_u32()?;
        let issued_at = r.get_i64()?;
        let n = r.get_u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let mut fp = [0u8; 16];
            fp.copy_from_slice(r.get_bytes(16)?);
            entries.push(Fingerprint(fp));
        }
        let ca_signature = Signature::from_bytes(r.get_rest());
        Ok(Self {
            issuer,
            serial,
            issued_at,
            entries,
            ca_signature,
        })
    }
}

/// An ordered batch of pseudonyms with consecutive, non-overlapping
/// lifetimes. The owner is recorded only in the CA's log, never in the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudonymSet {
    pub set_index: u32,
    pub pseudonyms: Vec<Pseudonym>,
}

impl PseudonymSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.set_index)
            .put_u16(self.pseudonyms.len() as u16);
        for p in &self.pseudonyms {
            w.put_len16_bytes(&p.to_bytes());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let set_index = r.get_u32()?;
        let n = r.get_u16()? as usize;
        let mut pseudonyms = Vec::with_capacity(n);
        for _ in 0..n {
            pseudonyms.push(Pseudonym::from_bytes(r.get_len16_bytes()?)?);
        }
        r.finish()?;
        Ok(Self {
            set_index,
            pseudonyms,
        })
    }
}

/// Pseudonym-refill request: the vehicle authenticates with its long-term
/// key (via its HSM, so the proof carries the HSM timestamp).
#[derive(Debug, Clone)]
pub struct RefillRequest {
    pub long_term_id: NodeId,
    pub public_keys: Vec<PublicKey>,
    pub hsm_time_ms: TimeMs,
    pub proof: Signature,
}

/// The byte string a vehicle's HSM signs to authenticate a refill request
/// (the HSM appends its clock).
pub fn refill_sign_input(long_term_id: NodeId, public_keys: &[PublicKey]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_bytes(DOMAIN_REFILL_SIG)
        .put_u64(long_term_id.0)
        .put_u32(public_keys.len() as u32);
    for pk in public_keys {
        w.put_len16_bytes(pk.as_bytes());
    }
    w.into_bytes()
}

/// CA-signed capability authorizing one pseudonym resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionToken {
    pub fingerprint: Fingerprint,
    pub signature: Signature,
}

/// One LEAVE vote: an evaluator's signed assertion that `target` misbehaved
/// around `time_ms`. Signed by the evaluator's active pseudonym (HSM
/// timestamp discipline, so the signature covers the vote time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveVote {
    pub evaluator: Pseudonym,
    pub target: Fingerprint,
    pub time_ms: TimeMs,
    pub signature: Signature,
}

pub fn vote_sign_input(target: &Fingerprint) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_bytes(DOMAIN_VOTE_SIG).put_bytes(&target.0);
    w.into_bytes()
}

impl LeaveVote {
    pub fn verify_signature(&self) -> bool {
        let mut signed = vote_sign_input(&self.target);
        signed.extend_from_slice(&self.time_ms.to_le_bytes());
        verify(&self.evaluator.public_key, &signed, &self.signature)
    }
}

/// One LEAVE execution reported to the CA: the quorum of votes that evicted
/// `target` locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub target: Fingerprint,
    pub time_ms: TimeMs,
    pub votes: Vec<LeaveVote>,
}

impl EvictionEvent {
    /// Deduplication id: hash of target, the sorted voting pseudonym
    /// fingerprints, and the event time rounded to one second.
    pub fn event_id(&self) -> [u8; 16] {
        let mut fps: Vec<Fingerprint> = self.votes.iter().map(|v| v.evaluator.fingerprint()).collect();
        fps.sort();
        let mut h = Sha256::new();
        h.update(b"vanetsec.evict.v1");
        h.update(self.target.0);
        for fp in fps {
            h.update(fp.0);
        }
        h.update((self.time_ms.div_euclid(1000)).to_le_bytes());
        let digest: [u8; 32] = h.finalize().into();
        digest[..16].try_into().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevocationReason {
    Administrative,
    Technical,
    EvictionThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum IssuedKind {
    LongTerm,
    Pseudonym,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IssuedRecord {
    owner: NodeId,
    lifetime: Lifetime,
    kind: IssuedKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryEntry {
    certificate: Certificate,
    attributes: Vec<NodeRole>,
    public_key: PublicKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudonymLogEntry {
    pub fingerprint: Fingerprint,
    pub long_term_id: NodeId,
    pub issue_time_ms: TimeMs,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaConfig {
    pub pseudonym_lifetime_ms: i64,
    pub pseudonym_set_size: usize,
    pub long_term_lifetime_ms: i64,
    /// LEAVE evictions needed before the CA revokes a node. Per-CA policy.
    pub eviction_threshold: u32,
}

impl Default for CaConfig {
    fn default() -> Self {
        Self {
            pseudonym_lifetime_ms: DEFAULT_PSEUDONYM_LIFETIME_MS,
            pseudonym_set_size: DEFAULT_PSEUDONYM_SET_SIZE,
            long_term_lifetime_ms: DEFAULT_LONG_TERM_LIFETIME_MS,
            eviction_threshold: 3,
        }
    }
}

/// Full CA state. Mutated only through the operations below; the simulator
/// serializes all calls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaState {
    pub ca_id: CaId,
    pub region_id: u32,
    pub config: CaConfig,
    ca_keypair: KeyPair,
    root_keypairs: [KeyPair; 2],
    registry: BTreeMap<NodeId, RegistryEntry>,
    pseudonym_log: Vec<PseudonymLogEntry>,
    #[serde(skip)]
    log_index: HashMap<Fingerprint, usize>,
    issued: BTreeMap<Fingerprint, IssuedRecord>,
    revoked: BTreeMap<Fingerprint, Lifetime>,
    revoked_nodes: BTreeSet<NodeId>,
    eviction_counts: BTreeMap<NodeId, u32>,
    seen_eviction_events: BTreeSet<[u8; 16]>,
    cross_certs: BTreeMap<CaId, PublicKey>,
    crl_serial: u32,
    next_set_index: BTreeMap<NodeId, u32>,
    next_pseudonym_start: BTreeMap<NodeId, TimeMs>,
    rng_seed: u64,
    encrypt_counter: u64,
}

impl CaState {
    pub fn new(ca_id: CaId, region_id: u32, scheme: SchemeKind, seed: u64, config: CaConfig) -> Self {
        let ca_keypair = crate::crypto::generate_keypair(scheme, seed.wrapping_mul(3).wrapping_add(1));
        let root_k1 = crate::crypto::generate_keypair(scheme, seed.wrapping_mul(3).wrapping_add(2));
        let root_k2 = crate::crypto::generate_keypair(scheme, seed.wrapping_mul(3).wrapping_add(3));
        Self {
            ca_id,
            region_id,
            config,
            ca_keypair,
            root_keypairs: [root_k1, root_k2],
            registry: BTreeMap::new(),
            pseudonym_log: Vec::new(),
            log_index: HashMap::new(),
            issued: BTreeMap::new(),
            revoked: BTreeMap::new(),
            revoked_nodes: BTreeSet::new(),
            eviction_counts: BTreeMap::new(),
            seen_eviction_events: BTreeSet::new(),
            cross_certs: BTreeMap::new(),
            crl_serial: 0,
            next_set_index: BTreeMap::new(),
            next_pseudonym_start: BTreeMap::new(),
            rng_seed: seed,
            encrypt_counter: 0,
        }
    }

    /// Rebuild skipped indexes after deserialization.
    pub fn rebuild_indexes(&mut self) {
        self.log_index = self
            .pseudonym_log
            .iter()
            .enumerate()
            .map(|(i, e)| (e.fingerprint, i))
            .collect();
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.ca_keypair.public
    }

    pub(crate) fn ca_private(&self) -> &crate::crypto::PrivateKey {
        &self.ca_keypair.private
    }

    pub fn root_public(&self, index: u8) -> &PublicKey {
        &self.root_keypairs[(index - 1) as usize].public
    }

    pub fn scheme(&self) -> SchemeKind {
        self.ca_keypair
            .public
            .scheme()
            .expect("CA key has a scheme tag")
    }

    pub fn crl_serial(&self) -> u32 {
        self.crl_serial
    }

    pub fn is_registered(&self, id: NodeId) -> bool {
        self.registry.contains_key(&id)
    }

    pub fn is_node_revoked(&self, id: NodeId) -> bool {
        self.revoked_nodes.contains(&id)
    }

    pub fn eviction_count(&self, id: NodeId) -> u32 {
        self.eviction_counts.get(&id).copied().unwrap_or(0)
    }

    pub fn add_cross_cert(&mut self, ca: CaId, key: PublicKey) {
        self.cross_certs.insert(ca, key);
    }

    fn fresh_rng(&mut self) -> ChaCha20Rng {
        let n = self.encrypt_counter;
        self.encrypt_counter += 1;
        ChaCha20Rng::seed_from_u64(self.rng_seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Off-line registration: issue the long-term certificate and record the
    /// node.
    pub fn register_node(
        &mut self,
        long_term_id: NodeId,
        public_key: PublicKey,
        attributes: Vec<NodeRole>,
        now: TimeMs,
    ) -> Result<Certificate, AuthorityError> {
        if self.registry.contains_key(&long_term_id) {
            return Err(AuthorityError::AlreadyRegistered);
        }
        let lifetime = Lifetime::new(now, now + self.config.long_term_lifetime_ms);
        let certificate = Certificate::issue(
            public_key.clone(),
            self.ca_id,
            attributes.clone(),
            lifetime,
            &self.ca_keypair.private,
        )?;
        self.issued.insert(
            certificate.fingerprint(),
            IssuedRecord {
                owner: long_term_id,
                lifetime,
                kind: IssuedKind::LongTerm,
            },
        );
        self.registry.insert(
            long_term_id,
            RegistryEntry {
                certificate: certificate.clone(),
                attributes,
                public_key,
            },
        );
        Ok(certificate)
    }

    pub fn certificate_of(&self, id: NodeId) -> Option<&Certificate> {
        self.registry.get(&id).map(|e| &e.certificate)
    }

    fn verify_refill_proof(&self, request: &RefillRequest, key: &PublicKey) -> bool {
        let mut signed = refill_sign_input(request.long_term_id, &request.public_keys);
        signed.extend_from_slice(&request.hsm_time_ms.to_le_bytes());
        verify(key, &signed, &request.proof)
    }

    fn issue_set_for(
        &mut self,
        owner: NodeId,
        public_keys: &[PublicKey],
        now: TimeMs,
    ) -> Result<PseudonymSet, AuthorityError> {
        let tau = self.config.pseudonym_lifetime_ms;
        // Never overlap earlier sets issued to the same identity: the next
        // set starts where the previous one ended.
        let start0 = (*self.next_pseudonym_start.get(&owner).unwrap_or(&now)).max(now);
        let mut pseudonyms = Vec::with_capacity(public_keys.len());
        for (j, pk) in public_keys.iter().enumerate() {
            let lifetime = Lifetime::new(start0 + j as i64 * tau, start0 + (j as i64 + 1) * tau);
            let pnym = Pseudonym::issue(self.ca_id, lifetime, pk.clone(), &self.ca_keypair.private)?;
            self.issued.insert(
                pnym.fingerprint(),
                IssuedRecord {
                    owner,
                    lifetime,
                    kind: IssuedKind::Pseudonym,
                },
            );
            let entry = PseudonymLogEntry {
                fingerprint: pnym.fingerprint(),
                long_term_id: owner,
                issue_time_ms: now,
            };
            self.log_index.insert(entry.fingerprint, self.pseudonym_log.len());
            self.pseudonym_log.push(entry);
            pseudonyms.push(pnym);
        }
        self.next_pseudonym_start
            .insert(owner, start0 + public_keys.len() as i64 * tau);
        let set_index = {
            let idx = self.next_set_index.entry(owner).or_insert(0);
            let out = *idx;
            *idx += 1;
            out
        };
        Ok(PseudonymSet {
            set_index,
            pseudonyms,
        })
    }

    /// Issue a pseudonym set to a registered, unrevoked vehicle. The set is
    /// returned sealed to the requester's long-term (HSM) public key.
    pub fn issue_pseudonym_set(
        &mut self,
        request: &RefillRequest,
        now: TimeMs,
    ) -> Result<Vec<u8>, AuthorityError> {
        let entry = self
            .registry
            .get(&request.long_term_id)
            .ok_or(AuthorityError::NotAuthorized)?;
        if self.revoked_nodes.contains(&request.long_term_id) {
            return Err(AuthorityError::NotAuthorized);
        }
        let requester_key = entry.public_key.clone();
        if !self.verify_refill_proof(request, &requester_key) {
            return Err(AuthorityError::AuthenticationFailed);
        }
        let set = self.issue_set_for(request.long_term_id, &request.public_keys, now)?;
        let mut rng = self.fresh_rng();
        Ok(encrypt_for(&requester_key, &set.to_bytes(), &mut rng))
    }

    /// Foreigner issuance: a vehicle registered with a cross-certified CA
    /// proves its home credentials and receives local pseudonyms,
    /// indistinguishable in format from domestic ones.
    pub fn issue_foreigner_pseudonyms(
        &mut self,
        home_ca: CaId,
        home_certificate: &Certificate,
        home_crl: Option<&Crl>,
        request: &RefillRequest,
        now: TimeMs,
    ) -> Result<Vec<u8>, AuthorityError> {
        let home_key = self
            .cross_certs
            .get(&home_ca)
            .ok_or(AuthorityError::NoCrossCertification(home_ca))?
            .clone();
        if !home_certificate.verify(&home_key, now) {
            return Err(AuthorityError::AuthenticationFailed);
        }
        if let Some(crl) = home_crl {
            if crl.contains(&home_certificate.fingerprint()) {
                return Err(AuthorityError::NotAuthorized);
            }
        }
        if !self.verify_refill_proof(request, &home_certificate.subject_key) {
            return Err(AuthorityError::AuthenticationFailed);
        }
        let set = self.issue_set_for(request.long_term_id, &request.public_keys, now)?;
        let mut rng = self.fresh_rng();
        Ok(encrypt_for(&home_certificate.subject_key, &set.to_bytes(), &mut rng))
    }

    pub fn issue_resolution_token(&self, fingerprint: Fingerprint) -> ResolutionToken {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_RESOLVE_SIG).put_bytes(&fingerprint.0);
        let signature = sign(&self.ca_keypair.private, w.as_bytes()).expect("CA key is valid");
        ResolutionToken {
            fingerprint,
            signature,
        }
    }

    /// Map a pseudonym back to the identity that requested it. Requires a
    /// valid authority token for that fingerprint.
    pub fn resolve_pseudonym(
        &self,
        fingerprint: Fingerprint,
        authorization: Option<&ResolutionToken>,
    ) -> Result<NodeId, AuthorityError> {
        let token = authorization.ok_or(AuthorityError::Forbidden)?;
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_RESOLVE_SIG).put_bytes(&token.fingerprint.0);
        if token.fingerprint != fingerprint
            || !verify(&self.ca_keypair.public, w.as_bytes(), &token.signature)
        {
            return Err(AuthorityError::Forbidden);
        }
        let idx = self
            .log_index
            .get(&fingerprint)
            .ok_or(AuthorityError::NotIssuedHere)?;
        Ok(self.pseudonym_log[*idx].long_term_id)
    }

    /// Revoke one credential issued here. If it is a long-term certificate,
    /// the node itself is barred from further issuance.
    pub fn revoke(
        &mut self,
        fingerprint: Fingerprint,
        _reason: RevocationReason,
        _now: TimeMs,
    ) -> Result<(), AuthorityError> {
        let record = self
            .issued
            .get(&fingerprint)
            .ok_or(AuthorityError::NotIssuedHere)?
            .clone();
        self.revoked.insert(fingerprint, record.lifetime);
        if record.kind == IssuedKind::LongTerm {
            self.revoked_nodes.insert(record.owner);
        }
        Ok(())
    }

    /// Revoke everything issued to an identity: its long-term certificate
    /// and every logged pseudonym.
    pub fn revoke_node(&mut self, id: NodeId, reason: RevocationReason, now: TimeMs) {
        let fps: Vec<Fingerprint> = self
            .issued
            .iter()
            .filter(|(_, rec)| rec.owner == id)
            .map(|(fp, _)| *fp)
            .collect();
        for fp in fps {
            let _ = self.revoke(fp, reason, now);
        }
        self.revoked_nodes.insert(id);
    }

    pub fn is_revoked(&self, fingerprint: &Fingerprint) -> bool {
        self.revoked.contains_key(fingerprint)
    }

    /// Build the next CRL: all revoked fingerprints whose lifetime has not
    /// yet ended, sorted, signed, serial incremented.
    pub fn build_crl(&mut self, now: TimeMs) -> Crl {
        let entries: Vec<Fingerprint> = self
            .revoked
            .iter()
            .filter(|(_, lifetime)| lifetime.end > now)
            .map(|(fp, _)| *fp)
            .collect();
        self.crl_serial += 1;
        let preimage = Crl::signed_preimage(self.ca_id, self.crl_serial, now, &entries);
        let ca_signature = sign(&self.ca_keypair.private, &preimage).expect("CA key is valid");
        Crl {
            issuer: self.ca_id,
            serial: self.crl_serial,
            issued_at: now,
            entries,
            ca_signature,
        }
    }

    /// Count a LEAVE eviction event; when an identity reaches the threshold,
    /// all its credentials are revoked. Duplicate events (same id) are
    /// ignored. Returns the identity revoked by this event, if any.
    pub fn record_eviction_report(
        &mut self,
        event: &EvictionEvent,
        now: TimeMs,
    ) -> Result<Option<NodeId>, AuthorityError> {
        // Votes must be individually signed by distinct, valid pseudonyms
        // naming the same target.
        let mut seen_evaluators = HashSet::new();
        for vote in &event.votes {
            if vote.target != event.target {
                return Err(AuthorityError::AuthenticationFailed);
            }
            if !vote.evaluator.verify(&self.ca_keypair.public, vote.time_ms) {
                return Err(AuthorityError::AuthenticationFailed);
            }
            if !vote.verify_signature() {
                return Err(AuthorityError::AuthenticationFailed);
            }
            if !seen_evaluators.insert(vote.evaluator.fingerprint()) {
                return Err(AuthorityError::AuthenticationFailed);
            }
        }
        let owner = self
            .issued
            .get(&event.target)
            .ok_or(AuthorityError::NotIssuedHere)?
            .owner;
        if !self.seen_eviction_events.insert(event.event_id()) {
            return Ok(None); // replayed event, not counted
        }
        let count = self.eviction_counts.entry(owner).or_insert(0);
        *count += 1;
        if *count >= self.config.eviction_threshold && !self.revoked_nodes.contains(&owner) {
            self.revoke_node(owner, RevocationReason::EvictionThreshold, now);
            return Ok(Some(owner));
        }
        Ok(None)
    }

    /// Sign an HSM management command with the chosen root key.
    pub fn issue_hsm_command(
        &self,
        kind: HsmCommandKind,
        target_device: u64,
        payload: Vec<u8>,
        signing_root: u8,
    ) -> Result<HsmCommand, AuthorityError> {
        let root = &self.root_keypairs[(signing_root - 1) as usize];
        Ok(make_command(kind, target_device, payload, signing_root, &root.private)?)
    }

    /// Line-oriented export: `fingerprint_hex,long_term_id,issue_time_ms`.
    pub fn export_pseudonym_log(&self) -> String {
        let mut out = String::new();
        for e in &self.pseudonym_log {
            out.push_str(&format!(
                "{},{},{}\n",
                e.fingerprint.to_hex(),
                e.long_term_id,
                e.issue_time_ms
            ));
        }
        out
    }

    pub fn pseudonym_log(&self) -> &[PseudonymLogEntry] {
        &self.pseudonym_log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{decrypt_with, generate_keypair};

    fn ca() -> CaState {
        CaState::new(CaId(1), 1, SchemeKind::KeyedHash, 42, CaConfig::default())
    }

    fn register_vehicle(ca: &mut CaState, id: u64, seed: u64) -> (KeyPair, Certificate) {
        let kp = generate_keypair(SchemeKind::KeyedHash, seed);
        let cert = ca
            .register_node(
                NodeId(id),
                kp.public.clone(),
                vec![NodeRole::PrivateVehicle],
                0,
            )
            .unwrap();
        (kp, cert)
    }

    fn make_request_with_keys(
        id: u64,
        kp: &KeyPair,
        n: usize,
        time: TimeMs,
    ) -> (RefillRequest, Vec<KeyPair>) {
        let pairs: Vec<KeyPair> = (0..n)
            .map(|i| {
                generate_keypair(
                    SchemeKind::KeyedHash,
                    id.wrapping_mul(1_000_000) + time as u64 + i as u64,
                )
            })
            .collect();
        let keys: Vec<PublicKey> = pairs.iter().map(|p| p.public.clone()).collect();
        let mut signed = refill_sign_input(NodeId(id), &keys);
        signed.extend_from_slice(&time.to_le_bytes());
        let proof = sign(&kp.private, &signed).unwrap();
        (
            RefillRequest {
                long_term_id: NodeId(id),
                public_keys: keys,
                hsm_time_ms: time,
                proof,
            },
            pairs,
        )
    }

    fn make_request(ca: &CaState, id: u64, kp: &KeyPair, n: usize, time: TimeMs) -> RefillRequest {
        let _ = ca;
        make_request_with_keys(id, kp, n, time).0
    }

    #[test]
    fn register_and_verify() {
        let mut ca = ca();
        let (_, cert) = register_vehicle(&mut ca, 1, 1);
        assert!(cert.attributes.contains(&NodeRole::PrivateVehicle));
        assert!(cert.verify(ca.public_key(), 100));
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut ca = ca();
        register_vehicle(&mut ca, 1, 1);
        let kp = generate_keypair(SchemeKind::KeyedHash, 2);
        assert_eq!(
            ca.register_node(NodeId(1), kp.public, vec![NodeRole::PrivateVehicle], 0),
            Err(AuthorityError::AlreadyRegistered)
        );
    }

    #[test]
    fn rsu_certificate_verifies_after_issue() {
        let mut ca = ca();
        let kp = generate_keypair(SchemeKind::KeyedHash, 3);
        let cert = ca
            .register_node(NodeId(50), kp.public, vec![NodeRole::Rsu], 0)
            .unwrap();
        assert!(cert.verify(ca.public_key(), 0));
    }

    #[test]
    fn pseudonym_set_lifetimes_disjoint_and_anonymous() {
        let mut ca = ca();
        let (kp, _) = register_vehicle(&mut ca, 1, 1);
        let request = make_request(&ca, 1, &kp, 10, 0);
        let sealed = ca.issue_pseudonym_set(&request, 0).unwrap();
        let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
        assert_eq!(set.pseudonyms.len(), 10);
        for pair in set.pseudonyms.windows(2) {
            assert!(pair[0].lifetime.disjoint_or_adjacent(&pair[1].lifetime));
            assert!(pair[0].lifetime.end <= pair[1].lifetime.start);
        }
        for p in &set.pseudonyms {
            assert!(p.verify(ca.public_key(), p.lifetime.start));
            // serialized form holds exactly ca_id, lifetime, key, signature
            let expected_len =
                4 + 16 + 2 + p.public_key.as_bytes().len() + 2 + p.ca_signature.as_bytes().len();
            assert_eq!(p.to_bytes().len(), expected_len);
        }
    }

    #[test]
    fn revoked_vehicle_cannot_refill() {
        let mut ca = ca();
        let (kp, cert) = register_vehicle(&mut ca, 1, 1);
        ca.revoke(cert.fingerprint(), RevocationReason::Administrative, 0)
            .unwrap();
        let request = make_request(&ca, 1, &kp, 5, 0);
        assert_eq!(
            ca.issue_pseudonym_set(&request, 0),
            Err(AuthorityError::NotAuthorized)
        );
    }

    #[test]
    fn bad_proof_rejected() {
        let mut ca = ca();
        let (_, _) = register_vehicle(&mut ca, 1, 1);
        let wrong = generate_keypair(SchemeKind::KeyedHash, 999);
        let request = make_request(&ca, 1, &wrong, 5, 0);
        assert_eq!(
            ca.issue_pseudonym_set(&request, 0),
            Err(AuthorityError::AuthenticationFailed)
        );
    }

    #[test]
    fn resolution_round_trip_and_guards() {
        let mut ca = ca();
        let (kp, _) = register_vehicle(&mut ca, 7, 1);
        let request = make_request(&ca, 7, &kp, 5, 0);
        let sealed = ca.issue_pseudonym_set(&request, 0).unwrap();
        let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
        let fp = set.pseudonyms[2].fingerprint();
        let token = ca.issue_resolution_token(fp);
        assert_eq!(ca.resolve_pseudonym(fp, Some(&token)), Ok(NodeId(7)));
        assert_eq!(ca.resolve_pseudonym(fp, None), Err(AuthorityError::Forbidden));
        let random = Fingerprint([9; 16]);
        let bad_token = ca.issue_resolution_token(random);
        assert_eq!(
            ca.resolve_pseudonym(random, Some(&bad_token)),
            Err(AuthorityError::NotIssuedHere)
        );
    }

    #[test]
    fn resolution_completeness_over_1000() {
        let mut ca = ca();
        let mut expected = Vec::new();
        for v in 0..10u64 {
            let (kp, _) = register_vehicle(&mut ca, v + 1, v + 100);
            for batch in 0..10 {
                let request = make_request(&ca, v + 1, &kp, 10, batch * 1000);
                let sealed = ca.issue_pseudonym_set(&request, batch * 1000).unwrap();
                let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
                for p in set.pseudonyms {
                    expected.push((p.fingerprint(), NodeId(v + 1)));
                }
            }
        }
        assert_eq!(expected.len(), 1000);
        for (fp, id) in expected {
            let token = ca.issue_resolution_token(fp);
            assert_eq!(ca.resolve_pseudonym(fp, Some(&token)), Ok(id));
        }
    }

    #[test]
    fn foreigner_issuance() {
        let mut home = CaState::new(CaId(1), 1, SchemeKind::KeyedHash, 42, CaConfig::default());
        let mut visited = CaState::new(CaId(2), 2, SchemeKind::KeyedHash, 43, CaConfig::default());
        visited.add_cross_cert(CaId(1), home.public_key().clone());

        let (kp, home_cert) = register_vehicle(&mut home, 11, 5);
        let request = make_request(&visited, 11, &kp, 5, 0);
        let sealed = visited
            .issue_foreigner_pseudonyms(CaId(1), &home_cert, None, &request, 0)
            .unwrap();
        let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
        for p in &set.pseudonyms {
            assert_eq!(p.ca_id, CaId(2));
        }
        // resolution at the visited CA yields the home identity
        let fp = set.pseudonyms[0].fingerprint();
        let token = visited.issue_resolution_token(fp);
        assert_eq!(visited.resolve_pseudonym(fp, Some(&token)), Ok(NodeId(11)));
    }

    #[test]
    fn foreigner_requires_cross_cert_and_clean_crl() {
        let mut home = CaState::new(CaId(1), 1, SchemeKind::KeyedHash, 42, CaConfig::default());
        let mut visited = CaState::new(CaId(2), 2, SchemeKind::KeyedHash, 43, CaConfig::default());
        let (kp, home_cert) = register_vehicle(&mut home, 11, 5);
        let request = make_request(&visited, 11, &kp, 5, 0);
        assert_eq!(
            visited.issue_foreigner_pseudonyms(CaId(1), &home_cert, None, &request, 0),
            Err(AuthorityError::NoCrossCertification(CaId(1)))
        );

        visited.add_cross_cert(CaId(1), home.public_key().clone());
        home.revoke(home_cert.fingerprint(), RevocationReason::Technical, 0)
            .unwrap();
        let home_crl = home.build_crl(0);
        assert_eq!(
            visited.issue_foreigner_pseudonyms(CaId(1), &home_cert, Some(&home_crl), &request, 0),
            Err(AuthorityError::NotAuthorized)
        );
    }

    #[test]
    fn crl_building_and_pruning() {
        let mut ca = ca();
        let (kp, _) = register_vehicle(&mut ca, 1, 1);
        let request = make_request(&ca, 1, &kp, 3, 0);
        let sealed = ca.issue_pseudonym_set(&request, 0).unwrap();
        let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
        for p in &set.pseudonyms {
            ca.revoke(p.fingerprint(), RevocationReason::Technical, 0).unwrap();
        }
        let crl = ca.build_crl(1000);
        assert_eq!(crl.entries.len(), 3);
        assert!(crl.verify(ca.public_key()));
        assert_eq!(crl.serial, 1);

        // pseudonym 0 has lifetime [0, 60000]; at now = 60000 its end is not
        // strictly greater, so it is pruned
        let crl2 = ca.build_crl(60_000);
        assert_eq!(crl2.entries.len(), 2);
        assert_eq!(crl2.serial, 2);

        // unexpired entries survive pruning
        assert!(crl2.contains(&set.pseudonyms[1].fingerprint()));
    }

    #[test]
    fn empty_crl_signed_and_verifiable() {
        let mut ca = ca();
        let crl = ca.build_crl(0);
        assert!(crl.entries.is_empty());
        assert!(crl.verify(ca.public_key()));
        let decoded = Crl::from_bytes(ca.ca_id, &crl.to_bytes()).unwrap();
        assert_eq!(decoded, crl);
        assert!(decoded.verify(ca.public_key()));
    }

    #[test]
    fn revoke_unknown_fingerprint() {
        let mut ca = ca();
        assert_eq!(
            ca.revoke(Fingerprint([1; 16]), RevocationReason::Technical, 0),
            Err(AuthorityError::NotIssuedHere)
        );
    }

    fn eviction_event(
        ca: &mut CaState,
        target_fp: Fingerprint,
        evaluator_seeds: &[u64],
        time_ms: TimeMs,
    ) -> EvictionEvent {
        let mut votes = Vec::new();
        for seed in evaluator_seeds {
            let kp = generate_keypair(SchemeKind::KeyedHash, *seed);
            let id = NodeId(1_000 + seed);
            if !ca.is_registered(id) {
                ca.register_node(id, kp.public.clone(), vec![NodeRole::PrivateVehicle], 0)
                    .unwrap();
            }
            let (request, pnym_keys) = make_request_with_keys(id.0, &kp, 1, time_ms);
            let sealed = ca.issue_pseudonym_set(&request, time_ms).unwrap();
            let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
            let pnym = set.pseudonyms[0].clone();
            let mut signed = vote_sign_input(&target_fp);
            signed.extend_from_slice(&time_ms.to_le_bytes());
            let signature = sign(&pnym_keys[0].private, &signed).unwrap();
            votes.push(LeaveVote {
                evaluator: pnym,
                target: target_fp,
                time_ms,
                signature,
            });
        }
        EvictionEvent {
            target: target_fp,
            time_ms,
            votes,
        }
    }

    #[test]
    fn eviction_threshold_fires_exactly_at_threshold() {
        let mut ca = ca();
        let (kp, _) = register_vehicle(&mut ca, 1, 1);
        let request = make_request(&ca, 1, &kp, 1, 0);
        let sealed = ca.issue_pseudonym_set(&request, 0).unwrap();
        let set = PseudonymSet::from_bytes(&decrypt_with(&kp, &sealed).unwrap()).unwrap();
        let target_fp = set.pseudonyms[0].fingerprint();

        let e1 = eviction_event(&mut ca, target_fp, &[21, 22, 23], 1_000);
        let e2 = eviction_event(&mut ca, target_fp, &[24, 25, 26], 2_000);
        let e3 = eviction_event(&mut ca, target_fp, &[27, 28, 29], 3_000);

        assert_eq!(ca.record_eviction_report(&e1, 1_000).unwrap(), None);
        assert!(!ca.is_node_revoked(NodeId(1)));
        assert_eq!(ca.record_eviction_report(&e2, 2_000).unwrap(), None);
        assert!(!ca.is_node_revoked(NodeId(1)));
        // replay of event 2: ignored, still not revoked
        for _ in 0..5 {
            assert_eq!(ca.record_eviction_report(&e2, 2_100).unwrap(), None);
        }
        assert_eq!(ca.eviction_count(NodeId(1)), 2);
        assert_eq!(ca.record_eviction_report(&e3, 3_000).unwrap(), Some(NodeId(1)));
        assert!(ca.is_node_revoked(NodeId(1)));
        assert!(ca.is_revoked(&target_fp));
    }

    #[test]
    fn pseudonym_log_export_format() {
        let mut ca = ca();
        let (kp, _) = register_vehicle(&mut ca, 3, 9);
        let request = make_request(&ca, 3, &kp, 2, 500);
        ca.issue_pseudonym_set(&request, 500).unwrap();
        let export = ca.export_pseudonym_log();
        let lines: Vec<&str> = export.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let parts: Vec<&str> = line.split(',').collect();
            assert_eq!(parts.len(), 3);
            assert_eq!(parts[0].len(), 32);
            assert_eq!(parts[1], "3");
            assert_eq!(parts[2], "500");
        }
    }

    #[test]
    fn crl_serials_monotone() {
        let mut ca = ca();
        let a = ca.build_crl(0);
        let b = ca.build_crl(10);
        let c = ca.build_crl(20);
        assert!(a.serial < b.serial && b.serial < c.serial);
    }

    #[test]
    fn hsm_command_round_trip_against_device() {
        use crate::hsm::{init_device, HsmParams};
        let ca = ca();
        let lt = generate_keypair(SchemeKind::KeyedHash, 77);
        let mut bay = None;
        init_device(
            &mut bay,
            HsmParams {
                device_id: 8,
                scheme: SchemeKind::KeyedHash,
                seed: 1,
                drift_ppm: 0,
            },
            ca.root_public(1).clone(),
            ca.root_public(2).clone(),
            lt,
        )
        .unwrap();
        let mut hsm = bay.unwrap();
        let kill = ca
            .issue_hsm_command(HsmCommandKind::Kill, 8, vec![], 1)
            .unwrap();
        let outcome = hsm.process_command(&kill).unwrap();
        assert!(matches!(outcome, crate::hsm::CommandOutcome::KillAck(_)));
        assert!(hsm.is_killed());
    }
}
