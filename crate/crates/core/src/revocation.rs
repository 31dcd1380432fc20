//! Revocation distribution.
//!
//! Three delivery mechanisms for CA revocation decisions:
//!
//! * CRLs cut into cryptographically self-verifiable pieces (each piece is
//!   individually CA-signed) over a systematic erasure code, broadcast
//!   low-rate by RSUs and relayed V2V, so any sufficient subset of distinct
//!   pieces rebuilds the CRL;
//! * Bloom-filter-compressed CRLs: zero false negatives, configurable false
//!   positive rate, small enough for very low-rate channels;
//! * the kill protocol session for a targeted HSM: command via RSU, signed
//!   ACK, RDS fallback after timeout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::Crl;
use crate::crypto::cert::Fingerprint;
use crate::crypto::{sign, verify, CryptoError, PrivateKey, PublicKey, Signature};
use crate::erasure::{ErasureCode, ErasureError};
use crate::hsm::{HsmCommand, KillAck};
use crate::types::{CaId, TimeMs};
use crate::wire::{Reader, Writer, WireError};

const DOMAIN_PIECE_SIG: &[u8] = b"vanetsec.crlpiece.v1";
const DOMAIN_BLOOM_SIG: &[u8] = b"vanetsec.bloomcrl.v1";

/// Self-description prefix inside every piece payload: `[u16 k][u32 crl_len]`.
const PIECE_HEADER_BYTES: usize = 6;
/// Frame overhead charged per piece when modeling airtime (headers plus
/// signature, rounded to a fixed budget).
pub const PIECE_FRAME_OVERHEAD_BYTES: usize = 64;

pub const DEFAULT_PIECE_PAYLOAD_BYTES: usize = 512;
pub const DEFAULT_REDUNDANCY_FACTOR: f64 = 1.5;
pub const DEFAULT_BLOOM_FP_RATE: f64 = 0.001;
pub const DEFAULT_KILL_TIMEOUT_MS: i64 = 10_000;
pub const DEFAULT_RDS_REPEAT_LIMIT: u8 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RevocationError {
    #[error("piece signature invalid")]
    BadPieceSignature,
    #[error("malformed piece: {0}")]
    MalformedPiece(&'static str),
    #[error("crl signature invalid after reassembly")]
    BadCrlSignature,
    #[error(transparent)]
    Erasure(#[from] ErasureError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// One CA-signed fragment of an erasure-coded CRL.
///
/// Wire format: `[u32 serial][u16 index][u16 total][u16 len][payload][sig]`.
/// The payload starts with `[u16 k][u32 crl_len]` so any single piece
/// announces how many distinct pieces reconstruct and how long the CRL is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlPiece {
    pub serial: u32,
    pub index: u16,
    pub total: u16,
    pub payload: Vec<u8>,
    pub ca_signature: Signature,
}

impl CrlPiece {
    fn signed_preimage(serial: u32, index: u16, total: u16, payload: &[u8]) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_PIECE_SIG)
            .put_u32(serial)
            .put_u16(index)
            .put_u16(total)
            .put_len16_bytes(payload);
        w.into_bytes()
    }

    pub fn verify(&self, ca_key: &PublicKey) -> bool {
        let preimage = Self::signed_preimage(self.serial, self.index, self.total, &self.payload);
        verify(ca_key, &preimage, &self.ca_signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.serial)
            .put_u16(self.index)
            .put_u16(self.total)
            .put_len16_bytes(&self.payload)
            .put_bytes(self.ca_signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let serial = r.get_u32()?;
        let index = r.get_u16()?;
        let total = r.get_u16()?;
        let payload = r.get_len16_bytes()?.to_vec();
        let ca_signature = Signature::from_bytes(r.get_rest());
        Ok(Self {
            serial,
            index,
            total,
            payload,
            ca_signature,
        })
    }

    fn header(&self) -> Result<(u16, u32, &[u8]), RevocationError> {
        if self.payload.len() <= PIECE_HEADER_BYTES {
            return Err(RevocationError::MalformedPiece("payload too short"));
        }
        let mut r = Reader::new(&self.payload);
        let k = r.get_u16()?;
        let crl_len = r.get_u32()?;
        Ok((k, crl_len, r.get_rest()))
    }

    /// Airtime model: coded bytes plus a fixed frame-overhead budget.
    pub fn airtime_ms(&self, rate_bps: u32) -> TimeMs {
        let coded = self.payload.len() - PIECE_HEADER_BYTES;
        ((coded + PIECE_FRAME_OVERHEAD_BYTES) as i64 * 8 * 1000) / rate_bps as i64
    }
}

/// Number of data pieces for a CRL of `len` bytes.
fn data_piece_count(len: usize, piece_payload_bytes: usize) -> usize {
    len.div_ceil(piece_payload_bytes).max(1)
}

/// Cut a signed CRL into `n` self-verifiable pieces such that any
/// `ceil(len / payload)` distinct pieces reconstruct it. A CRL that fits in
/// a single piece is emitted as exactly one piece; round-robin rebroadcast
/// already repeats it.
pub fn encode_crl_pieces(
    crl: &Crl,
    ca_private: &PrivateKey,
    piece_payload_bytes: usize,
    redundancy_factor: f64,
) -> Result<Vec<CrlPiece>, RevocationError> {
    let crl_bytes = crl.to_bytes();
    let shard_bytes = (piece_payload_bytes + 1) & !1; // coding needs even
    let k = data_piece_count(crl_bytes.len(), shard_bytes);
    let n = if k == 1 {
        1
    } else {
        ((redundancy_factor * k as f64).ceil() as usize).max(k)
    };
    let code = ErasureCode::new(k, n, shard_bytes)?;
    let shards = code.encode(&crl_bytes)?;
    let mut pieces = Vec::with_capacity(n);
    for (i, shard) in shards.into_iter().enumerate() {
        let mut payload = Vec::with_capacity(PIECE_HEADER_BYTES + shard.len());
        payload.extend_from_slice(&(k as u16).to_le_bytes());
        payload.extend_from_slice(&(crl_bytes.len() as u32).to_le_bytes());
        payload.extend_from_slice(&shard);
        let preimage = CrlPiece::signed_preimage(crl.serial, i as u16, n as u16, &payload);
        let ca_signature = sign(ca_private, &preimage)?;
        pieces.push(CrlPiece {
            serial: crl.serial,
            index: i as u16,
            total: n as u16,
            payload,
            ca_signature,
        });
    }
    Ok(pieces)
}

/// Reassembly progress for one CRL serial.
#[derive(Debug, Clone, PartialEq)]
pub enum ReassemblyStatus {
    Complete(Crl),
    Pending { have: usize, need: usize },
}

/// Collects pieces (RSU broadcast and V2V relay alike), keeps only the
/// highest serial seen, ignores duplicates, and decodes as soon as enough
/// distinct pieces are held. Every piece is signature-checked before it
/// counts; a bad piece is discarded without poisoning the buffer.
#[derive(Debug, Clone)]
pub struct CrlReassembler {
    issuer: CaId,
    ca_key: PublicKey,
    serial: Option<u32>,
    k: usize,
    crl_len: usize,
    total: u16,
    shard_bytes: usize,
    pieces: BTreeMap<u16, Vec<u8>>,
    completed: Option<Crl>,
}

impl CrlReassembler {
    pub fn new(issuer: CaId, ca_key: PublicKey) -> Self {
        Self {
            issuer,
            ca_key,
            serial: None,
            k: 0,
            crl_len: 0,
            total: 0,
            shard_bytes: 0,
            pieces: BTreeMap::new(),
            completed: None,
        }
    }

    pub fn serial(&self) -> Option<u32> {
        self.serial
    }

    pub fn distinct_pieces(&self) -> usize {
        self.pieces.len()
    }

    pub fn needed_pieces(&self) -> usize {
        self.k
    }

    /// Piece-index bitmap advertised to V2V relay peers. A node that already
    /// reassembled the CRL needs nothing and advertises a full bitmap.
    pub fn have_bitmap(&self) -> PieceBitmap {
        let mut have = vec![0u8; (self.total as usize).div_ceil(8)];
        if self.completed.is_some() {
            for idx in 0..self.total {
                have[(idx as usize) / 8] |= 1 << (idx % 8);
            }
        } else {
            for idx in self.pieces.keys() {
                have[(*idx as usize) / 8] |= 1 << (*idx % 8);
            }
        }
        PieceBitmap {
            serial: self.serial.unwrap_or(0),
            total: self.total,
            have,
        }
    }

    pub fn offer(&mut self, piece: &CrlPiece) -> Result<ReassemblyStatus, RevocationError> {
        if !piece.verify(&self.ca_key) {
            return Err(RevocationError::BadPieceSignature);
        }
        match self.serial {
            Some(current) if piece.serial < current => return Ok(self.status()),
            Some(current) if piece.serial > current => self.reset_for(piece)?,
            None => self.reset_for(piece)?,
            _ => {}
        }
        if self.completed.is_some() {
            return Ok(self.status());
        }
        let (k, crl_len, shard) = piece.header()?;
        if k as usize != self.k
            || crl_len as usize != self.crl_len
            || piece.total != self.total
            || shard.len() != self.shard_bytes
            || piece.index >= self.total
        {
            return Err(RevocationError::MalformedPiece("inconsistent parameters"));
        }
        self.pieces.entry(piece.index).or_insert_with(|| shard.to_vec());
        if self.pieces.len() >= self.k {
            let shards: Vec<(usize, Vec<u8>)> = self
                .pieces
                .iter()
                .map(|(i, s)| (*i as usize, s.clone()))
                .collect();
            let code = ErasureCode::new(self.k, self.total as usize, self.shard_bytes)?;
            let padded = code.decode(&shards)?;
            let crl = Crl::from_bytes(self.issuer, &padded[..self.crl_len])?;
            if !crl.verify(&self.ca_key) {
                return Err(RevocationError::BadCrlSignature);
            }
            self.completed = Some(crl);
        }
        Ok(self.status())
    }

    fn reset_for(&mut self, piece: &CrlPiece) -> Result<(), RevocationError> {
        let (k, crl_len, shard) = piece.header()?;
        self.serial = Some(piece.serial);
        self.k = k as usize;
        self.crl_len = crl_len as usize;
        self.total = piece.total;
        self.shard_bytes = shard.len();
        self.pieces.clear();
        self.completed = None;
        Ok(())
    }

    fn status(&self) -> ReassemblyStatus {
        match &self.completed {
            Some(crl) => ReassemblyStatus::Complete(crl.clone()),
            None => ReassemblyStatus::Pending {
                have: self.pieces.len(),
                need: self.k,
            },
        }
    }

    pub fn completed(&self) -> Option<&Crl> {
        self.completed.as_ref()
    }
}

/// Which piece indices a node already holds; V2V peers answer with what is
/// missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceBitmap {
    pub serial: u32,
    pub total: u16,
    pub have: Vec<u8>,
}

impl PieceBitmap {
    pub fn contains(&self, index: u16) -> bool {
        self.have
            .get((index as usize) / 8)
            .map(|b| b & (1 << (index % 8)) != 0)
            .unwrap_or(false)
    }
}

/// V2V CRL relay: the pieces the responder holds and the requester lacks.
pub fn v2v_pieces_to_send<'a>(
    held: impl IntoIterator<Item = &'a CrlPiece>,
    request: &PieceBitmap,
) -> Vec<CrlPiece> {
    held.into_iter()
        .filter(|p| p.serial == request.serial && !request.contains(p.index))
        .cloned()
        .collect()
}

/// Round-robin piece emission for one RSU. Each RSU starts at its own offset
/// in the cycle so vehicles passing several RSUs collect mostly disjoint
/// pieces.
#[derive(Debug, Clone)]
pub struct RsuBroadcastSchedule {
    pieces: Vec<CrlPiece>,
    cursor: usize,
    rate_bps: u32,
}

impl RsuBroadcastSchedule {
    pub fn new(pieces: Vec<CrlPiece>, rate_bps: u32, start_offset: usize) -> Self {
        let cursor = if pieces.is_empty() { 0 } else { start_offset % pieces.len() };
        Self {
            pieces,
            cursor,
            rate_bps,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Emission cadence for the current head piece.
    pub fn period_ms(&self) -> TimeMs {
        self.pieces
            .first()
            .map(|p| p.airtime_ms(self.rate_bps))
            .unwrap_or(1000)
    }

    pub fn next_piece(&mut self) -> Option<CrlPiece> {
        if self.pieces.is_empty() {
            return None;
        }
        let piece = self.pieces[self.cursor].clone();
        self.cursor = (self.cursor + 1) % self.pieces.len();
        Some(piece)
    }

    /// Replace the cycle when the CA publishes a new CRL.
    pub fn replace(&mut self, pieces: Vec<CrlPiece>, start_offset: usize) {
        self.cursor = if pieces.is_empty() { 0 } else { start_offset % pieces.len() };
        self.pieces = pieces;
    }
}

/// Bloom-filter-compressed CRL: every revoked fingerprint queries true
/// (no false negatives); non-members query true at a configurable low rate.
///
/// Wire format: `[u32 serial][u32 m][u8 k][ceil(m/8) bytes][sig]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloomCrl {
    pub serial: u32,
    pub m_bits: u32,
    pub k_hashes: u8,
    pub bits: Vec<u8>,
    pub ca_signature: Signature,
}

/// Sizing for `n` entries at false-positive rate `p`:
/// `m = ceil(-n ln p / (ln 2)^2)`, `k = round(m/n * ln 2)`.
pub fn bloom_parameters(n: usize, target_fp_rate: f64) -> (u32, u8) {
    if n == 0 {
        return (8, 1);
    }
    let ln2 = std::f64::consts::LN_2;
    let m = (-(n as f64) * target_fp_rate.ln() / (ln2 * ln2)).ceil() as u32;
    let k = ((m as f64 / n as f64) * ln2).round().max(1.0) as u8;
    (m.max(8), k)
}

fn bloom_positions(fp: &Fingerprint, k: u8, m: u32) -> impl Iterator<Item = u32> {
    // double hashing over the fingerprint halves; h2 forced odd so the probe
    // sequence cycles through the whole table
    let h1 = u64::from_le_bytes(fp.0[..8].try_into().unwrap());
    let h2 = u64::from_le_bytes(fp.0[8..].try_into().unwrap()) | 1;
    let m = m as u64;
    (0..k as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as u32)
}

impl BloomCrl {
    fn signed_preimage(serial: u32, m_bits: u32, k_hashes: u8, bits: &[u8]) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_BLOOM_SIG)
            .put_u32(serial)
            .put_u32(m_bits)
            .put_u8(k_hashes)
            .put_bytes(bits);
        w.into_bytes()
    }

    pub fn build(
        fingerprints: &[Fingerprint],
        serial: u32,
        target_fp_rate: f64,
        ca_private: &PrivateKey,
    ) -> Result<Self, CryptoError> {
        let (m_bits, k_hashes) = bloom_parameters(fingerprints.len(), target_fp_rate);
        let mut bits = vec![0u8; (m_bits as usize).div_ceil(8)];
        for fp in fingerprints {
            for pos in bloom_positions(fp, k_hashes, m_bits) {
                bits[(pos / 8) as usize] |= 1 << (pos % 8);
            }
        }
        let preimage = Self::signed_preimage(serial, m_bits, k_hashes, &bits);
        let ca_signature = sign(ca_private, &preimage)?;
        Ok(Self {
            serial,
            m_bits,
            k_hashes,
            bits,
            ca_signature,
        })
    }

    pub fn from_crl(
        crl: &Crl,
        target_fp_rate: f64,
        ca_private: &PrivateKey,
    ) -> Result<Self, CryptoError> {
        Self::build(&crl.entries, crl.serial, target_fp_rate, ca_private)
    }

    pub fn query(&self, fp: &Fingerprint) -> bool {
        bloom_positions(fp, self.k_hashes, self.m_bits)
            .all(|pos| self.bits[(pos / 8) as usize] & (1 << (pos % 8)) != 0)
    }

    pub fn verify(&self, ca_key: &PublicKey) -> bool {
        let preimage = Self::signed_preimage(self.serial, self.m_bits, self.k_hashes, &self.bits);
        verify(ca_key, &preimage, &self.ca_signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.serial)
            .put_u32(self.m_bits)
            .put_u8(self.k_hashes)
            .put_bytes(&self.bits)
            .put_bytes(self.ca_signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let serial = r.get_u32()?;
        let m_bits = r.get_u32()?;
        let k_hashes = r.get_u8()?;
        let bits = r.get_bytes((m_bits as usize).div_ceil(8))?.to_vec();
        let ca_signature = Signature::from_bytes(r.get_rest());
        Ok(Self {
            serial,
            m_bits,
            k_hashes,
            bits,
            ca_signature,
        })
    }
}

impl crate::authority::CaState {
    /// CA-side piece encoding for its own CRLs.
    pub fn encode_crl_pieces(
        &self,
        crl: &Crl,
        piece_payload_bytes: usize,
        redundancy_factor: f64,
    ) -> Result<Vec<CrlPiece>, RevocationError> {
        encode_crl_pieces(crl, self.ca_private(), piece_payload_bytes, redundancy_factor)
    }

    /// CA-side Bloom compression for its own CRLs.
    pub fn build_bloom_crl(&self, crl: &Crl, target_fp_rate: f64) -> Result<BloomCrl, CryptoError> {
        BloomCrl::from_crl(crl, target_fp_rate, self.ca_private())
    }
}

/// Kill-protocol session state, driven by the CA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillSessionState {
    SentViaRsu,
    AwaitingAck,
    AckReceived,
    RdsFallback,
    Failed,
}

/// One attempt to kill a compromised HSM: send the signed command through
/// the nearest RSU, wait for the signed ACK, fall back to RDS broadcast on
/// timeout, give up after the repeat limit. `AckReceived` is terminal; no
/// event moves a session out of it.
#[derive(Debug, Clone)]
pub struct KillSession {
    pub target_device: u64,
    pub command: HsmCommand,
    target_long_term_key: PublicKey,
    state: KillSessionState,
    deadline_ms: TimeMs,
    timeout_ms: TimeMs,
    rds_attempts: u8,
    rds_limit: u8,
}

impl KillSession {
    pub fn new(
        command: HsmCommand,
        target_long_term_key: PublicKey,
        now: TimeMs,
        timeout_ms: TimeMs,
        rds_limit: u8,
    ) -> Self {
        Self {
            target_device: command.device_id,
            command,
            target_long_term_key,
            state: KillSessionState::SentViaRsu,
            deadline_ms: now + timeout_ms,
            timeout_ms,
            rds_attempts: 0,
            rds_limit,
        }
    }

    pub fn state(&self) -> KillSessionState {
        self.state
    }

    pub fn deadline_ms(&self) -> TimeMs {
        self.deadline_ms
    }

    /// The RSU transmitted the command; start the ACK timer.
    pub fn on_sent(&mut self, now: TimeMs) {
        if self.state == KillSessionState::SentViaRsu {
            self.state = KillSessionState::AwaitingAck;
            self.deadline_ms = now + self.timeout_ms;
        }
    }

    /// A (claimed) ACK arrived. Invalid signatures are ignored and the timer
    /// keeps running.
    pub fn on_ack(&mut self, ack: &KillAck) {
        if matches!(self.state, KillSessionState::AckReceived | KillSessionState::Failed) {
            return;
        }
        if ack.device_id != self.target_device {
            return;
        }
        if !ack.verify(&self.target_long_term_key) {
            return;
        }
        self.state = KillSessionState::AckReceived;
    }

    /// Timer expiry. Returns true when the session wants an RDS broadcast.
    pub fn on_timeout(&mut self, now: TimeMs) -> bool {
        if now < self.deadline_ms {
            return false;
        }
        match self.state {
            KillSessionState::SentViaRsu | KillSessionState::AwaitingAck => {
                self.state = KillSessionState::RdsFallback;
                self.rds_attempts = 1;
                self.deadline_ms = now + self.timeout_ms;
                true
            }
            KillSessionState::RdsFallback => {
                if self.rds_attempts >= self.rds_limit {
                    self.state = KillSessionState::Failed;
                    false
                } else {
                    self.rds_attempts += 1;
                    self.deadline_ms = now + self.timeout_ms;
                    true
                }
            }
            KillSessionState::AckReceived | KillSessionState::Failed => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authority::{CaConfig, CaState};
    use crate::crypto::{generate_keypair, SchemeKind};
    use crate::types::NodeId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ca_with_revocations(count: usize) -> (CaState, Crl) {
        let mut ca = CaState::new(CaId(1), 1, SchemeKind::KeyedHash, 7, CaConfig::default());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // install synthetic revocations directly through register+revoke of
        // long-term certs would be slow at this count; go through the
        // public API with pre-made fingerprints instead
        for i in 0..count {
            let kp = generate_keypair(SchemeKind::KeyedHash, rng.gen());
            let cert = ca
                .register_node(
                    NodeId(i as u64 + 1),
                    kp.public,
                    vec![crate::types::NodeRole::PrivateVehicle],
                    0,
                )
                .unwrap();
            ca.revoke(cert.fingerprint(), crate::authority::RevocationReason::Technical, 0)
                .unwrap();
        }
        let crl = ca.build_crl(0);
        (ca, crl)
    }

    #[test]
    fn piece_counts_match_operating_point() {
        // A 300 KB CRL at 512-byte payloads and 1.5x redundancy: 879 pieces,
        // any 586 reconstruct. 18747 entries put the canonical CRL at
        // exactly 300000 bytes with 32-byte signatures.
        let (ca, crl) = ca_with_revocations(18_747);
        assert_eq!(crl.to_bytes().len(), 300_000);
        let pieces = ca.encode_crl_pieces(&crl, 512, 1.5).unwrap();
        assert_eq!(pieces.len(), 879);

        // decode from a mixed subset of exactly 586 pieces
        let mut reassembler = CrlReassembler::new(CaId(1), ca.public_key().clone());
        let mut fed = 0;
        let mut done = false;
        for (i, piece) in pieces.iter().enumerate() {
            if i % 3 == 1 {
                continue; // drop a third of the stream
            }
            fed += 1;
            match reassembler.offer(piece).unwrap() {
                ReassemblyStatus::Complete(got) => {
                    assert_eq!(got, crl);
                    done = true;
                    break;
                }
                ReassemblyStatus::Pending { have, need } => {
                    assert_eq!(have, fed);
                    assert_eq!(need, 586);
                }
            }
        }
        assert!(done, "586 distinct pieces must reconstruct");
        assert_eq!(fed, 586);
    }

    #[test]
    fn empty_crl_is_one_piece() {
        let mut ca = CaState::new(CaId(1), 1, SchemeKind::KeyedHash, 7, CaConfig::default());
        let crl = ca.build_crl(0);
        let pieces = ca.encode_crl_pieces(&crl, 512, 1.5).unwrap();
        assert_eq!(pieces.len(), 1);
        let mut reassembler = CrlReassembler::new(CaId(1), ca.public_key().clone());
        let status = reassembler.offer(&pieces[0]).unwrap();
        assert_eq!(status, ReassemblyStatus::Complete(crl));
    }

    #[test]
    fn tampered_piece_discarded_but_rest_reconstructs() {
        let (ca, crl) = ca_with_revocations(100);
        let pieces = ca.encode_crl_pieces(&crl, 64, 2.0).unwrap();
        let mut reassembler = CrlReassembler::new(CaId(1), ca.public_key().clone());
        let mut corrupted = pieces[0].clone();
        corrupted.payload[PIECE_HEADER_BYTES + 1] ^= 0xFF;
        assert_eq!(
            reassembler.offer(&corrupted),
            Err(RevocationError::BadPieceSignature)
        );
        let mut done = false;
        for piece in pieces.iter().skip(1) {
            if let ReassemblyStatus::Complete(got) = reassembler.offer(piece).unwrap() {
                assert_eq!(got, crl);
                done = true;
                break;
            }
        }
        assert!(done);
    }

    #[test]
    fn duplicates_do_not_advance_progress() {
        let (ca, crl) = ca_with_revocations(50);
        let pieces = ca.encode_crl_pieces(&crl, 64, 1.5).unwrap();
        let need = pieces[0].header().unwrap().0 as usize;
        let mut reassembler = CrlReassembler::new(CaId(1), ca.public_key().clone());
        for _ in 0..10 {
            let status = reassembler.offer(&pieces[0]).unwrap();
            assert_eq!(status, ReassemblyStatus::Pending { have: 1, need });
        }
    }

    #[test]
    fn higher_serial_replaces_lower() {
        let (mut ca, crl1) = ca_with_revocations(40);
        let pieces1 = ca.encode_crl_pieces(&crl1, 64, 1.5).unwrap();
        let crl2 = ca.build_crl(10);
        let pieces2 = ca.encode_crl_pieces(&crl2, 64, 1.5).unwrap();

        let mut reassembler = CrlReassembler::new(CaId(1), ca.public_key().clone());
        reassembler.offer(&pieces1[0]).unwrap();
        reassembler.offer(&pieces2[0]).unwrap();
        assert_eq!(reassembler.serial(), Some(crl2.serial));
        // stale serial ignored without error
        let status = reassembler.offer(&pieces1[1]).unwrap();
        assert_eq!(status, ReassemblyStatus::Pending { have: 1, need: reassembler.needed_pieces() });
    }

    #[test]
    fn v2v_relay_sends_exactly_the_missing_pieces() {
        // redundancy 1.0: every data piece is needed, so a requester that
        // skipped 3 and 7 is still incomplete and missing exactly those
        let (ca, crl) = ca_with_revocations(60);
        let pieces = ca.encode_crl_pieces(&crl, 64, 1.0).unwrap();

        let mut requester = CrlReassembler::new(CaId(1), ca.public_key().clone());
        for (i, piece) in pieces.iter().enumerate() {
            if i == 3 || i == 7 {
                continue;
            }
            let _ = requester.offer(piece);
        }
        assert!(requester.completed().is_none());
        let bitmap = requester.have_bitmap();
        let to_send = v2v_pieces_to_send(pieces.iter(), &bitmap);
        let indices: Vec<u16> = to_send.iter().map(|p| p.index).collect();
        assert_eq!(indices, vec![3, 7]);

        // a complete requester needs nothing
        for piece in to_send {
            let _ = requester.offer(&piece);
        }
        assert!(requester.completed().is_some());
        let bitmap = requester.have_bitmap();
        assert!(v2v_pieces_to_send(pieces.iter(), &bitmap).is_empty());
    }

    #[test]
    fn broadcast_schedule_cadence_and_rotation() {
        let (ca, crl) = ca_with_revocations(1200);
        let pieces = ca.encode_crl_pieces(&crl, 512, 1.5).unwrap();
        let total = pieces.len();
        let mut schedule = RsuBroadcastSchedule::new(pieces, 2000, 5);
        // (512 + 64) * 8 / 2000 bps = 2.304 s per piece
        assert_eq!(schedule.period_ms(), 2304);
        let first = schedule.next_piece().unwrap();
        assert_eq!(first.index, 5);
        let mut seen = vec![false; total];
        seen[5] = true;
        for _ in 1..total {
            seen[schedule.next_piece().unwrap().index as usize] = true;
        }
        assert!(seen.iter().all(|s| *s), "round robin covers every piece");
        // 60 s in range at 2.304 s cadence: ~26 pieces
        assert_eq!(60_000 / schedule.period_ms(), 26);
    }

    #[test]
    fn bloom_sizing_matches_formulas() {
        let (m, k) = bloom_parameters(10_000, 0.001);
        assert_eq!(m, 143_776);
        assert_eq!(k, 10);
        assert_eq!(m.div_ceil(8), 17_972); // ~17.6 KB
    }

    #[test]
    fn bloom_zero_false_negatives_and_bounded_fp() {
        let ca_key = generate_keypair(SchemeKind::KeyedHash, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let members: Vec<Fingerprint> = (0..10_000)
            .map(|_| {
                let mut b = [0u8; 16];
                rng.fill(&mut b);
                Fingerprint(b)
            })
            .collect();
        let bloom = BloomCrl::build(&members, 1, 0.001, &ca_key.private).unwrap();
        assert!(bloom.verify(&ca_key.public));
        for fp in &members {
            assert!(bloom.query(fp), "member must always query true");
        }
        let mut false_positives = 0u32;
        let trials = 100_000;
        for _ in 0..trials {
            let mut b = [0u8; 16];
            rng.fill(&mut b);
            if bloom.query(&Fingerprint(b)) {
                false_positives += 1;
            }
        }
        let rate = false_positives as f64 / trials as f64;
        assert!(rate >= 0.0005 && rate <= 0.002, "fp rate {rate} out of range");
    }

    #[test]
    fn bloom_empty_filter_rejects_everything() {
        let ca_key = generate_keypair(SchemeKind::KeyedHash, 12);
        let bloom = BloomCrl::build(&[], 1, 0.001, &ca_key.private).unwrap();
        assert!(!bloom.query(&Fingerprint([1; 16])));
        assert!(!bloom.query(&Fingerprint([0xFF; 16])));
    }

    #[test]
    fn bloom_wire_round_trip() {
        let ca_key = generate_keypair(SchemeKind::KeyedHash, 13);
        let members = vec![Fingerprint([3; 16]), Fingerprint([4; 16])];
        let bloom = BloomCrl::build(&members, 9, 0.01, &ca_key.private).unwrap();
        let decoded = BloomCrl::from_bytes(&bloom.to_bytes()).unwrap();
        assert_eq!(decoded, bloom);
        assert!(decoded.verify(&ca_key.public));
    }

    fn kill_fixture() -> (KillSession, KillAck) {
        let root = generate_keypair(SchemeKind::KeyedHash, 20);
        let lt = generate_keypair(SchemeKind::KeyedHash, 21);
        let cmd = crate::hsm::make_command(
            crate::hsm::HsmCommandKind::Kill,
            33,
            vec![],
            1,
            &root.private,
        )
        .unwrap();
        let mut bay = None;
        crate::hsm::init_device(
            &mut bay,
            crate::hsm::HsmParams {
                device_id: 33,
                scheme: SchemeKind::KeyedHash,
                seed: 0,
                drift_ppm: 0,
            },
            root.public.clone(),
            generate_keypair(SchemeKind::KeyedHash, 22).public,
            lt.clone(),
        )
        .unwrap();
        let mut hsm = bay.unwrap();
        let crate::hsm::CommandOutcome::KillAck(ack) = hsm.process_command(&cmd).unwrap() else {
            panic!("expected ack");
        };
        let session = KillSession::new(cmd, lt.public, 0, DEFAULT_KILL_TIMEOUT_MS, 3);
        (session, ack)
    }

    #[test]
    fn kill_happy_path() {
        let (mut session, ack) = kill_fixture();
        session.on_sent(100);
        assert_eq!(session.state(), KillSessionState::AwaitingAck);
        session.on_ack(&ack);
        assert_eq!(session.state(), KillSessionState::AckReceived);
        // terminal: timeouts can no longer move the session
        assert!(!session.on_timeout(1_000_000));
        assert_eq!(session.state(), KillSessionState::AckReceived);
    }

    #[test]
    fn kill_timeout_falls_back_to_rds_then_fails() {
        let (mut session, _) = kill_fixture();
        session.on_sent(0);
        assert!(session.on_timeout(10_000));
        assert_eq!(session.state(), KillSessionState::RdsFallback);
        assert!(session.on_timeout(20_000)); // attempt 2
        assert!(session.on_timeout(30_000)); // attempt 3
        assert!(!session.on_timeout(40_000));
        assert_eq!(session.state(), KillSessionState::Failed);
    }

    #[test]
    fn invalid_ack_ignored() {
        let (mut session, ack) = kill_fixture();
        session.on_sent(0);
        let mut forged = ack.clone();
        forged.clock_ms += 1; // signature no longer matches
        session.on_ack(&forged);
        assert_eq!(session.state(), KillSessionState::AwaitingAck);
        session.on_ack(&ack);
        assert_eq!(session.state(), KillSessionState::AckReceived);
    }
}
