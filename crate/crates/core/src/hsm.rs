//! Emulated hardware security module.
//!
//! Holds private keys exclusively: key material enters at init or is
//! generated inside, and only public halves, signatures, timestamps, and
//! decrypted payloads ever come out. Every signature carries the internal
//! clock. Device management runs over commands signed by one of two CA root
//! keys, with a root-revocation state machine that can never lose both
//! roots, and a kill command that acknowledges first and then erases
//! everything.
//!
//! Pseudonym private keys live in slots. Activating a slot irreversibly
//! retires every lower-indexed slot in the same lane, so at most one key per
//! lane can ever sign at a time and no retired key signs again. The second
//! lane exists for traffic that is fully disjoint from safety messaging
//! (e.g. infotainment) and follows the same monotone discipline.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    decrypt_with, generate_keypair_from_seed32, sign, verify, CryptoError, KeyPair, PublicKey,
    Signature,
};
use crate::crypto::cert::Lifetime;
use crate::types::TimeMs;
use crate::wire::{Reader, Writer, WireError};

use thiserror::Error;

const DOMAIN_CMD_SIG: &[u8] = b"vanetsec.hsmcmd.v1";
const DOMAIN_ACK_SIG: &[u8] = b"vanetsec.hsmack.v1";
const ACK_MAGIC: &[u8; 7] = b"KILLACK";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HsmError {
    #[error("already initialized")]
    AlreadyInitialized,
    #[error("device dead")]
    DeviceDead,
    #[error("root keys must be distinct")]
    DistinctRootsRequired,
    #[error("slot retired")]
    SlotRetired,
    #[error("unknown slot")]
    UnknownSlot,
    #[error("no active pseudonym")]
    NoActivePseudonym,
    #[error("pseudonym expired")]
    PseudonymExpired,
    #[error("unauthenticated command")]
    UnauthenticatedCommand,
    #[error("root revoked")]
    RootRevoked,
    #[error("forbidden")]
    Forbidden,
    #[error("command not addressed to this device")]
    WrongDevice,
    #[error("malformed command payload")]
    MalformedPayload,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Slot lanes. Simultaneous pseudonyms are only permitted for fully disjoint
/// traffic, so each lane is independently monotone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    Safety,
    Infotainment,
}

impl TrafficClass {
    fn index(self) -> usize {
        match self {
            TrafficClass::Safety => 0,
            TrafficClass::Infotainment => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSelector {
    Active(TrafficClass),
    LongTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsmCommandKind {
    Kill,
    RevokeRootK1,
    RevokeRootK2,
    LoadRoot,
    UpdateLongTermKey,
    ClockSync,
}

impl HsmCommandKind {
    pub fn code(self) -> u8 {
        match self {
            HsmCommandKind::Kill => 1,
            HsmCommandKind::RevokeRootK1 => 2,
            HsmCommandKind::RevokeRootK2 => 3,
            HsmCommandKind::LoadRoot => 4,
            HsmCommandKind::UpdateLongTermKey => 5,
            HsmCommandKind::ClockSync => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(HsmCommandKind::Kill),
            2 => Some(HsmCommandKind::RevokeRootK1),
            3 => Some(HsmCommandKind::RevokeRootK2),
            4 => Some(HsmCommandKind::LoadRoot),
            5 => Some(HsmCommandKind::UpdateLongTermKey),
            6 => Some(HsmCommandKind::ClockSync),
            _ => None,
        }
    }
}

/// CA-signed device management command.
///
/// Canonical bytes: `[u8 kind][u64 device_id][u32 payload_len][payload]
/// [u8 root_index][sig]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsmCommand {
    pub kind: HsmCommandKind,
    pub device_id: u64,
    pub payload: Vec<u8>,
    pub root_index: u8,
    pub signature: Signature,
}

impl HsmCommand {
    pub(crate) fn signed_preimage(
        kind: HsmCommandKind,
        device_id: u64,
        payload: &[u8],
        root_index: u8,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_CMD_SIG)
            .put_u8(kind.code())
            .put_u64(device_id)
            .put_len32_bytes(payload)
            .put_u8(root_index);
        w.into_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(self.kind.code())
            .put_u64(self.device_id)
            .put_len32_bytes(&self.payload)
            .put_u8(self.root_index)
            .put_bytes(self.signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let kind = HsmCommandKind::from_code(r.get_u8()?)
            .ok_or(WireError::InvalidValue("command kind"))?;
        let device_id = r.get_u64()?;
        let payload = r.get_len32_bytes()?.to_vec();
        let root_index = r.get_u8()?;
        let signature = Signature::from_bytes(r.get_rest());
        Ok(Self {
            kind,
            device_id,
            payload,
            root_index,
            signature,
        })
    }
}

/// Kill acknowledgment: `[u64 device_id]["KILLACK"][i64 clock_ms][sig]`,
/// signed by the long-term key as the device's final output.
#[derive(Debug, Clone, PartialEq)]
pub struct KillAck {
    pub device_id: u64,
    pub clock_ms: TimeMs,
    pub signature: Signature,
}

impl KillAck {
    fn signed_preimage(device_id: u64, clock_ms: TimeMs) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(DOMAIN_ACK_SIG)
            .put_u64(device_id)
            .put_bytes(ACK_MAGIC)
            .put_i64(clock_ms);
        w.into_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u64(self.device_id)
            .put_bytes(ACK_MAGIC)
            .put_i64(self.clock_ms)
            .put_bytes(self.signature.as_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let device_id = r.get_u64()?;
        let magic = r.get_bytes(7)?;
        if magic != ACK_MAGIC {
            return Err(WireError::InvalidValue("ack magic"));
        }
        let clock_ms = r.get_i64()?;
        let signature = Signature::from_bytes(r.get_rest());
        Ok(Self {
            device_id,
            clock_ms,
            signature,
        })
    }

    pub fn verify(&self, long_term_key: &PublicKey) -> bool {
        let preimage = Self::signed_preimage(self.device_id, self.clock_ms);
        verify(long_term_key, &preimage, &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandOutcome {
    Applied,
    /// The signed ACK, emitted before any erasure happened.
    KillAck(KillAck),
    /// Killed devices ignore everything without a reply.
    Silence,
}

#[derive(Debug, Clone, PartialEq)]
enum RootSlot {
    Live(PublicKey),
    Revoked,
}

#[derive(Debug, Clone)]
struct Slot {
    keypair: KeyPair,
    lifetime: Option<Lifetime>,
}

#[derive(Debug, Clone, Default)]
struct Lane {
    slots: Vec<Slot>,
    active: Option<usize>,
    /// Lowest index that is not retired. Everything below has signed its
    /// last message.
    floor: usize,
}

impl Lane {
    fn activate(&mut self, index: usize, lifetime: Lifetime) -> Result<(), HsmError> {
        if index >= self.slots.len() {
            return Err(HsmError::UnknownSlot);
        }
        if self.active == Some(index) {
            return Ok(());
        }
        if index < self.floor {
            return Err(HsmError::SlotRetired);
        }
        self.slots[index].lifetime = Some(lifetime);
        self.floor = index;
        self.active = Some(index);
        Ok(())
    }

    fn is_retired(&self, index: usize) -> bool {
        index < self.floor
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HsmParams {
    pub device_id: u64,
    pub scheme: crate::crypto::SchemeKind,
    /// Seed for internal key generation.
    pub seed: u64,
    /// Constant clock drift in parts per million (default 0).
    pub drift_ppm: i64,
}

/// One emulated HSM instance. Single-owner: the node that holds it serializes
/// all calls.
#[derive(Debug, Clone)]
pub struct Hsm {
    device_id: u64,
    scheme: crate::crypto::SchemeKind,
    long_term: Option<KeyPair>,
    roots: [RootSlot; 2],
    lanes: [Lane; 2],
    clock_us: i64,
    drift_ppm: i64,
    killed: bool,
    rng: ChaCha20Rng,
}

/// Initialize a device in a secure environment: both root public keys and
/// the long-term key pair are loaded, the clock starts at zero.
pub fn init_device(
    bay: &mut Option<Hsm>,
    params: HsmParams,
    root_k1: PublicKey,
    root_k2: PublicKey,
    long_term: KeyPair,
) -> Result<(), HsmError> {
    if bay.is_some() {
        return Err(HsmError::AlreadyInitialized);
    }
    if root_k1 == root_k2 {
        return Err(HsmError::DistinctRootsRequired);
    }
    *bay = Some(Hsm {
        device_id: params.device_id,
        scheme: params.scheme,
        long_term: Some(long_term),
        roots: [RootSlot::Live(root_k1), RootSlot::Live(root_k2)],
        lanes: [Lane::default(), Lane::default()],
        clock_us: 0,
        drift_ppm: params.drift_ppm,
        killed: false,
        rng: ChaCha20Rng::seed_from_u64(params.seed ^ params.device_id),
    });
    Ok(())
}

impl Hsm {
    pub fn device_id(&self) -> u64 {
        self.device_id
    }

    pub fn is_killed(&self) -> bool {
        self.killed
    }

    pub fn clock_ms(&self) -> TimeMs {
        self.clock_us.div_euclid(1000)
    }

    pub fn scheme(&self) -> crate::crypto::SchemeKind {
        self.scheme
    }

    pub fn long_term_public(&self) -> Result<&PublicKey, HsmError> {
        self.long_term
            .as_ref()
            .map(|kp| &kp.public)
            .ok_or(HsmError::DeviceDead)
    }

    fn check_alive(&self) -> Result<(), HsmError> {
        if self.killed {
            Err(HsmError::DeviceDead)
        } else {
            Ok(())
        }
    }

    /// Advance the internal clock. Drift scales the nominal delta; the clock
    /// only ever moves forward.
    pub fn clock_tick(&mut self, delta_ms: i64) {
        if self.killed || delta_ms <= 0 {
            return;
        }
        let delta_us = delta_ms * 1000;
        self.clock_us += delta_us + delta_us * self.drift_ppm / 1_000_000;
    }

    /// Microsecond-resolution tick used by the simulator's event loop.
    pub fn clock_tick_us(&mut self, delta_us: i64) {
        if self.killed || delta_us <= 0 {
            return;
        }
        self.clock_us += delta_us + delta_us * self.drift_ppm / 1_000_000;
    }

    /// Generate fresh short-term key pairs; only the public halves leave the
    /// device. New slots start inactive.
    pub fn generate_short_term_keys(
        &mut self,
        count: usize,
        lane: TrafficClass,
    ) -> Result<Vec<PublicKey>, HsmError> {
        self.check_alive()?;
        let lane = &mut self.lanes[lane.index()];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut seed = [0u8; 32];
            self.rng.fill_bytes(&mut seed);
            let kp = generate_keypair_from_seed32(self.scheme, &seed);
            out.push(kp.public.clone());
            lane.slots.push(Slot {
                keypair: kp,
                lifetime: None,
            });
        }
        Ok(out)
    }

    pub fn slot_count(&self, lane: TrafficClass) -> usize {
        self.lanes[lane.index()].slots.len()
    }

    pub fn active_slot(&self, lane: TrafficClass) -> Option<usize> {
        self.lanes[lane.index()].active
    }

    pub fn slot_retired(&self, lane: TrafficClass, index: usize) -> bool {
        self.lanes[lane.index()].is_retired(index)
    }

    /// Make `index` the signing slot for its lane, retiring all lower
    /// indices permanently. The lifetime comes from the pseudonym matching
    /// this slot. Re-activating the current slot is a no-op.
    pub fn activate_slot(
        &mut self,
        lane: TrafficClass,
        index: usize,
        lifetime: Lifetime,
    ) -> Result<(), HsmError> {
        self.check_alive()?;
        self.lanes[lane.index()].activate(index, lifetime)
    }

    /// Sign `message || clock_ms` and return the timestamp used. Active-slot
    /// signing additionally requires the slot's lifetime to contain the
    /// clock.
    pub fn sign(
        &mut self,
        selector: SlotSelector,
        message: &[u8],
    ) -> Result<(Signature, TimeMs), HsmError> {
        self.check_alive()?;
        let now = self.clock_ms();
        let key = match selector {
            SlotSelector::LongTerm => {
                &self
                    .long_term
                    .as_ref()
                    .ok_or(HsmError::DeviceDead)?
                    .private
            }
            SlotSelector::Active(class) => {
                let lane = &self.lanes[class.index()];
                let idx = lane.active.ok_or(HsmError::NoActivePseudonym)?;
                let slot = &lane.slots[idx];
                let lifetime = slot.lifetime.ok_or(HsmError::NoActivePseudonym)?;
                if !lifetime.contains(now) {
                    return Err(HsmError::PseudonymExpired);
                }
                &slot.keypair.private
            }
        };
        let mut signed = Vec::with_capacity(message.len() + 8);
        signed.extend_from_slice(message);
        signed.extend_from_slice(&now.to_le_bytes());
        let sig = sign(key, &signed)?;
        Ok((sig, now))
    }

    /// Decrypt a payload sealed to this device's long-term public key.
    pub fn decrypt(&self, ciphertext: &[u8]) -> Result<Vec<u8>, HsmError> {
        self.check_alive()?;
        let kp = self.long_term.as_ref().ok_or(HsmError::DeviceDead)?;
        Ok(decrypt_with(kp, ciphertext)?)
    }

    /// Apply a CA command. A killed device ignores everything silently.
    pub fn process_command(&mut self, cmd: &HsmCommand) -> Result<CommandOutcome, HsmError> {
        if self.killed {
            return Ok(CommandOutcome::Silence);
        }
        if cmd.device_id != self.device_id {
            return Err(HsmError::WrongDevice);
        }
        if !(1..=2).contains(&cmd.root_index) {
            return Err(HsmError::UnauthenticatedCommand);
        }
        let signer = match &self.roots[(cmd.root_index - 1) as usize] {
            RootSlot::Live(pk) => pk.clone(),
            RootSlot::Revoked => return Err(HsmError::RootRevoked),
        };
        let preimage =
            HsmCommand::signed_preimage(cmd.kind, cmd.device_id, &cmd.payload, cmd.root_index);
        if !verify(&signer, &preimage, &cmd.signature) {
            return Err(HsmError::UnauthenticatedCommand);
        }

        match cmd.kind {
            HsmCommandKind::Kill => {
                let ack = self.build_ack()?;
                self.erase();
                Ok(CommandOutcome::KillAck(ack))
            }
            HsmCommandKind::RevokeRootK1 => self.revoke_root(1, cmd.root_index),
            HsmCommandKind::RevokeRootK2 => self.revoke_root(2, cmd.root_index),
            HsmCommandKind::LoadRoot => {
                let mut r = Reader::new(&cmd.payload);
                let which = r.get_u8().map_err(|_| HsmError::MalformedPayload)?;
                let pk_bytes = r.get_len16_bytes().map_err(|_| HsmError::MalformedPayload)?;
                let new_key =
                    PublicKey::from_bytes(pk_bytes).map_err(|_| HsmError::MalformedPayload)?;
                if !(1..=2).contains(&which) {
                    return Err(HsmError::MalformedPayload);
                }
                // Only a revoked slot can be reloaded, and only under the
                // other (live) root's signature.
                if which == cmd.root_index {
                    return Err(HsmError::Forbidden);
                }
                let slot = &mut self.roots[(which - 1) as usize];
                if !matches!(slot, RootSlot::Revoked) {
                    return Err(HsmError::Forbidden);
                }
                *slot = RootSlot::Live(new_key);
                Ok(CommandOutcome::Applied)
            }
            HsmCommandKind::UpdateLongTermKey => {
                let seed: [u8; 32] = cmd
                    .payload
                    .as_slice()
                    .try_into()
                    .map_err(|_| HsmError::MalformedPayload)?;
                self.long_term = Some(generate_keypair_from_seed32(self.scheme, &seed));
                Ok(CommandOutcome::Applied)
            }
            HsmCommandKind::ClockSync => {
                let mut r = Reader::new(&cmd.payload);
                let target_ms = r.get_i64().map_err(|_| HsmError::MalformedPayload)?;
                // Forward only; a sync into the past leaves the clock alone.
                self.clock_us = self.clock_us.max(target_ms * 1000);
                Ok(CommandOutcome::Applied)
            }
        }
    }

    fn revoke_root(&mut self, target: u8, signed_with: u8) -> Result<CommandOutcome, HsmError> {
        // A root revocation must be signed with the targeted root itself.
        if signed_with != target {
            return Err(HsmError::Forbidden);
        }
        let other = &self.roots[(2 - target) as usize];
        if matches!(other, RootSlot::Revoked) {
            // Never leave the device without a live root.
            return Err(HsmError::Forbidden);
        }
        self.roots[(target - 1) as usize] = RootSlot::Revoked;
        Ok(CommandOutcome::Applied)
    }

    fn build_ack(&mut self) -> Result<KillAck, HsmError> {
        let clock_ms = self.clock_ms();
        let preimage = KillAck::signed_preimage(self.device_id, clock_ms);
        let kp = self.long_term.as_ref().ok_or(HsmError::DeviceDead)?;
        let signature = sign(&kp.private, &preimage)?;
        Ok(KillAck {
            device_id: self.device_id,
            clock_ms,
            signature,
        })
    }

    fn erase(&mut self) {
        self.long_term = None;
        self.roots = [RootSlot::Revoked, RootSlot::Revoked];
        self.lanes = [Lane::default(), Lane::default()];
        self.killed = true;
    }

    /// Tamper response: immediate erasure, no ACK.
    pub fn tamper(&mut self) {
        self.erase();
    }

    /// All private key material currently inside the device. Test-only: lets
    /// custody checks scan outputs for leaked secrets.
    #[doc(hidden)]
    pub fn secret_material_for_tests(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(kp) = &self.long_term {
            out.push(kp.private.secret_material().to_vec());
        }
        for lane in &self.lanes {
            for slot in &lane.slots {
                out.push(slot.keypair.private.secret_material().to_vec());
            }
        }
        out
    }
}

/// Build and sign a command the way the CA does. Lives here so the command
/// byte layout has a single owner; the authority module re-exports it.
pub fn make_command(
    kind: HsmCommandKind,
    device_id: u64,
    payload: Vec<u8>,
    root_index: u8,
    root_private: &crate::crypto::PrivateKey,
) -> Result<HsmCommand, CryptoError> {
    let preimage = HsmCommand::signed_preimage(kind, device_id, &payload, root_index);
    let signature = sign(root_private, &preimage)?;
    Ok(HsmCommand {
        kind,
        device_id,
        payload,
        root_index,
        signature,
    })
}

pub fn load_root_payload(which: u8, new_key: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_u8(which).put_len16_bytes(new_key.as_bytes());
    w.into_bytes()
}

pub fn clock_sync_payload(target_ms: TimeMs) -> Vec<u8> {
    target_ms.to_le_bytes().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, SchemeKind};
    use rand::Rng;

    fn roots() -> (KeyPair, KeyPair) {
        (
            generate_keypair(SchemeKind::KeyedHash, 9001),
            generate_keypair(SchemeKind::KeyedHash, 9002),
        )
    }

    fn fresh_hsm() -> (Hsm, KeyPair, KeyPair) {
        let (k1, k2) = roots();
        let lt = generate_keypair(SchemeKind::KeyedHash, 500);
        let mut bay = None;
        init_device(
            &mut bay,
            HsmParams {
                device_id: 77,
                scheme: SchemeKind::KeyedHash,
                seed: 3,
                drift_ppm: 0,
            },
            k1.public.clone(),
            k2.public.clone(),
            lt,
        )
        .unwrap();
        (bay.unwrap(), k1, k2)
    }

    fn cmd(
        kind: HsmCommandKind,
        payload: Vec<u8>,
        root_index: u8,
        root: &KeyPair,
    ) -> HsmCommand {
        make_command(kind, 77, payload, root_index, &root.private).unwrap()
    }

    #[test]
    fn init_rejects_identical_roots() {
        let (k1, _) = roots();
        let lt = generate_keypair(SchemeKind::KeyedHash, 1);
        let mut bay = None;
        assert_eq!(
            init_device(
                &mut bay,
                HsmParams {
                    device_id: 1,
                    scheme: SchemeKind::KeyedHash,
                    seed: 0,
                    drift_ppm: 0
                },
                k1.public.clone(),
                k1.public.clone(),
                lt,
            ),
            Err(HsmError::DistinctRootsRequired)
        );
    }

    #[test]
    fn reinit_of_live_device_rejected() {
        let (hsm, k1, k2) = fresh_hsm();
        let lt = generate_keypair(SchemeKind::KeyedHash, 2);
        let mut bay = Some(hsm);
        assert_eq!(
            init_device(
                &mut bay,
                HsmParams {
                    device_id: 77,
                    scheme: SchemeKind::KeyedHash,
                    seed: 0,
                    drift_ppm: 0
                },
                k1.public,
                k2.public,
                lt,
            ),
            Err(HsmError::AlreadyInitialized)
        );
    }

    #[test]
    fn keygen_outputs_only_public_halves() {
        let (mut hsm, _, _) = fresh_hsm();
        let keys = hsm.generate_short_term_keys(10, TrafficClass::Safety).unwrap();
        assert_eq!(keys.len(), 10);
        assert_eq!(hsm.slot_count(TrafficClass::Safety), 10);
        let secrets = hsm.secret_material_for_tests();
        for pk in &keys {
            for secret in &secrets {
                assert!(!contains(pk.as_bytes(), secret));
            }
        }
    }

    fn contains(haystack: &[u8], needle: &[u8]) -> bool {
        !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn retired_slot_never_signs_again() {
        let (mut hsm, _, _) = fresh_hsm();
        hsm.generate_short_term_keys(3, TrafficClass::Safety).unwrap();
        hsm.activate_slot(TrafficClass::Safety, 0, Lifetime::new(0, 1000)).unwrap();
        hsm.activate_slot(TrafficClass::Safety, 1, Lifetime::new(0, 1000)).unwrap();
        assert_eq!(
            hsm.activate_slot(TrafficClass::Safety, 0, Lifetime::new(0, 1000)),
            Err(HsmError::SlotRetired)
        );
        // Re-activating the current slot is a no-op.
        assert!(hsm.activate_slot(TrafficClass::Safety, 1, Lifetime::new(0, 1000)).is_ok());
        assert_eq!(hsm.active_slot(TrafficClass::Safety), Some(1));
    }

    #[test]
    fn signature_covers_clock() {
        let (mut hsm, _, _) = fresh_hsm();
        hsm.generate_short_term_keys(1, TrafficClass::Safety).unwrap();
        hsm.activate_slot(TrafficClass::Safety, 0, Lifetime::new(0, 60_000)).unwrap();
        hsm.clock_tick(5000);
        let (sig, ts) = hsm.sign(SlotSelector::Active(TrafficClass::Safety), b"beacon").unwrap();
        assert_eq!(ts, 5000);
        // hand-verify against the slot public key
        let lane_pub = {
            let (mut probe, _, _) = fresh_hsm();
            probe.generate_short_term_keys(1, TrafficClass::Safety).unwrap()[0].clone()
        };
        let mut good = b"beacon".to_vec();
        good.extend_from_slice(&5000i64.to_le_bytes());
        assert!(verify(&lane_pub, &good, &sig));
        let mut shifted = b"beacon".to_vec();
        shifted.extend_from_slice(&5001i64.to_le_bytes());
        assert!(!verify(&lane_pub, &shifted, &sig));
    }

    #[test]
    fn expired_slot_refuses_to_sign() {
        let (mut hsm, _, _) = fresh_hsm();
        hsm.generate_short_term_keys(1, TrafficClass::Safety).unwrap();
        hsm.activate_slot(TrafficClass::Safety, 0, Lifetime::new(0, 1000)).unwrap();
        hsm.clock_tick(2000);
        assert_eq!(
            hsm.sign(SlotSelector::Active(TrafficClass::Safety), b"m"),
            Err(HsmError::PseudonymExpired)
        );
    }

    #[test]
    fn kill_acks_then_goes_dark() {
        let (mut hsm, k1, _) = fresh_hsm();
        let lt_pub = hsm.long_term_public().unwrap().clone();
        hsm.clock_tick(1234);
        let outcome = hsm.process_command(&cmd(HsmCommandKind::Kill, vec![], 1, &k1)).unwrap();
        let CommandOutcome::KillAck(ack) = outcome else {
            panic!("expected ack");
        };
        assert_eq!(ack.clock_ms, 1234);
        assert!(ack.verify(&lt_pub));
        // everything afterwards: dead or silent
        assert_eq!(hsm.sign(SlotSelector::LongTerm, b"m"), Err(HsmError::DeviceDead));
        assert_eq!(hsm.decrypt(b"x"), Err(HsmError::DeviceDead));
        assert_eq!(
            hsm.generate_short_term_keys(1, TrafficClass::Safety),
            Err(HsmError::DeviceDead)
        );
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::Kill, vec![], 1, &k1)),
            Ok(CommandOutcome::Silence)
        );
        hsm.clock_tick(50); // ignored
        assert!(hsm.is_killed());
    }

    #[test]
    fn root_state_machine_rules() {
        let (mut hsm, k1, k2) = fresh_hsm();
        // revoke K1 signed with K2: forbidden
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::RevokeRootK1, vec![], 2, &k2)),
            Err(HsmError::Forbidden)
        );
        // revoke K1 signed with K1: applied
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::RevokeRootK1, vec![], 1, &k1)),
            Ok(CommandOutcome::Applied)
        );
        // anything signed with K1 now: root revoked
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::ClockSync, clock_sync_payload(1), 1, &k1)),
            Err(HsmError::RootRevoked)
        );
        // revoking K2 with K2 would leave no live root: forbidden
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::RevokeRootK2, vec![], 2, &k2)),
            Err(HsmError::Forbidden)
        );
        // load a replacement K1', signed with K2
        let k1_new = generate_keypair(SchemeKind::KeyedHash, 9003);
        let payload = load_root_payload(1, &k1_new.public);
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::LoadRoot, payload, 2, &k2)),
            Ok(CommandOutcome::Applied)
        );
        // commands now verify under K1'
        assert_eq!(
            hsm.process_command(&cmd(
                HsmCommandKind::ClockSync,
                clock_sync_payload(7),
                1,
                &k1_new
            )),
            Ok(CommandOutcome::Applied)
        );
        assert_eq!(hsm.clock_ms(), 7);
    }

    #[test]
    fn load_root_over_live_slot_forbidden() {
        let (mut hsm, _, k2) = fresh_hsm();
        let replacement = generate_keypair(SchemeKind::KeyedHash, 9004);
        let payload = load_root_payload(1, &replacement.public);
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::LoadRoot, payload, 2, &k2)),
            Err(HsmError::Forbidden)
        );
    }

    #[test]
    fn forged_command_rejected() {
        let (mut hsm, _, _) = fresh_hsm();
        let stranger = generate_keypair(SchemeKind::KeyedHash, 4242);
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::Kill, vec![], 1, &stranger)),
            Err(HsmError::UnauthenticatedCommand)
        );
        assert!(!hsm.is_killed());
    }

    #[test]
    fn clock_sync_never_goes_backward() {
        let (mut hsm, k1, _) = fresh_hsm();
        hsm.clock_tick(10_000);
        assert_eq!(
            hsm.process_command(&cmd(HsmCommandKind::ClockSync, clock_sync_payload(5000), 1, &k1)),
            Ok(CommandOutcome::Applied)
        );
        assert_eq!(hsm.clock_ms(), 10_000);
        assert_eq!(
            hsm.process_command(&cmd(
                HsmCommandKind::ClockSync,
                clock_sync_payload(20_000),
                1,
                &k1
            )),
            Ok(CommandOutcome::Applied)
        );
        assert_eq!(hsm.clock_ms(), 20_000);
    }

    #[test]
    fn tick_ten_from_zero() {
        let (mut hsm, _, _) = fresh_hsm();
        hsm.clock_tick(10);
        assert_eq!(hsm.clock_ms(), 10);
    }

    #[test]
    fn drift_scales_ticks() {
        let (k1, k2) = roots();
        let lt = generate_keypair(SchemeKind::KeyedHash, 11);
        let mut bay = None;
        init_device(
            &mut bay,
            HsmParams {
                device_id: 5,
                scheme: SchemeKind::KeyedHash,
                seed: 0,
                drift_ppm: 1000, // 0.1% fast
            },
            k1.public,
            k2.public,
            lt,
        )
        .unwrap();
        let mut hsm = bay.unwrap();
        hsm.clock_tick(10_000);
        assert_eq!(hsm.clock_ms(), 10_010);
    }

    #[test]
    fn command_wire_round_trip() {
        let (_, k1, _) = fresh_hsm();
        let c = cmd(HsmCommandKind::LoadRoot, vec![1, 2, 3], 1, &k1);
        let decoded = HsmCommand::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(decoded, c);
    }

    #[test]
    fn lanes_are_independent() {
        let (mut hsm, _, _) = fresh_hsm();
        hsm.generate_short_term_keys(2, TrafficClass::Safety).unwrap();
        hsm.generate_short_term_keys(2, TrafficClass::Infotainment).unwrap();
        hsm.activate_slot(TrafficClass::Safety, 1, Lifetime::new(0, 100)).unwrap();
        // Safety lane watermark does not retire infotainment slots.
        assert!(hsm
            .activate_slot(TrafficClass::Infotainment, 0, Lifetime::new(0, 100))
            .is_ok());
        assert_eq!(hsm.active_slot(TrafficClass::Safety), Some(1));
        assert_eq!(hsm.active_slot(TrafficClass::Infotainment), Some(0));
    }

    #[test]
    fn custody_fuzz_no_private_bytes_in_outputs() {
        // Random op sequences; collect every output byte string and scan for
        // any stored secret. Ed25519 so public keys are real derivations.
        let (k1, k2) = roots();
        let lt = generate_keypair(SchemeKind::Ed25519, 31);
        let mut bay = None;
        init_device(
            &mut bay,
            HsmParams {
                device_id: 9,
                scheme: SchemeKind::Ed25519,
                seed: 77,
                drift_ppm: 0,
            },
            k1.public.clone(),
            k2.public.clone(),
            lt,
        )
        .unwrap();
        let mut hsm = bay.unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(123);
        let mut outputs: Vec<Vec<u8>> = Vec::new();
        for step in 0..400 {
            match rng.gen_range(0..5) {
                0 => {
                    if let Ok(keys) = hsm.generate_short_term_keys(1, TrafficClass::Safety) {
                        outputs.extend(keys.iter().map(|k| k.as_bytes().to_vec()));
                    }
                }
                1 => {
                    let idx = rng.gen_range(0..hsm.slot_count(TrafficClass::Safety).max(1));
                    let _ = hsm.activate_slot(
                        TrafficClass::Safety,
                        idx,
                        Lifetime::new(0, 1_000_000),
                    );
                }
                2 => {
                    if let Ok((sig, ts)) =
                        hsm.sign(SlotSelector::Active(TrafficClass::Safety), b"payload")
                    {
                        outputs.push(sig.as_bytes().to_vec());
                        outputs.push(ts.to_le_bytes().to_vec());
                    }
                }
                3 => {
                    if let Ok((sig, _)) = hsm.sign(SlotSelector::LongTerm, &[step as u8]) {
                        outputs.push(sig.as_bytes().to_vec());
                    }
                }
                _ => hsm.clock_tick(rng.gen_range(1..50)),
            }
            let secrets = hsm.secret_material_for_tests();
            for out in &outputs {
                for secret in &secrets {
                    assert!(!contains(out, secret), "private key bytes leaked");
                }
            }
        }
    }
}
