//! Vehicle / RSU runtime.
//!
//! Everything a node does on the air: pseudonym handling and refill against
//! its CA, secure beaconing, beacon verification (credential, revocation,
//! signature, freshness, distance consistency — each failure gets its own
//! reject reason for metrics), secure geocast (greedy forwarding toward the
//! region, flooding inside it, stacked hop signatures, per-origin rate
//! limiting), position plausibility feeding misbehavior detection, LEAVE
//! voting rounds with eviction reports to the CA, and CRL consumption
//! (explicit and Bloom-compressed).
//!
//! Private vehicles sign with their active pseudonym; infrastructure signs
//! with its long-term certificate, since it is meant to be identifiable.

pub mod geocast;
pub mod neighbors;
pub mod pool;
pub mod util;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::authority::{
    refill_sign_input, vote_sign_input, AuthorityError, CaState, Crl, EvictionEvent, LeaveVote,
    PseudonymSet, RefillRequest,
};
use crate::crypto::cert::{Certificate, Credential, Fingerprint};
use crate::crypto::message::{sign_input, BeaconPayload, GeoStamp, SignedMessage};
use crate::crypto::{CryptoError, PublicKey};
use crate::hsm::{Hsm, HsmCommand, HsmError, KillAck, SlotSelector, TrafficClass};
use crate::revocation::BloomCrl;
use crate::types::{CaId, NodeId, NodeRole, Position, TimeMs};
use crate::wire::WireError;

use geocast::{GeocastMessage, HopSignature, Region};
use neighbors::{
    neighbor_check, position_plausibility, NeighborEntry, NeighborTable, NeighborVerdict,
    NotNeighborReason, PlausibilityConfig, PlausibilityVerdict,
};
use pool::{PoolError, PseudonymPool};
use util::{BoundedLru, TokenBucket};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("no credentials")]
    NoCredentials,
    #[error("pool exhausted")]
    PoolExhausted,
    #[error(transparent)]
    Hsm(#[from] HsmError),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl From<PoolError> for NodeError {
    fn from(e: PoolError) -> Self {
        match e {
            PoolError::NoCredentials => NodeError::NoCredentials,
            PoolError::PoolExhausted => NodeError::PoolExhausted,
        }
    }
}

/// Why an incoming message was rejected. Each verification stage has its own
/// reason so metrics can attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    UnknownCa,
    InvalidCredential,
    Revoked,
    Blacklisted,
    BadSignature,
    Stale,
    NotNeighbor,
    ClockAnomaly,
    Malformed,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::UnknownCa => "unknown_ca",
            RejectReason::InvalidCredential => "invalid_credential",
            RejectReason::Revoked => "revoked",
            RejectReason::Blacklisted => "blacklisted",
            RejectReason::BadSignature => "bad_signature",
            RejectReason::Stale => "stale",
            RejectReason::NotNeighbor => "not_neighbor",
            RejectReason::ClockAnomaly => "clock_anomaly",
            RejectReason::Malformed => "malformed",
        }
    }
}

/// Geocast forwarding outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardDecision {
    /// Greedy next hop chosen; the returned message carries this node's hop
    /// signature.
    NextHop {
        neighbor: Fingerprint,
        message: GeocastMessage,
    },
    /// This node is inside the destination region.
    EnterDistribution,
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    BadSignature,
    Revoked,
    RateLimited,
    LocalMaximum,
    NoCredentials,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::BadSignature => "bad_signature",
            DropReason::Revoked => "revoked",
            DropReason::RateLimited => "rate_limited",
            DropReason::LocalMaximum => "local_maximum",
            DropReason::NoCredentials => "no_credentials",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributeDecision {
    Rebroadcast,
    Suppress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeTrigger {
    Interval,
    MixZoneEntry,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub beacon_hz: u32,
    pub delta_fresh_ms: TimeMs,
    pub epsilon_m: f64,
    pub range_m: f64,
    pub v_max_mps: f64,
    pub overlap_delta_m: f64,
    pub quorum: usize,
    pub geocast_rate_per_s: f64,
    pub seen_cache_capacity: usize,
    pub pool_size: usize,
    pub refill_fraction: f64,
    pub mds_window_ms: TimeMs,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            beacon_hz: 10,
            delta_fresh_ms: 100,
            epsilon_m: 450.0,
            range_m: 1000.0,
            v_max_mps: 70.0,
            overlap_delta_m: 1.0,
            quorum: 3,
            geocast_rate_per_s: 10.0,
            seen_cache_capacity: 4096,
            pool_size: 100,
            refill_fraction: 0.2,
            mds_window_ms: 2000,
        }
    }
}

impl NodeConfig {
    pub fn beacon_period_ms(&self) -> TimeMs {
        1000 / self.beacon_hz.clamp(1, 10) as i64
    }

    fn staleness_ms(&self) -> TimeMs {
        3 * self.beacon_period_ms()
    }
}

/// Per-CA revocation view: the latest fully reassembled CRL and/or the
/// latest Bloom-compressed CRL.
#[derive(Debug, Clone, Default)]
pub struct CrlView {
    pub explicit: Option<Crl>,
    pub bloom: Option<BloomCrl>,
}

impl CrlView {
    pub fn covers(&self, fp: &Fingerprint) -> bool {
        if let Some(crl) = &self.explicit {
            if crl.contains(fp) {
                return true;
            }
        }
        if let Some(bloom) = &self.bloom {
            if bloom.query(fp) {
                return true;
            }
        }
        false
    }
}

/// Output of one LEAVE round.
#[derive(Debug, Clone, Default)]
pub struct LeaveRoundOutput {
    /// Votes to broadcast to neighbors.
    pub votes: Vec<LeaveVote>,
    /// Eviction events to report to the CA (quorum met this round).
    pub reports: Vec<EvictionEvent>,
    /// Targets newly added to the local blacklist.
    pub blacklisted: Vec<Fingerprint>,
}

pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
    pub config: NodeConfig,
    hsm: Hsm,
    long_term_cert: Certificate,
    home_ca: CaId,
    pool: PseudonymPool,
    pub neighbors: NeighborTable,
    seen: BoundedLru<(Fingerprint, u64), TimeMs>,
    credential_cache: BoundedLru<Fingerprint, ()>,
    blacklist: BTreeSet<Fingerprint>,
    crl_views: BTreeMap<CaId, CrlView>,
    pub position: Position,
    pub speed_mps: f32,
    pub heading_rad: f32,
    rate: HashMap<Fingerprint, TokenBucket>,
    link_layer_id: u64,
    seq_counter: u64,
    trust: BTreeMap<CaId, PublicKey>,
    rng: ChaCha20Rng,
    last_sim_us: i64,
    // MDS state: targets flagged implausible within the window, and votes
    // heard from neighbors this round.
    flags: BTreeMap<Fingerprint, TimeMs>,
    vote_inbox: Vec<LeaveVote>,
    reported_events: BTreeSet<[u8; 16]>,
}

impl Node {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: NodeId,
        role: NodeRole,
        config: NodeConfig,
        hsm: Hsm,
        long_term_cert: Certificate,
        home_ca: CaId,
        trust: BTreeMap<CaId, PublicKey>,
        position: Position,
        rng_seed: u64,
    ) -> Self {
        let staleness = config.staleness_ms();
        let seen_cap = config.seen_cache_capacity;
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed ^ id.0.rotate_left(17));
        let link_layer_id = rng.next_u64();
        Self {
            id,
            role,
            config,
            hsm,
            long_term_cert,
            home_ca,
            pool: PseudonymPool::default(),
            neighbors: NeighborTable::new(staleness),
            seen: BoundedLru::new(seen_cap),
            credential_cache: BoundedLru::new(1024),
            blacklist: BTreeSet::new(),
            crl_views: BTreeMap::new(),
            position,
            speed_mps: 0.0,
            heading_rad: 0.0,
            rate: HashMap::new(),
            link_layer_id,
            seq_counter: 0,
            trust,
            rng,
            last_sim_us: 0,
            flags: BTreeMap::new(),
            vote_inbox: Vec::new(),
            reported_events: BTreeSet::new(),
        }
    }

    pub fn hsm(&self) -> &Hsm {
        &self.hsm
    }

    pub fn hsm_mut(&mut self) -> &mut Hsm {
        &mut self.hsm
    }

    pub fn home_ca(&self) -> CaId {
        self.home_ca
    }

    pub fn long_term_cert(&self) -> &Certificate {
        &self.long_term_cert
    }

    pub fn link_layer_id(&self) -> u64 {
        self.link_layer_id
    }

    pub fn now_ms(&self) -> TimeMs {
        self.hsm.clock_ms()
    }

    /// Receiver-side clock with sub-millisecond resolution, for
    /// time-of-flight estimation.
    pub fn now_ms_precise(&self) -> f64 {
        self.hsm.clock_us() as f64 / 1000.0
    }

    /// Drive the HSM clock to the simulator's current time.
    pub fn advance_clock_to_us(&mut self, sim_us: i64) {
        let delta = sim_us - self.last_sim_us;
        if delta > 0 {
            self.hsm.clock_tick_us(delta);
            self.last_sim_us = sim_us;
        }
    }

    pub fn is_blacklisted(&self, fp: &Fingerprint) -> bool {
        self.blacklist.contains(fp)
    }

    pub fn active_pseudonym(&self) -> Option<&crate::crypto::cert::Pseudonym> {
        self.pool.active()
    }

    pub fn pool(&self) -> &PseudonymPool {
        &self.pool
    }

    // ---- pseudonym handling -------------------------------------------

    /// Acquire a fresh pseudonym set from the CA: the HSM generates key
    /// pairs, the request is authenticated with the long-term key, and the
    /// sealed response is decrypted inside the HSM.
    pub fn refill_from(&mut self, ca: &mut CaState, now: TimeMs) -> Result<(), NodeError> {
        let slot_base = self.hsm.slot_count(TrafficClass::Safety);
        let keys = self
            .hsm
            .generate_short_term_keys(self.config.pool_size, TrafficClass::Safety)?;
        let input = refill_sign_input(self.id, &keys);
        let (proof, hsm_time_ms) = self.hsm.sign(SlotSelector::LongTerm, &input)?;
        let request = RefillRequest {
            long_term_id: self.id,
            public_keys: keys,
            hsm_time_ms,
            proof,
        };
        let sealed = ca.issue_pseudonym_set(&request, now)?;
        let set = PseudonymSet::from_bytes(&self.hsm.decrypt(&sealed)?)?;
        self.pool.install(set, slot_base);
        Ok(())
    }

    /// Refill from a visited region's CA using home credentials. Subsequent
    /// pseudonyms carry the visited CA's id.
    pub fn refill_foreign(
        &mut self,
        visited: &mut CaState,
        home_crl: Option<&Crl>,
        now: TimeMs,
    ) -> Result<(), NodeError> {
        let slot_base = self.hsm.slot_count(TrafficClass::Safety);
        let keys = self
            .hsm
            .generate_short_term_keys(self.config.pool_size, TrafficClass::Safety)?;
        let input = refill_sign_input(self.id, &keys);
        let (proof, hsm_time_ms) = self.hsm.sign(SlotSelector::LongTerm, &input)?;
        let request = RefillRequest {
            long_term_id: self.id,
            public_keys: keys,
            hsm_time_ms,
            proof,
        };
        let sealed = visited.issue_foreigner_pseudonyms(
            self.home_ca,
            &self.long_term_cert.clone(),
            home_crl,
            &request,
            now,
        )?;
        let set = PseudonymSet::from_bytes(&self.hsm.decrypt(&sealed)?)?;
        self.pool.install(set, slot_base);
        Ok(())
    }

    pub fn refill_due(&self, now: TimeMs) -> bool {
        !self.role.is_infrastructure() && self.pool.refill_due(now, self.config.refill_fraction)
    }

    /// Switch to the next pseudonym: activate its HSM slot and resample the
    /// link-layer identifier so lower layers cannot bridge the change.
    pub fn change_pseudonym(
        &mut self,
        _trigger: ChangeTrigger,
        now: TimeMs,
    ) -> Result<(), NodeError> {
        let activation = self.pool.plan_change(now)?;
        self.hsm.activate_slot(
            TrafficClass::Safety,
            activation.slot,
            activation.pseudonym.lifetime,
        )?;
        self.pool.confirm_change(&activation, now);
        self.link_layer_id = self.rng.next_u64();
        Ok(())
    }

    fn credential_for_sending(&mut self, now: TimeMs) -> Result<Credential, NodeError> {
        if self.role.is_infrastructure() {
            return Ok(Credential::Certificate(self.long_term_cert.clone()));
        }
        if self.pool.needs_change(now) {
            self.change_pseudonym(ChangeTrigger::Interval, now)?;
        }
        let pnym = self.pool.active().ok_or(NodeError::NoCredentials)?;
        Ok(Credential::Pseudonym(pnym.clone()))
    }

    fn signing_selector(&self) -> SlotSelector {
        if self.role.is_infrastructure() {
            SlotSelector::LongTerm
        } else {
            SlotSelector::Active(TrafficClass::Safety)
        }
    }

    // ---- beaconing -----------------------------------------------------

    /// Assemble and sign a cooperative-awareness beacon.
    pub fn make_beacon(&mut self) -> Result<SignedMessage, NodeError> {
        let now = self.now_ms();
        let credential = self.credential_for_sending(now)?;
        let payload = BeaconPayload {
            position: self.position,
            speed_mps: self.speed_mps,
            heading_rad: self.heading_rad,
            role: self.role,
        }
        .to_bytes();
        let input = sign_input(&payload, self.position);
        let (signature, timestamp_ms) = self.hsm.sign(self.signing_selector(), &input)?;
        Ok(SignedMessage {
            payload,
            geo_stamp: GeoStamp {
                timestamp_ms,
                position: self.position,
            },
            signature,
            credential,
        })
    }

    /// Credential checks shared by every receive path: trusted CA, valid
    /// signature and lifetime, not revoked, not locally evicted.
    fn check_credential(&mut self, credential: &Credential, now: TimeMs) -> Result<(), RejectReason> {
        let ca_id = credential.ca_id();
        let Some(ca_key) = self.trust.get(&ca_id) else {
            return Err(RejectReason::UnknownCa);
        };
        let fp = credential.fingerprint();
        if self.credential_cache.contains(&fp) {
            if !credential.lifetime().contains(now) {
                return Err(RejectReason::InvalidCredential);
            }
        } else if credential.verify(ca_key, now) {
            self.credential_cache.insert(fp, ());
        } else {
            return Err(RejectReason::InvalidCredential);
        }
        if self.blacklist.contains(&fp) {
            return Err(RejectReason::Blacklisted);
        }
        if let Some(view) = self.crl_views.get(&ca_id) {
            if view.covers(&fp) {
                return Err(RejectReason::Revoked);
            }
        }
        Ok(())
    }

    /// Full beacon verification pipeline. On acceptance the sender enters
    /// the neighbor table and its position claim feeds misbehavior
    /// detection.
    pub fn receive_beacon(&mut self, msg: &SignedMessage) -> Result<(), RejectReason> {
        let now = self.now_ms();
        self.check_credential(&msg.credential, now)?;
        if !msg.verify_signature() {
            return Err(RejectReason::BadSignature);
        }
        if now - msg.geo_stamp.timestamp_ms > self.config.delta_fresh_ms {
            return Err(RejectReason::Stale);
        }
        match neighbor_check(
            &msg.geo_stamp,
            self.position,
            self.now_ms_precise(),
            self.config.range_m,
            self.config.epsilon_m,
        ) {
            NeighborVerdict::Neighbor => {}
            NeighborVerdict::NotNeighbor(NotNeighborReason::NegativeTimeOfFlight) => {
                return Err(RejectReason::ClockAnomaly)
            }
            NeighborVerdict::NotNeighbor(_) => return Err(RejectReason::NotNeighbor),
        }
        let payload =
            BeaconPayload::from_bytes(&msg.payload).map_err(|_| RejectReason::Malformed)?;

        let fp = msg.credential.fingerprint();
        self.run_plausibility(&fp, &msg.geo_stamp, now);
        self.neighbors.upsert(
            fp,
            NeighborEntry {
                position: msg.geo_stamp.position,
                speed_mps: payload.speed_mps,
                heading_rad: payload.heading_rad,
                role: payload.role,
                last_geo_stamp: msg.geo_stamp,
                last_seen_ms: now,
                authenticated: true,
            },
        );
        self.neighbors.expire(now);
        Ok(())
    }

    fn plausibility_config(&self) -> PlausibilityConfig {
        PlausibilityConfig {
            range_m: self.config.range_m,
            v_max_mps: self.config.v_max_mps,
            overlap_delta_m: self.config.overlap_delta_m,
            overlap_window_ms: self.config.beacon_period_ms(),
        }
    }

    fn run_plausibility(&mut self, fp: &Fingerprint, claim: &GeoStamp, now: TimeMs) {
        if self.role.is_infrastructure() {
            return; // RSUs gateway traffic; vehicles run the MDS
        }
        let cfg = self.plausibility_config();
        let prior = self.neighbors.get(fp).map(|e| e.last_geo_stamp);
        let concurrent: Vec<GeoStamp> = self
            .neighbors
            .iter()
            .filter(|(other, _)| *other != fp)
            .map(|(_, e)| e.last_geo_stamp)
            .collect();
        let verdict = position_plausibility(
            claim,
            prior.as_ref(),
            concurrent.iter(),
            self.position,
            &cfg,
        );
        if let PlausibilityVerdict::Implausible(_) = verdict {
            self.flags.insert(*fp, now);
        }
    }

    // ---- MDS / LEAVE ----------------------------------------------------

    pub fn receive_vote(&mut self, vote: &LeaveVote) {
        let now = self.now_ms();
        if self.check_credential(&Credential::Pseudonym(vote.evaluator.clone()), now).is_err() {
            return;
        }
        if !vote.verify_signature() {
            return;
        }
        self.vote_inbox.push(vote.clone());
    }

    /// One LEAVE round: vote on targets flagged in the current window,
    /// combine own and received votes, blacklist targets that reach quorum,
    /// and emit the eviction report for the CA.
    pub fn leave_round(&mut self, now: TimeMs) -> Result<LeaveRoundOutput, NodeError> {
        let window = self.config.mds_window_ms;
        self.flags.retain(|_, t| now - *t <= window);
        let mut out = LeaveRoundOutput::default();
        if self.role.is_infrastructure() {
            self.vote_inbox.clear();
            return Ok(out);
        }

        // own votes for currently flagged targets
        let targets: Vec<Fingerprint> = self.flags.keys().copied().collect();
        if !targets.is_empty() && self.pool.needs_change(now) {
            let _ = self.change_pseudonym(ChangeTrigger::Interval, now);
        }
        for target in &targets {
            let Some(evaluator) = self.pool.active().cloned() else {
                continue;
            };
            let input = vote_sign_input(target);
            let Ok((signature, time_ms)) =
                self.hsm.sign(SlotSelector::Active(TrafficClass::Safety), &input)
            else {
                continue;
            };
            out.votes.push(LeaveVote {
                evaluator,
                target: *target,
                time_ms,
                signature,
            });
        }

        // tally distinct evaluators per target (own vote included)
        let mut tally: BTreeMap<Fingerprint, BTreeMap<Fingerprint, LeaveVote>> = BTreeMap::new();
        for vote in out.votes.iter().chain(self.vote_inbox.iter()) {
            if now - vote.time_ms > window {
                continue;
            }
            tally
                .entry(vote.target)
                .or_default()
                .insert(vote.evaluator.fingerprint(), vote.clone());
        }
        for (target, voters) in tally {
            if voters.len() < self.config.quorum {
                continue;
            }
            if self.blacklist.insert(target) {
                out.blacklisted.push(target);
                self.neighbors.remove(&target);
            }
            // canonical quorum subset: first `quorum` votes in evaluator
            // fingerprint order, so every reporter of this round derives the
            // same event id and the CA counts the round once
            let votes: Vec<LeaveVote> =
                voters.into_values().take(self.config.quorum).collect();
            let event = EvictionEvent {
                target,
                time_ms: now,
                votes,
            };
            if self.reported_events.insert(event.event_id()) {
                out.reports.push(event);
            }
        }
        self.vote_inbox.clear();
        Ok(out)
    }

    // ---- geocast ---------------------------------------------------------

    /// Originate a geocast toward a destination region.
    pub fn geocast_originate(
        &mut self,
        payload: Vec<u8>,
        region: Region,
    ) -> Result<GeocastMessage, NodeError> {
        let now = self.now_ms();
        let credential = self.credential_for_sending(now)?;
        let input = sign_input(&payload, self.position);
        let (signature, timestamp_ms) = self.hsm.sign(self.signing_selector(), &input)?;
        let sequence = self.seq_counter;
        self.seq_counter += 1;
        Ok(GeocastMessage {
            origin: SignedMessage {
                payload,
                geo_stamp: GeoStamp {
                    timestamp_ms,
                    position: self.position,
                },
                signature,
                credential,
            },
            region,
            sequence,
            hops: Vec::new(),
        })
    }

    fn verify_geocast(&mut self, msg: &GeocastMessage, now: TimeMs) -> Result<(), DropReason> {
        match self.check_credential(&msg.origin.credential, now) {
            Ok(()) => {}
            Err(RejectReason::Revoked) | Err(RejectReason::Blacklisted) => {
                return Err(DropReason::Revoked)
            }
            Err(_) => return Err(DropReason::BadSignature),
        }
        if !msg.origin.verify_signature() {
            return Err(DropReason::BadSignature);
        }
        if let Some(last) = msg.hops.last() {
            match self.check_credential(&last.credential, now) {
                Ok(()) => {}
                Err(RejectReason::Revoked) | Err(RejectReason::Blacklisted) => {
                    return Err(DropReason::Revoked)
                }
                Err(_) => return Err(DropReason::BadSignature),
            }
            if !msg.verify_newest_hop() {
                return Err(DropReason::BadSignature);
            }
        }
        Ok(())
    }

    /// Forward a geocast one greedy hop toward its region: pick the
    /// authenticated neighbor strictly closer to the region center than this
    /// node, sign on top, and hand over. Inside the region, switch to
    /// distribution.
    pub fn geocast_forward(&mut self, msg: &GeocastMessage) -> ForwardDecision {
        let now = self.now_ms();
        if let Err(reason) = self.verify_geocast(msg, now) {
            return ForwardDecision::Drop(reason);
        }
        // per-origin rate limiting
        let origin_fp = msg.origin.credential.fingerprint();
        let rate = self.config.geocast_rate_per_s;
        let bucket = self
            .rate
            .entry(origin_fp)
            .or_insert_with(|| TokenBucket::new(rate, rate, now));
        if !bucket.allow(now) {
            return ForwardDecision::Drop(DropReason::RateLimited);
        }
        if msg.region.contains(self.position) {
            return ForwardDecision::EnterDistribution;
        }
        let center = msg.region.center();
        let own_distance = self.position.distance_to(&center);
        let next = self
            .neighbors
            .authenticated()
            .map(|(fp, e)| (e.position.distance_to(&center), *fp))
            .filter(|(d, _)| *d < own_distance)
            .min_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let Some((_, neighbor)) = next else {
            return ForwardDecision::Drop(DropReason::LocalMaximum);
        };
        // stack own hop signature over the received bytes
        let mut forwarded = msg.clone();
        let input = forwarded.hop_sign_input(forwarded.hops.len(), self.position);
        let Ok(credential) = self.credential_for_sending(now) else {
            return ForwardDecision::Drop(DropReason::NoCredentials);
        };
        let Ok((signature, timestamp_ms)) = self.hsm.sign(self.signing_selector(), &input) else {
            return ForwardDecision::Drop(DropReason::NoCredentials);
        };
        forwarded.hops.push(HopSignature {
            credential,
            geo_stamp: GeoStamp {
                timestamp_ms,
                position: self.position,
            },
            signature,
        });
        ForwardDecision::NextHop {
            neighbor,
            message: forwarded,
        }
    }

    /// Flooding inside the destination region: rebroadcast each (origin,
    /// sequence) exactly once.
    pub fn geocast_distribute(&mut self, msg: &GeocastMessage) -> DistributeDecision {
        let now = self.now_ms();
        let key = msg.flood_key();
        if self.seen.contains(&key) {
            self.seen.insert(key, now);
            return DistributeDecision::Suppress;
        }
        self.seen.insert(key, now);
        DistributeDecision::Rebroadcast
    }

    // ---- revocation consumption -----------------------------------------

    /// Install a reassembled CRL; stale serials are ignored, revoked
    /// neighbors are dropped immediately.
    pub fn apply_crl(&mut self, crl: Crl) -> bool {
        let Some(ca_key) = self.trust.get(&crl.issuer) else {
            return false;
        };
        if !crl.verify(ca_key) {
            return false;
        }
        let view = self.crl_views.entry(crl.issuer).or_default();
        if let Some(existing) = &view.explicit {
            if crl.serial < existing.serial {
                return false;
            }
        }
        view.explicit = Some(crl);
        self.drop_revoked_neighbors();
        true
    }

    /// Install a Bloom-compressed CRL for a CA.
    pub fn apply_bloom(&mut self, ca: CaId, bloom: BloomCrl) -> bool {
        let Some(ca_key) = self.trust.get(&ca) else {
            return false;
        };
        if !bloom.verify(ca_key) {
            return false;
        }
        let view = self.crl_views.entry(ca).or_default();
        if let Some(existing) = &view.bloom {
            if bloom.serial < existing.serial {
                return false;
            }
        }
        view.bloom = Some(bloom);
        self.drop_revoked_neighbors();
        true
    }

    fn drop_revoked_neighbors(&mut self) {
        let views = &self.crl_views;
        self.neighbors
            .retain(|fp, _| !views.values().any(|v| v.covers(fp)));
    }

    pub fn crl_view(&self, ca: CaId) -> Option<&CrlView> {
        self.crl_views.get(&ca)
    }

    /// Hand an incoming management command to the HSM; a kill ACK, if any,
    /// is returned for transmission.
    pub fn process_hsm_command(&mut self, cmd: &HsmCommand) -> Option<KillAck> {
        match self.hsm.process_command(cmd) {
            Ok(crate::hsm::CommandOutcome::KillAck(ack)) => Some(ack),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests;
