//! Neighbor table, distance-consistency checking, and position plausibility.
//!
//! A sender becomes a communication neighbor only when the coordinate
//! distance (own position vs the claimed position) and the time-of-flight
//! distance (receive time minus geo-stamp timestamp, at the speed of light)
//! agree within a tolerance. A relay that stores and forwards a frame adds
//! milliseconds of delay, which time-of-flight converts into hundreds of
//! kilometers — far outside any sane tolerance — so relayed messages never
//! pass, while honest clocks with microsecond error stay comfortably inside.

use std::collections::BTreeMap;

use crate::crypto::cert::Fingerprint;
use crate::crypto::message::GeoStamp;
use crate::types::{NodeRole, Position, TimeMs, SPEED_OF_LIGHT_M_PER_MS};

/// Why a sender was not accepted as a communication neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotNeighborReason {
    /// Claimed position farther than the radio range.
    OutOfRange,
    /// Coordinate distance and time-of-flight distance disagree.
    DistanceMismatch,
    /// Receive time precedes the geo-stamp: clock anomaly.
    NegativeTimeOfFlight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborVerdict {
    Neighbor,
    NotNeighbor(NotNeighborReason),
}

/// Distance-consistency check. `receiver_time_ms` is real-valued so
/// sub-millisecond clock error and propagation show up in the time-of-flight
/// estimate.
pub fn neighbor_check(
    stamp: &GeoStamp,
    receiver_position: Position,
    receiver_time_ms: f64,
    range_m: f64,
    epsilon_m: f64,
) -> NeighborVerdict {
    let d_coord = receiver_position.distance_to(&stamp.position);
    let dt_ms = receiver_time_ms - stamp.timestamp_ms as f64;
    if dt_ms < 0.0 {
        return NeighborVerdict::NotNeighbor(NotNeighborReason::NegativeTimeOfFlight);
    }
    let d_tof = SPEED_OF_LIGHT_M_PER_MS * dt_ms;
    if (d_coord - d_tof).abs() > epsilon_m {
        return NeighborVerdict::NotNeighbor(NotNeighborReason::DistanceMismatch);
    }
    if d_coord > range_m {
        return NeighborVerdict::NotNeighbor(NotNeighborReason::OutOfRange);
    }
    NeighborVerdict::Neighbor
}

/// Which plausibility heuristic a position claim failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImplausibilityReason {
    /// Claimed position beyond maximum radio range of the receiver.
    BeyondRadioRange,
    /// Implied speed between consecutive claims exceeds the vehicle maximum.
    ImpliedSpeed,
    /// Two distinct pseudonyms claim the same spot at the same time.
    PositionOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlausibilityVerdict {
    Plausible,
    Implausible(ImplausibilityReason),
}

#[derive(Debug, Clone, Copy)]
pub struct PlausibilityConfig {
    pub range_m: f64,
    pub v_max_mps: f64,
    pub overlap_delta_m: f64,
    /// Two claims closer in time than this count as simultaneous for the
    /// overlap heuristic.
    pub overlap_window_ms: TimeMs,
}

impl Default for PlausibilityConfig {
    fn default() -> Self {
        Self {
            range_m: 1000.0,
            v_max_mps: 70.0,
            overlap_delta_m: 1.0,
            overlap_window_ms: 100,
        }
    }
}

/// Position-verification heuristics over a claimed geo-stamp.
///
/// `prior` is the previous claim from the same pseudonym, if any;
/// `concurrent` are the latest claims of *other* pseudonyms.
pub fn position_plausibility<'a>(
    claim: &GeoStamp,
    prior: Option<&GeoStamp>,
    concurrent: impl IntoIterator<Item = &'a GeoStamp>,
    receiver_position: Position,
    cfg: &PlausibilityConfig,
) -> PlausibilityVerdict {
    if receiver_position.distance_to(&claim.position) > cfg.range_m {
        return PlausibilityVerdict::Implausible(ImplausibilityReason::BeyondRadioRange);
    }
    if let Some(prev) = prior {
        let dt_s = (claim.timestamp_ms - prev.timestamp_ms) as f64 / 1000.0;
        if dt_s > 0.0 {
            let implied = prev.position.distance_to(&claim.position) / dt_s;
            if implied > cfg.v_max_mps {
                return PlausibilityVerdict::Implausible(ImplausibilityReason::ImpliedSpeed);
            }
        }
    }
    for other in concurrent {
        if (other.timestamp_ms - claim.timestamp_ms).abs() <= cfg.overlap_window_ms
            && other.position.distance_to(&claim.position) <= cfg.overlap_delta_m
        {
            return PlausibilityVerdict::Implausible(ImplausibilityReason::PositionOverlap);
        }
    }
    PlausibilityVerdict::Plausible
}

#[derive(Debug, Clone)]
pub struct NeighborEntry {
    pub position: Position,
    pub speed_mps: f32,
    pub heading_rad: f32,
    pub role: NodeRole,
    pub last_geo_stamp: GeoStamp,
    pub last_seen_ms: TimeMs,
    pub authenticated: bool,
}

/// Authenticated, freshness- and distance-validated view of communication
/// neighbors. Entries expire after the staleness bound.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    entries: BTreeMap<Fingerprint, NeighborEntry>,
    staleness_ms: TimeMs,
}

impl NeighborTable {
    pub fn new(staleness_ms: TimeMs) -> Self {
        Self {
            entries: BTreeMap::new(),
            staleness_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<&NeighborEntry> {
        self.entries.get(fp)
    }

    pub fn upsert(&mut self, fp: Fingerprint, entry: NeighborEntry) {
        self.entries.insert(fp, entry);
    }

    pub fn remove(&mut self, fp: &Fingerprint) -> Option<NeighborEntry> {
        self.entries.remove(fp)
    }

    pub fn expire(&mut self, now: TimeMs) {
        let bound = self.staleness_ms;
        self.entries.retain(|_, e| now - e.last_seen_ms <= bound);
    }

    /// Deterministic iteration (fingerprint order), authenticated entries
    /// only.
    pub fn authenticated(&self) -> impl Iterator<Item = (&Fingerprint, &NeighborEntry)> {
        self.entries.iter().filter(|(_, e)| e.authenticated)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Fingerprint, &NeighborEntry)> {
        self.entries.iter()
    }

    pub fn retain(&mut self, f: impl FnMut(&Fingerprint, &mut NeighborEntry) -> bool) {
        self.entries.retain(f);
    }
}
