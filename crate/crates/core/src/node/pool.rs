//! On-board pseudonym pool.
//!
//! Holds the public halves of the current and next pseudonym sets; the
//! private halves never leave the HSM. The pool tracks which set index maps
//! to which HSM slot range so activation stays aligned with the HSM's
//! monotone slot discipline.

use thiserror::Error;

use crate::authority::PseudonymSet;
use crate::crypto::cert::{Fingerprint, Pseudonym};
use crate::types::TimeMs;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("no credentials")]
    NoCredentials,
    #[error("pool exhausted")]
    PoolExhausted,
}

#[derive(Debug, Clone)]
pub struct InstalledSet {
    pub set: PseudonymSet,
    /// HSM slot index of the first pseudonym's private key.
    pub slot_base: usize,
}

impl InstalledSet {
    /// The latest pseudonym index whose lifetime contains `now` (at an
    /// equal-adjacent boundary the newer pseudonym wins).
    fn usable_index_at(&self, now: TimeMs) -> Option<usize> {
        self.set
            .pseudonyms
            .iter()
            .rposition(|p| p.lifetime.contains(now))
    }

    fn ends_at(&self) -> Option<TimeMs> {
        self.set.pseudonyms.last().map(|p| p.lifetime.end)
    }

    fn starts_at(&self) -> Option<TimeMs> {
        self.set.pseudonyms.first().map(|p| p.lifetime.start)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PseudonymPool {
    current: Option<InstalledSet>,
    next: Option<InstalledSet>,
    active_index: Option<usize>,
    pub last_change_ms: TimeMs,
}

/// What the pool wants activated in the HSM.
#[derive(Debug, Clone)]
pub struct Activation {
    pub slot: usize,
    pub pseudonym: Pseudonym,
}

impl PseudonymPool {
    pub fn install(&mut self, set: PseudonymSet, slot_base: usize) {
        let installed = InstalledSet { set, slot_base };
        if self.current.is_none() {
            self.current = Some(installed);
        } else {
            self.next = Some(installed);
        }
    }

    pub fn has_next(&self) -> bool {
        self.next.is_some()
    }

    pub fn active(&self) -> Option<&Pseudonym> {
        let current = self.current.as_ref()?;
        current.set.pseudonyms.get(self.active_index?)
    }

    pub fn active_fingerprint(&self) -> Option<Fingerprint> {
        self.active().map(|p| p.fingerprint())
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_none()
    }

    /// True when the active pseudonym is missing or no longer valid.
    pub fn needs_change(&self, now: TimeMs) -> bool {
        match self.active() {
            Some(p) => !p.lifetime.contains(now),
            None => true,
        }
    }

    /// Fraction of the current set's total lifetime still ahead of `now`.
    pub fn remaining_fraction(&self, now: TimeMs) -> f64 {
        let Some(current) = &self.current else {
            return 0.0;
        };
        let (Some(start), Some(end)) = (current.starts_at(), current.ends_at()) else {
            return 0.0;
        };
        if end <= start {
            return 0.0;
        }
        ((end - now) as f64 / (end - start) as f64).clamp(0.0, 1.0)
    }

    /// Refill is due when the next set is absent and the current one is
    /// mostly consumed.
    pub fn refill_due(&self, now: TimeMs, trigger_fraction: f64) -> bool {
        self.current.is_none()
            || (self.next.is_none() && self.remaining_fraction(now) <= trigger_fraction)
    }

    /// Pick the pseudonym to switch to at `now`, advancing into the next set
    /// once no pseudonym of the current set is usable. Returns the HSM slot
    /// and pseudonym to activate; the caller performs the HSM activation and
    /// then confirms with [`PseudonymPool::confirm_change`].
    pub fn plan_change(&mut self, now: TimeMs) -> Result<Activation, PoolError> {
        let current = self.current.as_ref().ok_or(PoolError::NoCredentials)?;
        if let Some(idx) = current.usable_index_at(now) {
            // never step backwards onto a retired slot
            if self.active_index.map_or(true, |a| idx > a) {
                return Ok(Activation {
                    slot: current.slot_base + idx,
                    pseudonym: current.set.pseudonyms[idx].clone(),
                });
            }
            if self.active_index == Some(idx) {
                // active pseudonym still valid: a change right now would
                // reuse it, which the pool refuses
                return Err(PoolError::PoolExhausted);
            }
        }
        // current set exhausted: move to the next set if present and usable
        let next = self.next.as_ref().ok_or(PoolError::PoolExhausted)?;
        let idx = next.usable_index_at(now).ok_or(PoolError::PoolExhausted)?;
        Ok(Activation {
            slot: next.slot_base + idx,
            pseudonym: next.set.pseudonyms[idx].clone(),
        })
    }

    /// Commit a change previously planned; switches sets when the activation
    /// came from the next set.
    pub fn confirm_change(&mut self, activation: &Activation, now: TimeMs) {
        let in_current = self
            .current
            .as_ref()
            .map(|c| {
                activation.slot >= c.slot_base
                    && activation.slot < c.slot_base + c.set.pseudonyms.len()
            })
            .unwrap_or(false);
        if !in_current {
            self.current = self.next.take();
        }
        let base = self.current.as_ref().map(|c| c.slot_base).unwrap_or(0);
        self.active_index = Some(activation.slot - base);
        self.last_change_ms = now;
    }
}
