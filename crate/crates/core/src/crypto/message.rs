//! Geo-stamped signed messages and the beacon payload layout.
//!
//! Wire layouts here are normative for cross-implementation replay files:
//!
//! * signed message: `[u32 payload_len][payload][i64 timestamp_ms][f64 x]
//!   [f64 y][u16 sig_len][sig][u16 pnym_len][pseudonym bytes]`
//! * beacon payload: `[f64 x][f64 y][f32 speed][f32 heading][u8 role]`
//!
//! The signature covers the payload and the geo-stamp, canonically
//! `[u32 payload_len][payload][f64 x][f64 y][i64 timestamp_ms]` — the
//! timestamp comes last because the HSM appends its clock to whatever it
//! signs.

use serde::{Deserialize, Serialize};

use crate::crypto::cert::Credential;
use crate::crypto::{verify, Signature};
use crate::types::{NodeRole, Position, TimeMs};
use crate::wire::{Reader, Writer, WireError};

/// Transmission timestamp and sender position, embedded in every signed
/// message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoStamp {
    pub timestamp_ms: TimeMs,
    pub position: Position,
}

/// A payload plus geo-stamp, signed under the attached credential's key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedMessage {
    pub payload: Vec<u8>,
    pub geo_stamp: GeoStamp,
    pub signature: Signature,
    pub credential: Credential,
}

/// The bytes handed to the HSM for signing: payload and position. The HSM
/// appends its clock, completing the geo-stamp.
pub fn sign_input(payload: &[u8], position: Position) -> Vec<u8> {
    let mut w = Writer::with_capacity(payload.len() + 24);
    w.put_len32_bytes(payload).put_f64(position.x).put_f64(position.y);
    w.into_bytes()
}

/// The full signed byte string once the timestamp is known.
pub fn signed_bytes(payload: &[u8], position: Position, timestamp_ms: TimeMs) -> Vec<u8> {
    let mut out = sign_input(payload, position);
    out.extend_from_slice(&timestamp_ms.to_le_bytes());
    out
}

impl SignedMessage {
    /// Verify the signature against the attached credential's public key.
    /// Credential validity (CA signature, lifetime, revocation) is the
    /// receiver pipeline's job, not this function's.
    pub fn verify_signature(&self) -> bool {
        let bytes = signed_bytes(
            &self.payload,
            self.geo_stamp.position,
            self.geo_stamp.timestamp_ms,
        );
        verify(self.credential.public_key(), &bytes, &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.payload.len() + 128);
        w.put_len32_bytes(&self.payload)
            .put_i64(self.geo_stamp.timestamp_ms)
            .put_f64(self.geo_stamp.position.x)
            .put_f64(self.geo_stamp.position.y)
            .put_len16_bytes(self.signature.as_bytes())
            .put_len16_bytes(&self.credential.to_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let msg = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(msg)
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let payload = r.get_len32_bytes()?.to_vec();
        let geo_stamp = GeoStamp {
            timestamp_ms: r.get_i64()?,
            position: Position::new(r.get_f64()?, r.get_f64()?),
        };
        let signature = Signature::from_bytes(r.get_len16_bytes()?);
        let credential = Credential::from_bytes(r.get_len16_bytes()?)?;
        Ok(Self {
            payload,
            geo_stamp,
            signature,
            credential,
        })
    }
}

/// Cooperative-awareness beacon body: position, speed, heading, role tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconPayload {
    pub position: Position,
    pub speed_mps: f32,
    pub heading_rad: f32,
    pub role: NodeRole,
}

impl BeaconPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(25);
        w.put_f64(self.position.x)
            .put_f64(self.position.y)
            .put_f32(self.speed_mps)
            .put_f32(self.heading_rad)
            .put_u8(self.role.tag());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let out = Self {
            position: Position::new(r.get_f64()?, r.get_f64()?),
            speed_mps: r.get_f32()?,
            heading_rad: r.get_f32()?,
            role: NodeRole::from_tag(r.get_u8()?).ok_or(WireError::InvalidValue("role tag"))?,
        };
        r.finish()?;
        Ok(out)
    }
}
