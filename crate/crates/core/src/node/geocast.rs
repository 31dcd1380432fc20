//! Geocast message structure: a signed origin message addressed to a
//! geographic region, plus the stacked signatures of forwarding nodes.
//!
//! The origin signature stays verifiable end to end no matter how many hops
//! sign on top; receivers check the origin plus the most recent hop only.
//!
//! Geocast header wire format (after the origin message):
//! `[u8 region_kind][4 x f64][u64 seq]`.

use serde::{Deserialize, Serialize};

use crate::crypto::cert::Credential;
use crate::crypto::message::{GeoStamp, SignedMessage};
use crate::crypto::{verify, Signature};
use crate::types::{Position, TimeMs};
use crate::wire::{Reader, Writer, WireError};

/// Geographically defined destination region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Disc { cx: f64, cy: f64, radius: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Region {
    pub fn contains(&self, p: Position) -> bool {
        match self {
            Region::Disc { cx, cy, radius } => {
                Position::new(*cx, *cy).distance_to(&p) <= *radius
            }
            Region::Rect { x0, y0, x1, y1 } => {
                p.x >= *x0 && p.x <= *x1 && p.y >= *y0 && p.y <= *y1
            }
        }
    }

    /// The destination position greedy forwarding steers toward.
    pub fn center(&self) -> Position {
        match self {
            Region::Disc { cx, cy, .. } => Position::new(*cx, *cy),
            Region::Rect { x0, y0, x1, y1 } => {
                Position::new((x0 + x1) / 2.0, (y0 + y1) / 2.0)
            }
        }
    }

    fn write_to(&self, w: &mut Writer) {
        match self {
            Region::Disc { cx, cy, radius } => {
                w.put_u8(1).put_f64(*cx).put_f64(*cy).put_f64(*radius).put_f64(0.0);
            }
            Region::Rect { x0, y0, x1, y1 } => {
                w.put_u8(2).put_f64(*x0).put_f64(*y0).put_f64(*x1).put_f64(*y1);
            }
        }
    }

    fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let kind = r.get_u8()?;
        let a = r.get_f64()?;
        let b = r.get_f64()?;
        let c = r.get_f64()?;
        let d = r.get_f64()?;
        match kind {
            1 => Ok(Region::Disc {
                cx: a,
                cy: b,
                radius: c,
            }),
            2 => Ok(Region::Rect {
                x0: a,
                y0: b,
                x1: c,
                y1: d,
            }),
            _ => Err(WireError::InvalidValue("region kind")),
        }
    }
}

/// One forwarder's signature over the bytes it received plus its own
/// geo-stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopSignature {
    pub credential: Credential,
    pub geo_stamp: GeoStamp,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocastMessage {
    pub origin: SignedMessage,
    pub region: Region,
    pub sequence: u64,
    pub hops: Vec<HopSignature>,
}

impl GeocastMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_prefix(&mut w, self.hops.len());
        w.into_bytes()
    }

    fn write_prefix(&self, w: &mut Writer, hop_count: usize) {
        w.put_len32_bytes(&self.origin.to_bytes());
        self.region.write_to(w);
        w.put_u64(self.sequence);
        w.put_u8(hop_count as u8);
        for hop in &self.hops[..hop_count] {
            w.put_len16_bytes(&hop.credential.to_bytes());
            w.put_i64(hop.geo_stamp.timestamp_ms);
            w.put_f64(hop.geo_stamp.position.x);
            w.put_f64(hop.geo_stamp.position.y);
            w.put_len16_bytes(hop.signature.as_bytes());
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let origin = SignedMessage::from_bytes(r.get_len32_bytes()?)?;
        let region = Region::read_from(&mut r)?;
        let sequence = r.get_u64()?;
        let hop_count = r.get_u8()? as usize;
        let mut hops = Vec::with_capacity(hop_count);
        for _ in 0..hop_count {
            let credential = Credential::from_bytes(r.get_len16_bytes()?)?;
            let geo_stamp = GeoStamp {
                timestamp_ms: r.get_i64()?,
                position: Position::new(r.get_f64()?, r.get_f64()?),
            };
            let signature = Signature::from_bytes(r.get_len16_bytes()?);
            hops.push(HopSignature {
                credential,
                geo_stamp,
                signature,
            });
        }
        r.finish()?;
        Ok(Self {
            origin,
            region,
            sequence,
            hops,
        })
    }

    /// The bytes a forwarder signs: the message as received (without the
    /// forwarder's own hop) followed by the forwarder's position; the HSM
    /// appends the timestamp.
    pub fn hop_sign_input(&self, existing_hops: usize, forwarder_position: Position) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_prefix(&mut w, existing_hops);
        w.put_f64(forwarder_position.x).put_f64(forwarder_position.y);
        w.into_bytes()
    }

    /// Verify the newest hop signature, if any hops exist.
    pub fn verify_newest_hop(&self) -> bool {
        let Some(last) = self.hops.last() else {
            return true; // no hops yet: only the origin signature applies
        };
        let mut signed = self.hop_sign_input(self.hops.len() - 1, last.geo_stamp.position);
        signed.extend_from_slice(&last.geo_stamp.timestamp_ms.to_le_bytes());
        verify(last.credential.public_key(), &signed, &last.signature)
    }

    /// The origin's credential fingerprint plus sequence number, the
    /// duplicate-suppression key.
    pub fn flood_key(&self) -> (crate::crypto::cert::Fingerprint, u64) {
        (self.origin.credential.fingerprint(), self.sequence)
    }

    pub fn origin_timestamp(&self) -> TimeMs {
        self.origin.geo_stamp.timestamp_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_containment() {
        let disc = Region::Disc {
            cx: 100.0,
            cy: 0.0,
            radius: 50.0,
        };
        assert!(disc.contains(Position::new(120.0, 0.0)));
        assert!(!disc.contains(Position::new(151.0, 0.0)));
        let rect = Region::Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 10.0,
            y1: 10.0,
        };
        assert!(rect.contains(Position::new(10.0, 10.0)));
        assert!(!rect.contains(Position::new(10.1, 5.0)));
    }

    #[test]
    fn region_center() {
        let rect = Region::Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 10.0,
            y1: 20.0,
        };
        let c = rect.center();
        assert_eq!((c.x, c.y), (5.0, 10.0));
    }
}
