//! Shared domain scalars: simulated time, planar coordinates, identifiers.

use serde::{Deserialize, Serialize};

/// Simulated milliseconds from epoch 0.
pub type TimeMs = i64;

/// Speed of light, in meters per simulated millisecond.
pub const SPEED_OF_LIGHT_M_PER_MS: f64 = 299_792_458.0 / 1000.0;

/// 2-D planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Certification-authority identifier. One CA per region.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CaId(pub u32);

/// Long-term node identity, assigned at registration. Never transmitted by
/// private vehicles.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl std::fmt::Display for CaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ca{}", self.0)
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Role attribute carried in long-term certificates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    PrivateVehicle,
    PublicVehicle,
    SpecialVehicle,
    Rsu,
    RsuInternet,
}

impl NodeRole {
    pub fn tag(self) -> u8 {
        match self {
            NodeRole::PrivateVehicle => 1,
            NodeRole::PublicVehicle => 2,
            NodeRole::SpecialVehicle => 3,
            NodeRole::Rsu => 4,
            NodeRole::RsuInternet => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(NodeRole::PrivateVehicle),
            2 => Some(NodeRole::PublicVehicle),
            3 => Some(NodeRole::SpecialVehicle),
            4 => Some(NodeRole::Rsu),
            5 => Some(NodeRole::RsuInternet),
            _ => None,
        }
    }

    pub fn is_infrastructure(self) -> bool {
        matches!(self, NodeRole::Rsu | NodeRole::RsuInternet)
    }
}
