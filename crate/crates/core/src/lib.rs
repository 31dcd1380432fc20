//! Secure vehicular communication stack.
//!
//! Library pieces of a pseudonymous-authentication architecture for
//! vehicular networks: certification authorities, an emulated hardware
//! security module, credential-carrying messages, revocation distribution
//! (erasure-coded CRL pieces and Bloom-compressed CRLs), the vehicle/RSU
//! runtime, and mix-zone location-privacy analytics. The companion `sim`
//! crate drives all of it from a deterministic discrete-event simulator.

pub mod authority;
pub mod crypto;
pub mod hsm;
pub mod erasure;
pub mod revocation;
pub mod types;
pub mod wire;

pub use crypto::cert::{Certificate, Credential, Fingerprint, Lifetime, Pseudonym};
pub use crypto::message::{BeaconPayload, GeoStamp, SignedMessage};
pub use crypto::{KeyPair, PrivateKey, PublicKey, SchemeKind, Signature};
pub use types::{CaId, NodeId, NodeRole, Position, TimeMs};
