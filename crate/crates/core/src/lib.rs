//! Core of a zero trust context federation: identity providers, context
//! attribute providers (CAPs), a user-managed authorization server and relying
//! parties that decide every access request from federated identity plus
//! federated context.

pub mod clock;
pub mod authz;
pub mod cap;
pub mod codec;
pub mod error;
pub mod idp;
pub mod ids;
pub mod model;
pub mod ports;
pub mod rp;
pub mod stream;
pub mod uma;

pub use error::{Error, Result};
