//! Deterministic single-threaded simulation: a virtual clock drives cache
//! servers, connections, client pipelines, and the cluster through a single
//! event queue. Identical seeds and inputs produce identical event logs.

pub mod engine;
pub mod world;

pub use engine::{EventLog, EventQueue};
pub use world::{ConnId, ServerSlot, SimWorld};
