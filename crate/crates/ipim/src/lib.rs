//! In-band measurement primitives carried inside production packets, a
//! deterministic discrete-event network simulator that provides ground
//! truth, and analysis that recovers path properties from the in-band
//! fields.
//!
//! The layering mirrors who does what on a real path:
//!
//! - [`wire`]: the shim header and its byte-exact codec.
//! - [`endpoint`]: per-flow sender/receiver state machines that populate and
//!   consume shim fields (timing decomposition, arrival reconstruction,
//!   integrity, host ids).
//! - [`path`]: router behavior (stamping, evolution, accumulation, load
//!   shedding, adversaries).
//! - [`sim`]: the event loop, links with queues and impairments, routes with
//!   scripted changes, and the trace it records.
//! - [`scenario`]: the configuration schema the CLI and tests drive runs
//!   from.
//! - [`analysis`]: trace consumers that rebuild latency series, topology
//!   maps, path-change points, participation checks, and discrepancy flags.

pub mod analysis;
pub mod endpoint;
pub mod error;
pub mod packet;
pub mod path;
pub mod scenario;
pub mod sim;
pub mod units;
pub mod wire;

pub use units::{Granularity, Rate, SimDuration, SimTime};
