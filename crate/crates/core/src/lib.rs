//! Parallel Unix commands: `ptcp`, `ptls`, `ptexec`, `pttest`, `ptfps`,
//! `ptdistrib`, `ptdisp` and friends, built on a small collectives layer
//! (broadcast, reduce, gather, split) over pluggable transports.

pub mod builtins;
pub mod cli;
pub mod cluster;
pub mod collectives;
pub mod distrib;
pub mod error;
pub mod exec;
pub mod hostspec;
pub mod node;
pub mod predicates;
pub mod procfind;
pub mod ptcopy;
pub mod testexpr;
pub mod textdisp;
pub mod transport;

pub use error::PtError;
