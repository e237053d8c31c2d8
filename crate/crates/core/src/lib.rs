//! Reproducible-build verification toolkit.
//!
//! The crate covers the whole trust flow for a build artifact:
//!
//! * [`varenv`] and [`runner`] build a source tree twice under deliberately
//!   divergent environments and compare the outputs bit for bit.
//! * [`compare`] recursively unpacks gzip, tar and zip containers and produces
//!   a [`compare::DiffNode`] tree; [`classify`] maps that tree to likely root
//!   causes.
//! * [`normalize`] scrubs environment-inherited metadata out of archives.
//! * [`attestation`] records, signs and verifies `.buildinfo` attestations and
//!   [`consensus`] tallies them across independent builders.
//! * [`fixtures`] generates a small corpus of packages, one per class of
//!   reproducibility defect, used to exercise everything above.
//!
//! Data-parallel inner loops (member comparison, checksum computation,
//! nested normalization) go through [`Exec`]; with the `parallel` feature
//! disabled every strategy runs sequentially.

pub mod archive;
pub mod attestation;
pub mod classify;
pub mod compare;
pub mod consensus;
pub mod fixtures;
pub mod normalize;
pub mod runner;
pub mod varenv;

mod par;
pub(crate) mod timeutil;

pub use par::Exec;
