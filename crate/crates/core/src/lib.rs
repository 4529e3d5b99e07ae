//! Forward-edge control-flow integrity with Bloom-filter source
//! authorization.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`ir`] parses a toy RV64-style assembly dialect whose indirect `jalr`
//!    sites declare their possible targets.
//! 2. [`policy`] assigns section identifiers (SIDs) to code regions and
//!    derives, for every landing site, the set of source SIDs allowed to
//!    reach it (type-based or CFG-based).
//! 3. [`instrument`] inserts `bld` before protected transfers and `brl` at
//!    landing sites, and packs the per-target Bloom filters ([`bloom`]) into
//!    a read-only metadata blob.
//! 4. [`vm`] executes programs with the `bld`/`brl` semantics and the
//!    single-use `BRState` register, and [`harness`] turns runs into
//!    weighted-cycle overhead reports and attack verdicts.

pub mod bloom;
pub mod harness;
pub mod instrument;
pub mod ir;
pub mod par;
pub mod policy;
pub mod vm;
