//! Classical toolkit for quantum-annealing studies of the Shastry-Sutherland
//! Ising antiferromagnet.
//!
//! The crate covers the full pipeline used in such a study:
//!
//! * [`lattice`] — the orthogonal-dimer lattice, spin configurations and the
//!   classical energy function;
//! * [`exact`] — brute-force ground-state and finite-temperature oracles for
//!   small systems;
//! * [`chimera`] — the Chimera hardware graph, the half-cell embedding of the
//!   lattice onto it, background-susceptibility compensation and disorder
//!   injection;
//! * [`schedule`] — transverse-field annealing schedules;
//! * [`engine`] — a path-integral Monte Carlo emulator of reverse annealing;
//! * [`qemc`] — iterated reverse-anneal chains (quantum-evolution Monte Carlo);
//! * [`boundary`] — mean-field boundary-condition calibration for open
//!   systems;
//! * [`observables`] — magnetization, structure factors, phase-boundary
//!   detection and ground-state motif classification.

pub mod boundary;
pub mod chimera;
pub mod engine;
pub mod error;
pub mod exact;
pub mod lattice;
pub mod observables;
pub mod problem;
pub mod qemc;
pub mod schedule;

pub use error::SsError;
