use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum SsError {
    /// Lattice dimensions that cannot be built consistently
    /// (e.g. a periodic torus so small that bonds would be duplicated).
    #[error("invalid lattice geometry: {0}")]
    Geometry(String),

    /// A spin configuration whose length does not match the lattice.
    #[error("configuration length {got} does not match lattice size {want}")]
    ConfigLength { got: usize, want: usize },

    /// Problem graph inconsistency (unknown site, coupler out of range, ...).
    #[error("invalid problem: {0}")]
    Problem(String),

    /// The requested embedding does not fit on the given hardware graph.
    #[error("embedding infeasible: {0}")]
    Embedding(String),

    /// A physical value outside the device range.
    #[error("device range exceeded: {0}")]
    DeviceRange(String),

    /// Parse failure in one of the text formats.
    #[error("parse error: {0}")]
    Parse(String),

    /// An iterative procedure that failed to converge.
    #[error("failed to converge: {0}")]
    NoConvergence(String),
}
