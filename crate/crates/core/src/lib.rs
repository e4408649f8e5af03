//! Time-reversal phase estimation on a TLS + two-photonic-mode system.
//!
//! The crate covers the full pipeline:
//!
//! - [`hilbert`] — the truncated composite space, canonical operators, and
//!   named states;
//! - [`dynamics`] — time-dependent Hamiltonian assembly, exact
//!   piecewise-constant propagation, and the pulse file format;
//! - [`krotov`] — monotonically convergent pulse optimization realizing the
//!   state mappings that define the synthesis unitary;
//! - [`metrology`] — the U†·U_φ·U protocol with photon-count statistics,
//!   uncertainty, quantum Fisher information, and scaling fits;
//! - [`loss`] — photon loss as a quantum-jump unraveling, the adapted
//!   four-pair control, mixed-state Fisher information, and recovery through
//!   a projective measurement on the ancilla.

pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod krotov;
pub mod loss;
pub mod metrology;

pub use error::{Error, Result};
pub use hilbert::{
    Ensemble, OperatorMatrix, PureState, Sign, SpaceDescriptor, Subsystem,
};

pub use dynamics::{ControlSystem, DriftSpec, PulseSet, Trajectory};
pub use krotov::{ControlProblem, KrotovConfig, OptimizationRecord};
pub use loss::{AdaptedProtocolSpec, LossSpec};
pub use metrology::{ProtocolSpec, ScalingFit, ScalingPoint, SweepResult, SweepSummary};
