//! Diffeomorphic point-cloud registration with residual-network velocity fields.
//!
//! A stack of `L` building blocks, each a small dense network
//! `f(x) = W3 (W2 act(W1 x + b1) + b2)`, defines a time-discrete velocity
//! field. Forward-Euler integration of those fields deforms a source cloud
//! onto a target. The parameters are fit with ADAM on a data term (Chamfer
//! or entropic optimal transport) plus the kinetic energy of the flow.
//!
//! Module map:
//! - [`geometry`]: point clouds, mesh I/O, normalization, rigid ICP
//! - [`spatial`]: exact kd-tree nearest-neighbour queries
//! - [`network`]: block parameters, activations, Xavier init, Lipschitz bounds
//! - [`flow`]: Euler integration of the block velocities
//! - [`objective`]: Chamfer, Sinkhorn, kinetic energy, total loss
//! - [`gradients`]: hand-written reverse mode through the unrolled flow
//! - [`solver`]: ADAM training loop, geodesic extraction
//! - [`diagnostics`]: regularity checks, activation-pattern census, TRE
//! - [`synthetic`]: deterministic benchmark shapes

pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradients;
pub mod network;
pub mod objective;
pub mod solver;
pub mod spatial;
pub mod synthetic;

pub use diagnostics::{ActivationPattern, DiagnosticsReport};
pub use error::{Error, Result};
pub use flow::FlowResult;
pub use geometry::{Normalization, PointCloud, RigidTransform};
pub use gradients::NetGradient;
pub use network::{ActivationKind, BlockParams, NetParams};
pub use objective::{DataTerm, KineticWeighting, LossConfig, LossReport, TransportPlan};
pub use solver::{AdamState, RegistrationConfig, RegistrationOutcome};

/// A point in (or vector of) three-space.
pub type Vec3 = nalgebra::Vector3<f64>;
