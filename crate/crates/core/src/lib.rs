//! Numerical laboratory for the gradient interface model on `Z^d`: Langevin
//! samplers for finite-volume Gibbs measures, the surface tension and its
//! Hessian, homogenized coefficients through Helffer–Sjöstrand random walks,
//! parabolic solvers, and checks of the functional inequalities of the model.

pub mod coupling;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod hs;
pub mod lattice;
pub mod observables;
pub mod potential;
pub mod solvers;
pub mod stats;

pub use dynamics::{Boundary, Chain, CoupledPair, FieldState, Scheme, System, TrajectoryConfig};
pub use error::{Error, Result};
pub use lattice::{Convention, Cube, CubeKind, DirectedEdge, EdgeSet, LatticeGraph, Torus};
pub use potential::{Interaction, Potential};
pub use stats::{Estimate, MatrixEstimate};
pub use coupling::{CouplingOptions, CouplingReport, TiltCouplingReport};
pub use diagnostics::{InequalityReport, Verdict};
pub use hs::{HSEstimate, LinearObservable, Observable};
pub use observables::{SubadditiveRecord, SurfaceTensionEstimate};
