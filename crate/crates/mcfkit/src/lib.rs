//! Morse, local Morse and Morse-Conley-Floer homology of flows on flat tori
//! and boxes in low dimension, computed at the integer chain level.
//!
//! The pipeline: scalar fields are parsed into expression trees and
//! differentiated exactly with second-order forward duals ([`expr`]); gradient
//! and general flows are integrated adaptively and critical points are found,
//! classified and oriented ([`flow`]); connecting orbits are counted with
//! signs to build boundary operators, continuation maps and chain maps induced
//! by transverse maps ([`moduli`], [`inducedmaps`]); isolating neighborhoods,
//! isolated maps, flow maps and Lyapunov functions are certified and combined
//! into Morse-Conley-Floer homology ([`conley`]); Poincare duality relates a
//! datum to its reverse-flow dual ([`duality`]). All chain-level algebra is
//! exact over arbitrary-precision integers ([`zalgebra`]).
//!
//! The structural identities the toolkit verifies on every run are exact
//! integer statements: boundary squared is zero, induced maps are chain maps,
//! continuation maps are isomorphisms on homology, dual counts are symmetric.

pub mod conley;
pub mod duality;
pub mod expr;
pub mod flow;
pub mod inducedmaps;
pub mod linalg;
pub mod moduli;
pub mod real;
pub mod report;
pub mod scenario;
pub mod zalgebra;

pub use real::Real;

/// Default scalar for the shipped pipeline.
pub type F = f64;

/// Second-order jet over the default scalar.
pub type Jet = expr::Jet2<F>;

/// Expression field evaluated over the default scalar.
pub type Field = expr::Expression;

/// Exact integer used by the chain-level algebra.
pub type Z = num_bigint::BigInt;
