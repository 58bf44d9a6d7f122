//! Smooth prototype equivalences.
//!
//! Fits invertible flow maps that carry sparse vector-field observations onto
//! simple normal-form prototypes, classifies the long-term behavior by the
//! best-matching prototype, and maps the prototype's invariant set back into
//! data space.
//!
//! The crate is organized bottom-up:
//!
//! - [`dynsys`]: benchmark vector fields, prototypes, RK4 integration and
//!   the sparse/grid sampling protocols.
//! - [`flow`]: the invertible map (ActNorm, positive-definite affine, and
//!   Fourier-feature coupling layers) with closed-form JVPs, inverses and
//!   log-determinants.
//! - [`train`]: the equivalence loss and its regularizers, exact gradients,
//!   and the AdamW fitting loop.
//! - [`spe`]: multi-prototype classification, invariant-set localization,
//!   cycle error and evaluation sweeps.
//! - [`io`]: CSV/JSON file formats.

pub mod dynsys;
pub mod error;
pub mod flow;
pub mod io;
pub mod rng;
pub mod spe;
pub mod train;

pub use error::{Result, SpeError};
