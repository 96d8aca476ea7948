//! Conditional flow matching for synthesizing CT volumes from a paired
//! source modality (MR or CBCT).
//!
//! A Gaussian noise volume is carried to a CT volume by integrating a
//! learned velocity field `v(x, t | c)`, where `c` is the source image. The
//! crate covers the whole pipeline: the noise-to-data path and its training
//! target ([`flow`]), fixed-step ODE integration ([`ode`]), the conditional
//! U-Net ([`net`]), intensity preprocessing ([`prep`]), masked metrics
//! ([`metrics`]), volume I/O and phantoms ([`io`]), and training/inference
//! ([`train`]).

mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ode;
pub mod prep;
pub mod train;
mod volume;

pub use error::{Error, ErrorKind, Result};
pub use volume::{IntensityKind, Volume};
