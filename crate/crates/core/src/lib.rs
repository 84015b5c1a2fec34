//! Joint variational object segmentation and shape matching on discrete measures.
//!
//! A deformable template measure is matched to image data by exact partial
//! optimal transport over a low-dimensional space of deformation modes
//! (translation, rotation, scale and learned statistical fields). The mode
//! coefficients are optimized either globally, by branch and bound over an
//! adaptive convex relaxation, or locally, by alternating minimization; a
//! min-cut relaxation backend handles TV-regularized segmentations.
//!
//! Module map:
//!
//! * [`measure`] — discrete measures, segmentations, couplings, feature costs.
//! * [`modes`] — geometric and learned deformation modes, Neumann lifting.
//! * [`transport`] — cost assembly and the exact partial transport solver.
//! * [`graphcut`] — max-flow/min-cut for the relaxed inner problem.
//! * [`energy`] — the energy family and its box lower bounds.
//! * [`alternating`] — locally optimal alternating minimization.
//! * [`bnb`] — globally optimal branch and bound and the combined pipeline.
//! * [`synth`] — synthetic scenario generation and mask scoring.
//! * [`io`] — file formats (JSON, PGM, CSV, JSONL).

pub mod alternating;
pub mod bnb;
pub mod energy;
pub mod error;
pub mod graphcut;
pub mod io;
pub mod measure;
pub mod modes;
pub mod synth;
pub mod transport;

pub use error::{Error, Result};
