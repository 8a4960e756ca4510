//! Action-unit blendshape composition, synthetic identities, the
//! codebook and style-conditioned basis models, training and metrics.

pub mod dataset;
pub mod error;
pub mod facs;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use facs::{AuActivation, AuId, Emotion, FacsRegistry, AU_COUNT};
pub use mesh::{compose, compose_animated, AuBases, BlendDelta, FaceMesh, IdentityBundle, OffsetSequence};
