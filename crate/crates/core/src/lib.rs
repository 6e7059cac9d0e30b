//! Signal- and frequency-space Monte-Carlo dropout for convolutional
//! segmentation networks.
//!
//! The crate holds the transforms ([`spectral`]), a small trainable U-Net
//! ([`nn`]), the two dilution kinds ([`dilution`]), Monte-Carlo aggregation
//! and sweeps ([`mc`]), evaluation metrics ([`metrics`]) and a synthetic
//! dataset generator ([`synth`]).

pub mod dilution;
pub mod error;
pub mod mc;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use dilution::{DilutionConfig, DilutionPlan, DropoutKind, Placement, SiteId};
pub use error::{Error, Result};
pub use mc::{mc_run, sweep, uncertainty_map, McResult};
pub use nn::{Architecture, UNetModel};
pub use spectral::Spectrum;
pub use tensor::{ClassMap, Tensor};
