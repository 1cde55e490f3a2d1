//! Multimodal transfer modules (MMTM) for fusing parallel network streams.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: channel-last tensors and a define-by-run tape.
//! - [`mmtm`]: squeeze, joint representation, excitation and `2 sigmoid` gating
//!   for any number of modalities of any rank.
//! - [`zoo`]: early/late fusion, SE + late fusion, and convolutional MMTMs.
//! - [`streams`]: desk-scale towers with fusion points between them.
//! - [`synth`]: synthetic multimodal tasks and the dataset file format.
//! - [`costs`]: exact parameter and multiply-accumulate counts.
//! - [`train`] and [`experiment`]: SGD training, ablations and sweeps.

pub mod autodiff;
pub mod cli;
pub mod costs;
pub mod error;
pub mod experiment;
pub mod format;
pub mod gradcheck;
pub mod mmtm;
pub mod params;
pub mod streams;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result};
pub use mmtm::{Mmtm, MmtmConfig, MmtmInit, MmtmState};
pub use params::{ParamId, ParamStore};
pub use streams::{build, FusionNetwork, FusionPlan, StreamSpec};
pub use tensor::Tensor;
pub use zoo::FusionKind;
