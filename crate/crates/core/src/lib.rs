//! Visual place recognition with locally-global patch descriptors.
//!
//! Images become dense gradient-orientation feature maps ([`features`]),
//! which are aggregated into VLAD descriptors against a k-means vocabulary
//! ([`vlad`]). An integral residual grid ([`patchgrid`]) yields the VLAD
//! descriptor of any rectangular patch in constant time, so many patch sizes
//! can be extracted from one pass over the map. Retrieval ([`matching`])
//! shortlists references by global distance and reranks them by
//! spatially consistent patch matches fused across patch scales. Event
//! streams ([`events`]) are rendered into frames at several temporal scales
//! whose retrieval results are fused by an ensemble. [`evaluation`] computes
//! recall@k and precision-recall, and [`pipeline`] wires everything into the
//! commands exposed by the `patchplace` binary.

mod binfmt;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod features;
pub mod image;
pub mod matching;
pub mod patchgrid;
pub mod pipeline;
pub mod synthetic;
pub mod vlad;

pub use error::{Error, ErrorClass, Result};
