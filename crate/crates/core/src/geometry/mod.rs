//! Detector proposals, detection flags and the region completer.

pub mod completer;
pub mod detect;

pub use completer::{complete_regions, mask_regions, train_completer, train_completer_in, Completer, CompleterConfig, COORDS};
pub use detect::{resolve_detections, CanonicalDetector, Detector, DetectorInput, OracleDetector, Proposal, ProposalSet, NUM_CLASSES};
