//! Multi-scale region-feature encoding: backbone pyramid, ROI align, per-level
//! projections and sentence-group aggregation.

pub mod backbone;
pub mod region;
pub mod roi;

pub use backbone::{images_to_tensor, Backbone, ConvBackbone, FeaturePyramid};
pub use region::{
    aggregate_sentence_features, encode_region_features, extract_region_patches, RegionEncoder, RegionFeatureSet,
    RegionPatches,
};
pub use roi::{roi_align, roi_align_regions};
