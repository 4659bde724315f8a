//! Shared data model, dataset files, splits and the synthetic cohort.

pub mod clinical;
pub mod io;
pub mod split;
pub mod synth;
pub mod types;

pub use clinical::ClinicalScaler;
pub use io::{load_dataset, load_dataset_with, save_dataset, DatasetSpec, ImageStorage};
pub use split::{split_dataset, Splits};
pub use synth::{generate_synthetic_cohort, SynthConfig};
pub use types::*;

/// Version tag carried by every file this crate reads or writes.
pub const SCHEMA_VERSION: &str = "radsurv-1";

/// Clinical covariates in vector order.
pub const CLINICAL_NAMES: [&str; 16] = [
    "age",
    "sex",
    "temperature",
    "oxygen_saturation",
    "white_blood_cell_count",
    "lymphocyte_count",
    "creatinine",
    "c_reactive_protein",
    "cardiovascular_disease",
    "hypertension",
    "copd",
    "diabetes",
    "chronic_liver_disease",
    "chronic_kidney_disease",
    "cancer",
    "hiv",
];

pub const DEFAULT_CLINICAL_DIM: usize = CLINICAL_NAMES.len();

/// Indices of the continuous covariates (z-scored); the rest are 0/1 flags.
pub const CONTINUOUS_CLINICAL: [usize; 7] = [0, 2, 3, 4, 5, 6, 7];
