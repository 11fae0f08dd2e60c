//! Semi-synthetic ground truth: lesions, substrates, deficits, noise and
//! dataset splits.

mod dataset;
mod deficit;
mod lesions;
mod substrate;

pub use dataset::{
    load_dataset, save_dataset, simulate_dataset, stratified_sample, Dataset, LabelType, Split,
    Splits,
};
pub use deficit::{
    apply_noise, deficit_binary, deficit_linear, deficit_sigmoid, overlap_ratio, DeficitModel,
    Noise, Omega,
};
pub use lesions::{
    generate_lesions, hit_map, voxelize_ellipsoid, LesionDistributionSpec, OrientationMode,
    StructuredOrientation,
};
pub use substrate::{blob_field, realize_substrate, Blob, Formula, Substrate, SubstrateSpec};

use crate::grids::GridError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("lesion {0} stayed empty after 100 resamples")]
    DegenerateLesion(usize),
    #[error("blob {0:?} has no voxel above threshold")]
    EmptyBlob(String),
    #[error("ground-truth substrate is empty")]
    EmptySubstrate,
    #[error("formula: {0}")]
    Formula(String),
    #[error("noise model does not match label type: {0}")]
    NoiseMismatch(String),
    #[error("stratification infeasible: {0}")]
    Infeasible(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
