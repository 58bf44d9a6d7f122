//! Benchmark vector fields, normal-form prototypes, integration and sampling.

mod augment;
mod integrate;
mod labels;
mod prototype;
mod sampling;
mod systems;

pub use augment::{augment_system, random_warp, warp_with};
pub use integrate::{integrate, Trajectory, DEFAULT_DT};
pub use labels::{
    ground_truth_label, hopf_boundary, numeric_behavior, reference_orbit, repressilator_fixed_point,
    Behavior, HopfBoundary, OracleConfig, OracleReport, TruthLabel,
};
pub use prototype::Prototype;
pub use sampling::{
    project_dims, sample_grid, sample_sparse, Protocol, SampleMeta, SampleSet, SamplingConfig, MAX_RETRIES,
};
pub use systems::{System, SystemSpec, VectorField};
