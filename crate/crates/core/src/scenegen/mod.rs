//! Procedural stereo scenes of a box-and-panels spacecraft: mesh, pose
//! sampling, rendering under four lighting regimes, ground truth and the
//! on-disk dataset layout.

pub mod dataset;
pub mod render;
pub mod target;
pub mod validate;

pub use dataset::{
    generate_dataset, head_example, plan, pose_input, read_dataset, render_all, render_entry, sample_seed, split_of, splitmix64, tags_of,
    Dataset, DatasetConfig, DatasetManifest, PoseInput, SampleEntry, Split, MANIFEST, MIN_SAMPLES,
};
pub use render::{
    masked_mean, render_sample, sample_pose, Illumination, NoiseParams, NoiseTag, SceneSample, MASK_BACKGROUND, MASK_BOTH,
    MASK_LEFT_ONLY, Z_RANGE,
};
pub use target::{build_target, Part, TargetModel, TargetParams};
pub use validate::{check_consistency, validate_sample, ConsistencyReport, Tolerance};
