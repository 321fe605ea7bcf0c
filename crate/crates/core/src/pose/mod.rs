//! Keypoint voting, clustering and rigid fitting for 6-DOF pose.

pub mod estimate;
pub mod fit;
pub mod head;
pub mod keypoints;
pub mod losses;
pub mod meanshift;
pub mod types;

pub use estimate::{mean_errors, monte_carlo_fit, oracle_offsets, pose_rows_csv, recover_pose, PoseConfig, PoseEstimate, PoseRow};
pub use fit::{fit_pose, fit_residual, jacobi_eigen4};
pub use head::{head_loss, load_head, predict_offsets, save_head, train_head, HeadConfig, HeadExample, HeadOutput, PoseHead, TrainedHead};
pub use keypoints::{fps_indices, fps_select, min_pairwise_distance, vote_keypoints, DEFAULT_KEYPOINTS};
pub use losses::{center_loss, focal_loss, keypoint_loss, multitask_loss, FocalParams, LossWeights};
pub use meanshift::{meanshift, MeanShiftConfig, MeanShiftResult};
pub use types::{check_rotation, rodrigues, Pose, PoseRecord};
