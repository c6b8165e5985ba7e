//! Unsupervised registration around the backbone.

pub mod losses;
pub mod metrics;
pub mod sweep;
pub mod synth;
pub mod train;
pub mod transform;

pub use losses::{mse_nodes, ncc_nodes, similarity_nodes, smoothness_nodes, soft_dice_loss_nodes, Similarity};
pub use metrics::{dsc, jacobian_nonpositive_fraction};
pub use sweep::{window_sweep, SweepRow};
pub use synth::{synth_pair, SynthConfig, SyntheticPair};
pub use train::{evaluate, fit, train, Adam, LossRow, TrainConfig};
pub use transform::{identity_grid, spatial_transform_nodes, warp_labels, warp_volume};
