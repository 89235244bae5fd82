//! One-dimensional fractal convolutional network regressing per-species
//! concentrations from an absorbance spectrum.

mod checkpoint;
mod layers;
mod model;
mod params;

pub use checkpoint::{FcnnModel, Manifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    conv1d_same, conv1d_same_backward, dense, dense_backward, half_sum, half_sum_backward, maxpool, maxpool_backward,
    relu_backward_in_place, Activation, FeatureMap,
};
pub use model::{
    backward, backward_sample, coefficient_of_determination, dropout_mask, forward_eval, forward_train,
    forward_with_mask, fractal_block_forward, loss_and_gradient, mse_loss, ForwardTrace, DEFAULT_THETA,
};
pub use params::{glorot_limit, init_params, BlockSlots, ConvSlot, FcnnConfig, FcnnParams, ParamLayout, TensorSpec};
