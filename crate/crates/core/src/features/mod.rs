//! Feature extractors: Felzenszwalb HOG and a small convolutional network.

mod cnn;
mod hog;
mod weights;

pub use cnn::{cnn_forward, ConvLayer, ConvNet, ConvNetSpec};
pub use hog::{fhog_extract, HogConfig, FHOG_CHANNELS};
pub use weights::{load_weight_store, save_weight_store, StoredTensor, WeightStore};
