//! Multi-path neural network over learnable wavelet decompositions.
//!
//! Instead of convolution kernels, feature extraction is a cascade of 2-D
//! discrete wavelet transforms whose length-6 filters are generated from two
//! angles each. The angles are trained by backpropagation alongside ordinary
//! dense layers, so every filter stays exactly orthonormal at every step.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod filters;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
pub use filters::{FilterGradients, FilterPair, WaveletParams};
pub use layers::{FeatureTensor, Network, NetworkConfig};
pub use trainer::{DataSource, TrainConfig, TrainOutcome};
pub use transform::{Plane, Subbands};
