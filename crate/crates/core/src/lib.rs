//! CP-parametrized neural network layers: dense tensor arithmetic, unitary
//! multidimensional DFT, CP decomposition via alternating least squares,
//! feed-forward ReLU networks with CP conv/FC layers, data-dependent
//! compressibility properties, rank-selection compression with a verified
//! output-error guarantee, and a compression-based generalization bound.

pub mod bound;
pub mod compression;
pub mod cp;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod network;
pub mod properties;
pub mod tensor;

pub use bound::{effective_params, generalization_bound, BoundReport};
pub use compression::{
    compress, compress_epsilon, fbr_fc, fbrc, fbrc_skip, project, threshold_plan,
    CompressionPlan, VerificationReport,
};
pub use cp::{cp_als, CpKernel, CpMode};
pub use error::CoreError;
pub use fourier::{conv2d_circular, conv_operator_norm_exact, imdft, mdft};
pub use harness::{corrupt_labels, make_synthetic, train, Dataset, TrainConfig};
pub use network::{forward, margin_loss, ActivationTrace, LayerSpec, NetworkModel};
pub use properties::{measure_properties, PropertyTable, TfVariant};
pub use tensor::{ComplexTensor, DenseTensor};
