//! Vertical federated learning engine.
//!
//! One client (the active one) owns the labels and a complete model:
//! encoder plus task head. The other clients are passive: during training
//! they receive the active encoder's representation batches, score them
//! against their own feature views with a self-supervised objective, and
//! return only the gradient of that objective with respect to the
//! representations. The active client folds those gradients into its own,
//! so at inference time it predicts entirely alone, from its own view, with
//! zero network traffic.
//!
//! The numeric core (tensors, the autodiff tape, losses, datasets) is
//! generic over the scalar type; the aliases below fix f32, which is what
//! training and the wire format use. f64 instantiation of the same code
//! paths drives the high-precision gradient and loss oracles in the tests.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
pub type ParamStore32 = tape::ParamStore<f32>;
pub type SgdConfig32 = optim::SgdConfig<f32>;
pub type RawDataset32 = data::RawDataset<f32>;
pub type ViewMatrix32 = data::ViewMatrix<f32>;
