pub mod datagen;
pub mod dsp;
pub mod model;
pub mod oracle;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
/// Evaluation and gradient-check precision.
pub type Real64 = f64;
pub type Tensor32 = tensor::Tensor<Real>;
pub type Tensor64 = tensor::Tensor<Real64>;
pub type Model32 = model::Model<Real>;
pub type Model64 = model::Model<Real64>;
