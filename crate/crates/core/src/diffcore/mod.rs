//! Differentiation core: tensors, a reverse-mode tape, parameter storage,
//! seeded random streams and the neural building blocks used by the
//! encoder, the MI constraints and the policy.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{gru_sequence, Activation, Binder, Gru, Linear, Mlp2, SelfAttention};
pub use ops::{
    gaussian_log_density, kl_diag_gaussian_to_standard, linear, reparameterize, scaled_dot_attention, Noise,
};
pub use optim::Adam;
pub use params::{ParamId, Parameter, ParameterStore};
pub use rng::Rng;
pub use tensor::Tensor;
