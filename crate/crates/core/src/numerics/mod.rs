//! Dense tensors, reverse-mode differentiation, Adam and the learning-rate
//! schedule. Everything is `f64`.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{lr_schedule, Adam, AdamConfig, LinearWarmupDecay};
pub use rng::RngStream;
pub use tape::{sigmoid, Gradients, ParamId, ParamStore, Parameter, Reduction, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

/// Parameters drawn from `N(0, std²)` using `rng`.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
