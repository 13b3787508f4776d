//! Small reverse-mode automatic differentiation engine over dense CPU tensors.
//!
//! Generic over `f32` and `f64`; the latter is used for finite-difference gradient checks.

mod conv;
mod graph;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use conv::ConvGeometry;
pub use graph::{Gradients, Graph, Unary, Var};
pub use optim::{AdamW, AdamWConfig, Moments};
pub use param::{ParamError, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, numel, ShapeError, Tensor};

/// Finite-difference check helpers shared by tests in dependent crates.
pub mod gradcheck {
    use crate::{Graph, Tensor, Var};

    /// Compares the analytic gradient of `f` at `x` with central differences. Returns the
    /// largest relative error `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_relative_error(
        x: &Tensor<f64>,
        h: f64,
        floor: f64,
        f: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        let grads = g.backward(y);
        let analytic = grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = f(&mut g, v);
            g.value(y).item()
        };
        let mut worst: f64 = 0.0;
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        worst
    }
}
