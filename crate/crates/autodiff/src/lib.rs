//! Small dense-tensor computation graph with reverse-mode differentiation.
//!
//! The backward pass records its own operations, so a gradient is an
//! ordinary node that can be differentiated again. This is what makes
//! gradients through unrolled optimizer steps (meta-gradients) possible.
//!
//! ```
//! use metaloss_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0).unwrap());
//! let x2 = g.square(x).unwrap();
//! let x3 = g.mul(x2, x).unwrap();
//! let d1 = g.backward(x3, &[x], true).unwrap()[0];
//! let d2 = g.backward(d1, &[x], false).unwrap()[0];
//! assert_eq!(g.value(d1).item(), 12.0);
//! assert_eq!(g.value(d2).item(), 12.0);
//! ```

mod error;
mod graph;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, softplus, Graph, Node};
pub use tensor::Tensor;
