//! Reverse-mode automatic differentiation over dense, row-major tensors.
//!
//! Graphs are built fresh for every evaluation (define-by-run). Leaves are
//! registered with [`Graph::param`] or [`Graph::constant`], operators append
//! nodes in topological order, and [`Graph::backward`] walks the tape once in
//! reverse.
//!
//! ```
//! use road_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let y = g.relu(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
//! ```

mod error;
mod float;
mod graph;
mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use float::{DType, Float};
pub use graph::{ConvSpec, GradientMap, Graph, Var};
pub use tensor::Tensor;
