//! Minimal dense tensor and reverse-mode differentiation kernel.
//!
//! A [`Graph`] is a tape: every operation on a [`Var`] appends a node holding
//! the forward value and enough saved state to run its backward rule. Nodes are
//! only ever appended after their parents, so the tape order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Values are generic over [`Element`] (`f32` for training, `f64` for
//! finite-difference checks). Every op checks its output for NaN/Inf and
//! returns [`GradError::NonFinite`] instead of silently propagating garbage.
//!
//! ```
//! use gradkit::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let loss = x.sqr().unwrap().sum().unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod conv;
mod element;
mod error;
pub mod fdcheck;
mod graph;
mod linalg;
mod nn;
mod ops;
mod params;
mod shape_ops;
mod tensor;

pub use element::Element;
pub use error::GradError;
pub use graph::{Graph, Var};
pub use params::{AdamConfig, AdamState, Bound, Param, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, GradError>;
