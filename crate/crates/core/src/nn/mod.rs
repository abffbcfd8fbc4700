//! Minimal neural-network engine: tensors, reverse-mode autodiff, the two
//! network families used by both translators, and the Adam optimizer.

pub mod adam;
pub mod graph;
pub mod nets;
pub mod params;

pub use adam::Adam;
pub use graph::{Gradients, Graph, Tensor, Var};
pub use nets::{time_features, ConvNetSpec, DiscriminatorNet, GeneratorNet, NetKind};
pub use params::{Bound, ParamSet, Segment};
