//! Kolmogorov–Arnold layers: learnable univariate B-spline functions on every
//! edge, summed at the output nodes. An MLP layer is kept alongside as the
//! fixed-activation reference.

mod grid;
mod layer;
mod mlp;

pub use grid::SplineGrid;
pub use layer::{kan_forward, spline_eval, KanConfig, KanLayer, SplineFunction};
pub use mlp::{mlp_forward, Activation, MlpLayer};
