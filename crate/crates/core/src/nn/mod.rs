//! Minimal neural-network toolkit: a gradient tape, layers, and Adam.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Gradients, Mat, Tape, Var};
