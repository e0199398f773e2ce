//! Dense arrays, a minimal reverse-mode tape, and Adam.

mod adam;
mod array;
mod tape;

pub use adam::{AdamConfig, AdamState, Moments};
pub use array::{mode1_product, softmax, Array};
pub use tape::{Gradients, Tape, Var};
