//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: everything the recurrent encoders,
//! decoders and variational objectives need, and nothing more.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use tape::{logsumexp, sigmoid, Gradients, Tape, Var};
