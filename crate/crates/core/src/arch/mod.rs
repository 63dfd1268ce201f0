//! Architectures beyond the plain feedforward stack.

pub mod conv;
pub mod rankone;
pub mod rnn;
