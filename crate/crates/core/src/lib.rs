//! Unified architecture search over convolution, self-attention and MLP
//! operators with context-aware downsampling modules.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode gradient tape
//! * [`gops`] and [`dsm`]: operator blocks and downsampling modules
//! * [`archspace`]: search space, token encoding and network materialisation
//! * [`cost`]: closed-form MAC and parameter counts
//! * [`search`]: reward, LSTM controller, PPO and the search loop
//! * [`data`], [`gradcheck`], [`selftest`]: synthetic data and built-in checks

pub mod archspace;
pub mod cost;
pub mod data;
pub mod dsm;
pub mod gops;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod search;
pub mod selftest;
pub mod tensor;
