//! Simultaneous machine translation toolkit: prefix-to-prefix training under
//! wait-k and writing-probability schedules, length-aware pseudo
//! full-sentence decoding, streaming simulation and attention diagnostics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod laf;
pub mod policy;
pub mod stream_decode;
pub mod trainer;
pub mod transformer;
