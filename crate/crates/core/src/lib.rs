// Parameter checks use `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod licl;
pub mod mbe;
pub mod plot;
pub mod prelim;
pub mod rng;
pub mod scene;
