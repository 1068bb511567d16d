#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod avatar;
pub mod deformation;
pub mod error;
pub mod io;
pub mod kinematics;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod splat;
pub mod synth;
pub mod unprojection;

pub use error::{Error, Result};
