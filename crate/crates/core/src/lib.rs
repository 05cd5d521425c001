// SPDX-License-Identifier: Apache-2.0

// `!(x > 0.0)` is used on purpose so NaN is rejected; nalgebra arithmetic on
// references avoids moving matrices that are used again.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::op_ref)]

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grape;
pub mod hardware;
pub mod io;
pub mod linalg;
pub mod spin_system;

pub use error::{Error, Result};
