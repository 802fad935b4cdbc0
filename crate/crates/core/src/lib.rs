//! Core numerics for canonicalizing featured object point clouds.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod align;
pub mod canonical;
pub mod cluster;
pub mod eval;
pub mod geometry;
pub mod spatial;
pub mod surface;
pub mod synthetic;
