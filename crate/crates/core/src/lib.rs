//! Source-free domain adaptation by deep clustering over nearest
//! neighborhoods, on a small extractor / bottleneck / classifier network.
//!
//! The pipeline trains a source model ([`pretrain`]), then adapts a copy of it
//! to unlabeled target data ([`adapt`]) using pseudo-labels fused from a
//! sample and its nearest neighbor ([`selflabel`], [`geometry`]).
//!
//! All numerics are generic over [`numeric::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod cli;
pub mod error;
pub mod evalreport;
pub mod geometry;
pub mod model;
pub mod numeric;
pub mod pretrain;
pub mod selflabel;
pub mod synthdata;

pub use error::{Error, Result};
pub use numeric::Scalar;

pub type Matrix = numeric::RealMatrix<f64>;
pub type Model = model::TargetModel<f64>;
pub type Dataset = synthdata::DomainDataset<f64>;
pub type Cache = selflabel::AuxiliaryCache<f64>;
pub type Grads = model::Gradients<f64>;
