//! Multi-teacher privileged knowledge distillation with entropic optimal
//! transport.
//!
//! A multimodal teacher is trained with access to a privileged modality that
//! the student never sees. Modality adapters align each backbone with the
//! teacher's joint representation, giving a pool of teachers; for every
//! student batch the teacher with the lowest task loss is picked, and the
//! student is pulled toward it through
//!
//! * an optimal-transport loss between rows of anchor-reduced cosine
//!   similarity matrices (relational structure), and
//! * a centroid loss between batch-mean representations,
//!
//! on top of its ordinary task loss.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ot;
pub mod rng;
pub mod similarity;
pub mod synthdata;
pub mod teacherpool;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use features::{FeatureBatch, FeatureSource};
pub use tensor::{Gradients, Matrix, Tape, Var};
