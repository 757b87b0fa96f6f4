//! Differentiable array core, neural primitives, optimizer and schedule.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod rng;

pub use array::DArray;
pub use graph::{Gradients, Graph, Var};
pub use optim::{lr_at, AdamW, ScheduleConfig};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;

pub use graph::softmax_in_place;
