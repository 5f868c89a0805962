//! Control plane for nested virtualization clouds.

pub mod clock;
pub mod journal;
pub mod model;
pub mod queue;
pub mod scheduler;
pub mod blockstore;
pub mod perfbench;
pub mod hypersim;
pub mod cloud;
pub mod market;
