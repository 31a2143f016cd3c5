//! Model I/O: the NTF tensor format, checkpoints with selective
//! pretrained initialization, and cost accounting.

pub mod checkpoint;
pub mod count;
pub mod ntf;

pub use checkpoint::{Checkpoint, InitReport};
pub use count::{count_flops, count_params, CostReport};
