//! U-Net construction from a declarative spec.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{Network, SequenceSpan, Side, Trace};
pub use spec::ArchitectureSpec;
