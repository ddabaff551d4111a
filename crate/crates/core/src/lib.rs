//! Compiler and functional/timing simulator for a visual-Transformer overlay
//! processor.

pub mod compiler;
pub mod compute;
pub mod datamove;
pub mod isa;
pub mod reference;
pub mod runtime;
pub mod tensor;
pub mod verify;
