pub mod anchor;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod hyptest;
pub mod pipeline;
pub mod scm;
pub mod selection;
