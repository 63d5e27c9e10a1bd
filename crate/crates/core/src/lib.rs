pub mod backend;
pub mod guidance;
mod http;
pub mod media;
pub mod prompts;
pub mod retry;
pub mod schedule;
pub mod tensor;
pub mod tiling;
pub mod window;
pub mod sampler;
