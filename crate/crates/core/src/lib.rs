//! Heat-conduction vision backbone.
//!
//! Token mixing by discrete heat diffusion: images become temperature
//! fields, a spectral conduction operator evolves them with learned
//! per-frequency diffusivity, and a reverse-mode tape trains the whole
//! stack. Ships with an independent finite-difference physics oracle,
//! a desk-scale trainer, and a complexity benchmark against quadratic
//! attention.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod data;
pub mod dct;
pub mod error;
pub mod gemm;
pub mod hco;
pub mod layers;
pub mod memory;
pub mod model;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod viz;

/// Counting allocator so benchmarks can report peak live bytes.
#[global_allocator]
static ALLOC: memory::CountingAllocator = memory::CountingAllocator;
