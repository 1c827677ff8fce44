//! Bit-packed sign storage and the CPU GEMV kernels built on it.

pub mod bench;
mod fused;
mod gemv;
mod packed;

pub use bench::{bench, bench_input, BenchReport, KernelId, CSV_HEADER, PAPER_SHAPES};
pub use fused::{
    fused_mos_gemv, DenseGemvKernel, MosGemvKernel, PartialGemvKernel, ResidualGemvKernel,
    StaticScaleGemvKernel,
};
pub use gemv::{binary_gemm, binary_gemv, binary_gemv_into, LutScratch, Real};
pub use packed::{words_per_row, PackedBitMatrix};
